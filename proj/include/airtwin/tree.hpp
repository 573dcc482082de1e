#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "table.hpp"

namespace airtwin::models {

/// Flattened tree node. A node is a leaf iff feature < 0. Samples with
/// x[feature] <= threshold go left.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
    std::size_t n_samples = 0;

    bool is_leaf() const noexcept { return feature < 0; }
    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct RegressionTree {
    /// Pre-order; nodes[0] is the root.
    std::vector<TreeNode> nodes;

    double predict(std::span<const double> row) const {
        std::size_t i = 0;
        while (!nodes[i].is_leaf()) {
            const auto& nd = nodes[i];
            i = static_cast<std::size_t>(row[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right);
        }
        return nodes[i].value;
    }

    int depth() const { return depth_from(0); }

    friend bool operator==(const RegressionTree&, const RegressionTree&) = default;

private:
    int depth_from(std::size_t i) const {
        if (nodes[i].is_leaf()) return 0;
        return 1 + std::max(depth_from(static_cast<std::size_t>(nodes[i].left)),
                            depth_from(static_cast<std::size_t>(nodes[i].right)));
    }
};

struct TreeParams {
    /// Maximum number of split levels; negative means unlimited.
    int max_depth = -1;
    std::size_t min_samples_leaf = 1;
    /// Fraction of features drawn (without replacement) at every node.
    double feature_subsample = 1.0;
};

/// Column-major copy of a design matrix, the layout the split search wants.
struct ColumnData {
    std::size_t n = 0;
    std::size_t p = 0;
    std::vector<double> data;

    explicit ColumnData(const FeatureTable& t) : n(t.rows()), p(t.cols()), data(t.rows() * t.cols()) {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < p; ++c) data[c * n + r] = t.at(r, c);
    }

    double at(std::size_t r, std::size_t c) const { return data[c * n + r]; }
};

namespace detail {

inline constexpr double kTieTolerance = 1e-9;

/// Mean computed relative to the first value, so a run of identical values
/// returns that value bit-exactly.
inline double stable_mean(std::span<const double> v) {
    const double first = v[0];
    double s = 0.0;
    for (double x : v) s += x - first;
    return first + s / static_cast<double>(v.size());
}

/// Greedy CART builder over presorted per-feature sample orders. Every node
/// owns the same [begin, end) range in each order array.
class TreeBuilder {
public:
    TreeBuilder(const ColumnData& x, std::span<const double> y, std::span<const std::size_t> sample_rows,
                const TreeParams& params, Rng& rng, std::vector<double>& importance)
        : params_(params), rng_(rng), importance_(importance), m_(sample_rows.size()), p_(x.p) {
        xs_.resize(p_ * m_);
        ys_.resize(m_);
        for (std::size_t s = 0; s < m_; ++s) {
            ys_[s] = y[sample_rows[s]];
            for (std::size_t f = 0; f < p_; ++f) xs_[f * m_ + s] = x.at(sample_rows[s], f);
        }
        order_.resize(p_ * m_);
        for (std::size_t f = 0; f < p_; ++f) {
            auto* o = order_.data() + f * m_;
            std::iota(o, o + m_, std::uint32_t{0});
            const double* col = xs_.data() + f * m_;
            std::sort(o, o + m_, [col](std::uint32_t a, std::uint32_t b) {
                return col[a] < col[b] || (col[a] == col[b] && a < b);
            });
        }
        goes_left_.resize(m_);
        scratch_.resize(m_);
        node_y_.reserve(m_);
        features_.resize(p_);
        n_try_ = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(params_.feature_subsample * static_cast<double>(p_))));
        n_try_ = std::min(n_try_, p_);
    }

    RegressionTree build() {
        RegressionTree tree;
        grow(tree, 0, m_, 0);
        return tree;
    }

private:
    struct Split {
        int feature = -1;
        double threshold = 0.0;
        double gain = 0.0;
        std::size_t n_left = 0;
    };

    int grow(RegressionTree& tree, std::size_t begin, std::size_t end, int depth) {
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        const std::size_t count = end - begin;

        // Any order array holds the node's samples; use feature 0's.
        node_y_.clear();
        for (std::size_t i = begin; i < end; ++i) node_y_.push_back(ys_[order_[i]]);
        const double mean = stable_mean(node_y_);
        bool constant = true;
        for (double v : node_y_) constant = constant && v == node_y_[0];

        TreeNode leaf;
        leaf.value = mean;
        leaf.n_samples = count;

        const bool depth_ok = params_.max_depth < 0 || depth < params_.max_depth;
        if (!depth_ok || count < 2 * params_.min_samples_leaf || constant || p_ == 0) {
            tree.nodes[static_cast<std::size_t>(id)] = leaf;
            return id;
        }
        double node_sse = 0.0;
        for (double v : node_y_) node_sse += (v - mean) * (v - mean);

        const Split best = find_split(begin, end, node_sse);
        if (best.feature < 0) {
            tree.nodes[static_cast<std::size_t>(id)] = leaf;
            return id;
        }
        importance_[static_cast<std::size_t>(best.feature)] += best.gain;

        const double* col = xs_.data() + static_cast<std::size_t>(best.feature) * m_;
        for (std::size_t i = begin; i < end; ++i) {
            const auto s = order_[static_cast<std::size_t>(best.feature) * m_ + i];
            goes_left_[s] = col[s] <= best.threshold;
        }
        for (std::size_t f = 0; f < p_; ++f) {
            auto* o = order_.data() + f * m_;
            std::size_t l = begin, r = 0;
            for (std::size_t i = begin; i < end; ++i) {
                if (goes_left_[o[i]]) o[l++] = o[i];
                else scratch_[r++] = o[i];
            }
            std::copy_n(scratch_.begin(), r, o + l);
        }
        const std::size_t mid = begin + best.n_left;
        TreeNode split;
        split.feature = best.feature;
        split.threshold = best.threshold;
        split.value = mean;
        split.n_samples = count;
        const int left = grow(tree, begin, mid, depth + 1);
        const int right = grow(tree, mid, end, depth + 1);
        split.left = left;
        split.right = right;
        tree.nodes[static_cast<std::size_t>(id)] = split;
        return id;
    }

    Split find_split(std::size_t begin, std::size_t end, double node_sse) {
        std::iota(features_.begin(), features_.end(), std::size_t{0});
        if (n_try_ < p_) {
            for (std::size_t i = 0; i < n_try_; ++i) std::swap(features_[i], features_[i + rng_.index(p_ - i)]);
            std::sort(features_.begin(), features_.begin() + static_cast<std::ptrdiff_t>(n_try_));
        }
        const std::size_t count = end - begin;
        const double total_n = static_cast<double>(count);
        const std::size_t min_leaf = params_.min_samples_leaf;
        // A split must remove a non-negligible share of the node's error.
        const double min_gain = 1e-12 * node_sse;

        Split best;
        for (std::size_t t = 0; t < n_try_; ++t) {
            const std::size_t f = features_[t];
            const auto* o = order_.data() + f * m_;
            const double* col = xs_.data() + f * m_;
            double total = 0.0;
            for (std::size_t i = begin; i < end; ++i) total += ys_[o[i]];
            double left_sum = 0.0;
            for (std::size_t i = begin; i + 1 < end; ++i) {
                left_sum += ys_[o[i]];
                const std::size_t nl = i - begin + 1;
                const std::size_t nr = count - nl;
                const double xv = col[o[i]];
                const double xn = col[o[i + 1]];
                if (!(xv < xn)) continue;
                if (nl < min_leaf) continue;
                if (nr < min_leaf) break;
                const double ml = left_sum / static_cast<double>(nl);
                const double mr = (total - left_sum) / static_cast<double>(nr);
                const double gain = static_cast<double>(nl) * static_cast<double>(nr) / total_n * (ml - mr) * (ml - mr);
                // Gains within rounding noise of the best count as ties and
                // keep the earlier (feature, threshold) candidate.
                if (gain > best.gain * (1.0 + kTieTolerance) && gain > min_gain) {
                    double thr = 0.5 * (xv + xn);
                    if (!(thr < xn)) thr = xv;
                    best = {static_cast<int>(f), thr, gain, nl};
                }
            }
        }
        return best;
    }

    const TreeParams& params_;
    Rng& rng_;
    std::vector<double>& importance_;
    std::size_t m_;
    std::size_t p_;
    std::size_t n_try_ = 1;
    std::vector<double> xs_;
    std::vector<double> ys_;
    std::vector<std::uint32_t> order_;
    std::vector<char> goes_left_;
    std::vector<std::uint32_t> scratch_;
    std::vector<double> node_y_;
    std::vector<std::size_t> features_;
};

}  // namespace detail

/// Builds a tree on the given sample rows (duplicates allowed, as produced by
/// bootstrapping). Adds each split's error reduction to `importance`.
inline RegressionTree build_tree(const ColumnData& x, std::span<const double> y, std::span<const std::size_t> sample_rows,
                                 const TreeParams& params, Rng& rng, std::vector<double>& importance) {
    if (sample_rows.empty()) throw NoData("cannot fit a tree on zero rows");
    if (params.feature_subsample <= 0.0 || params.feature_subsample > 1.0)
        throw InvalidConfig("feature_subsample must lie in (0, 1]");
    if (params.min_samples_leaf < 1) throw InvalidConfig("min_samples_leaf must be >= 1");
    if (importance.size() != x.p) importance.assign(x.p, 0.0);
    detail::TreeBuilder builder(x, y, sample_rows, params, rng, importance);
    return builder.build();
}

struct TreeFit {
    RegressionTree tree;
    std::vector<double> importance;
};

/// Greedy CART on every labelled row of the table.
inline TreeFit fit_tree(const FeatureTable& table, const TreeParams& params, Rng& rng) {
    if (table.rows() == 0) throw NoData("cannot fit a tree on an empty table");
    const auto rows = table.target_rows();
    if (rows.empty()) throw NoData("table has no labelled rows");
    if (rows.size() < 2 * params.min_samples_leaf)
        throw InvalidConfig("need at least 2*min_samples_leaf labelled rows");
    const ColumnData x(table);
    TreeFit fit;
    fit.importance.assign(table.cols(), 0.0);
    fit.tree = build_tree(x, table.y, rows, params, rng, fit.importance);
    return fit;
}

}  // namespace airtwin::models
