// airtwin command-line front end.
//
// Exit codes: 0 ok, 2 input/output problem, 64 usage or invalid configuration,
// 70 any other failure.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "airtwin/airtwin.hpp"
#include "airtwin/service_http.hpp"

namespace {

using namespace airtwin;
namespace fs = std::filesystem;
using KV = io::KeyValues;

constexpr int kExitOk = 0;
constexpr int kExitIo = 2;
constexpr int kExitUsage = 64;
constexpr int kExitInternal = 70;

int exit_code_for(const Error& e) {
    const auto& k = e.kind();
    if (k == "IoError" || k == "ParseError") return kExitIo;
    if (k == "InvalidConfig") return kExitUsage;
    return kExitInternal;
}

nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(io::read_file(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(0, p.string() + ": " + e.what());
    }
}

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

fs::path sibling(const fs::path& p, const std::string& name) { return p.parent_path() / name; }

decision::TwinView read_view(const fs::path& p, decision::Source src) {
    decision::TwinView v;
    v.source = src;
    for (auto& [zone, value] : synth::read_zone_values_csv(io::read_file(p))) {
        v.zone_ids.push_back(zone);
        v.values.push_back(value);
    }
    return v;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& f : io::split_csv_line(s)) {
        auto v = io::parse_double(f);
        if (!v) throw InvalidConfig("not a number: '" + f + "'");
        out.push_back(*v);
    }
    return out;
}

struct Common {
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* sub, Common& c, const std::string& out_default, const std::string& out_help) {
    sub->add_option("--seed", c.seed, "Random seed");
    sub->add_option("--out", c.out, out_help)->default_val(out_default);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spatially lagged tree-ensemble twin for zone-level NO2"};
    app.require_subcommand(1);
    unsigned threads = 0;
    app.add_option("--threads", threads, "Worker threads (0 = all cores); results do not depend on it")->default_val(0);

    // generate-city
    Common gen_c;
    std::size_t gen_zones = 100;
    double gen_rho = 0.6, gen_coverage = 1.0;
    std::string gen_config;
    auto* gen = app.add_subcommand("generate-city", "Write a procedural city: zones, features, target, stations");
    add_common(gen, gen_c, "city", "Output directory");
    gen->add_option("--zones", gen_zones, "Number of zones")->default_val(100);
    gen->add_option("--rho", gen_rho, "Spatial dependence of the target, in [0, 0.8]")->default_val(0.6);
    gen->add_option("--coverage", gen_coverage, "Fraction of zones with a station")->default_val(1.0);
    gen->add_option("--config", gen_config, "Generator JSON; flags given explicitly take precedence");

    // ingest
    Common ing_c;
    std::string ing_zones, ing_meas, ing_table, ing_start, ing_end;
    std::vector<double> ing_origin;
    auto* ing = app.add_subcommand("ingest", "Aggregate EEA station readings to zones");
    add_common(ing, ing_c, "table.csv", "Feature table CSV");
    ing->add_option("--zones", ing_zones, "Zones GeoJSON")->required();
    ing->add_option("--measurements", ing_meas, "EEA station CSV")->required();
    ing->add_option("--table", ing_table, "Feature table CSV replacing the GeoJSON properties");
    ing->add_option("--window-start", ing_start, "ISO-8601 start of the averaging window");
    ing->add_option("--window-end", ing_end, "ISO-8601 end of the averaging window");
    ing->add_option("--origin", ing_origin, "Projection origin lat lon")->expected(2);

    // weights
    Common w_c;
    std::string w_zones, w_scheme = "knn";
    std::size_t w_k = 8;
    auto* wsub = app.add_subcommand("weights", "Build row-standardized spatial weights");
    add_common(wsub, w_c, "weights.csv", "Weights CSV");
    wsub->add_option("--zones", w_zones, "Zones GeoJSON")->required();
    wsub->add_option("--scheme", w_scheme, "knn, rook or queen")->default_val("knn");
    wsub->add_option("--k", w_k, "Neighbours for knn")->default_val(8);

    // moran
    Common m_c;
    std::string m_table = "table.csv", m_weights = "weights.csv", m_feature;
    std::size_t m_perm = 999;
    auto* msub = app.add_subcommand("moran", "Moran's I with a permutation test");
    add_common(msub, m_c, "", "Optional JSON output");
    msub->add_option("--table", m_table, "Feature table CSV")->default_val("table.csv");
    msub->add_option("--weights", m_weights, "Weights CSV")->default_val("weights.csv");
    msub->add_option("--feature", m_feature, "Column to test; 'no2' tests the target; default: every column");
    msub->add_option("--permutations", m_perm, "Permutations (>= 99)")->default_val(999);

    // augment
    Common a_c;
    std::string a_table = "table.csv", a_weights = "weights.csv", a_catalog;
    double a_cutoff = 0.6;
    auto* asub = app.add_subcommand("augment", "Append spatial lags of autocorrelated features");
    add_common(asub, a_c, "table_lagged.csv", "Augmented table CSV");
    asub->add_option("--table", a_table, "Feature table CSV")->default_val("table.csv");
    asub->add_option("--weights", a_weights, "Weights CSV")->default_val("weights.csv");
    asub->add_option("--cutoff", a_cutoff, "Moran's I cutoff")->default_val(0.6);
    asub->add_option("--catalog", a_catalog, "Catalog JSON (default: catalog.json next to --out)");

    // train / evaluate
    Common t_c, e_c;
    std::string t_table = "table.csv", t_kind = "gbt", t_model_cfg, t_report;
    std::size_t t_k = 10;
    auto* tsub = app.add_subcommand("train", "Fit a model and write it with its cross-validation report");
    add_common(tsub, t_c, "model.json", "Model JSON");
    tsub->add_option("--table", t_table, "Feature table CSV")->default_val("table.csv");
    tsub->add_option("--kind", t_kind, "random_forest or gbt")->default_val("gbt");
    tsub->add_option("--model-config", t_model_cfg, "Model hyper-parameter JSON");
    tsub->add_option("--folds", t_k, "Cross-validation folds")->default_val(10);
    tsub->add_option("--report", t_report, "Eval report JSON (default: eval_report.json next to --out)");

    std::string e_table = "table.csv", e_kind = "gbt", e_model_cfg;
    std::size_t e_k = 10;
    auto* esub = app.add_subcommand("evaluate", "k-fold cross-validation report");
    add_common(esub, e_c, "eval_report.json", "Eval report JSON");
    esub->add_option("--table", e_table, "Feature table CSV")->default_val("table.csv");
    esub->add_option("--kind", e_kind, "random_forest or gbt")->default_val("gbt");
    esub->add_option("--model-config", e_model_cfg, "Model hyper-parameter JSON");
    esub->add_option("--folds", e_k, "Cross-validation folds")->default_val(10);

    // synth
    Common s_c;
    std::string s_model = "model.json", s_table = "table.csv", s_scenario, s_weights;
    auto* ssub = app.add_subcommand("synth", "Predict every zone, optionally under a scenario");
    add_common(ssub, s_c, "synthetic.csv", "Synthetic values CSV (provenance goes to a .json sidecar)");
    ssub->add_option("--model", s_model, "Model JSON")->default_val("model.json");
    ssub->add_option("--table", s_table, "Feature table CSV")->default_val("table.csv");
    ssub->add_option("--scenario", s_scenario, "Scenario JSON");
    ssub->add_option("--weights", s_weights, "Weights CSV used to recompute lag columns");

    // decide
    Common d_c;
    std::string d_policy, d_real, d_synth;
    auto* dsub = app.add_subcommand("decide", "Agreement of decisions on real and synthetic values");
    add_common(dsub, d_c, "", "Optional decisions CSV (JSON report next to it)");
    dsub->add_option("--policy", d_policy, "Policy JSON (default policy when omitted)");
    dsub->add_option("--real", d_real, "zone_id,value CSV of observed values")->required();
    dsub->add_option("--synth", d_synth, "zone_id,value CSV of synthetic values")->required();

    // sensitivity
    Common n_c;
    std::string n_policy, n_real, n_sds = "0,1,2,4,8";
    std::size_t n_trials = 1000;
    auto* nsub = app.add_subcommand("sensitivity", "Agreement under Gaussian noise of growing sd");
    add_common(nsub, n_c, "sensitivity.csv", "Sensitivity CSV");
    nsub->add_option("--policy", n_policy, "Policy JSON (default policy when omitted)");
    nsub->add_option("--real", n_real, "zone_id,value CSV of observed values")->required();
    nsub->add_option("--sds", n_sds, "Comma-separated noise sds")->default_val("0,1,2,4,8");
    nsub->add_option("--trials", n_trials, "Trials per sd (>= 100)")->default_val(1000);

    // run
    Common r_c;
    std::string r_config;
    auto* rsub = app.add_subcommand("run", "Run the whole pipeline from a JSON config");
    rsub->alias("run-pipeline");
    add_common(rsub, r_c, "", "Output directory (overrides the config)");
    rsub->add_option("--config", r_config, "Pipeline config JSON; defaults apply when omitted");

    // serve
    Common v_c;
    std::string v_dir = "out";
    service::HttpConfig http;
    auto* vsub = app.add_subcommand("serve", "Serve a pipeline output directory over HTTP");
    add_common(vsub, v_c, "", "Optional JSON file receiving the bound address once listening");
    vsub->add_option("--dir", v_dir, "Snapshot directory")->envname("AIRTWIN_SNAPSHOT_DIR")->default_val("out");
    vsub->add_option("--host", http.host, "Bind address")->envname("AIRTWIN_BIND")->default_val("127.0.0.1");
    vsub->add_option("--port", http.port, "Port; 0 picks a free one")->envname("AIRTWIN_PORT")->default_val(8080);
    vsub->add_option("--cors-origin", http.cors_origin, "Allowed CORS origin")->envname("AIRTWIN_CORS_ORIGIN")->default_val("*");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }
    set_max_threads(threads);

    try {
        if (*gen) {
            geo::GeneratorConfig cfg = gen_config.empty() ? geo::GeneratorConfig{} : geo::generator_config_from_json(read_json(gen_config));
            if (gen_c.seed) cfg.seed = *gen_c.seed;
            if (gen->count("--zones") || gen_config.empty()) cfg.n_zones = gen_zones;
            if (gen->count("--rho") || gen_config.empty()) cfg.rho = gen_rho;
            if (gen->count("--coverage") || gen_config.empty()) cfg.sensor_coverage = gen_coverage;
            const auto city = geo::generate_synthetic_city(cfg);
            const fs::path dir = gen_c.out;
            io::write_file(dir / "zones.geojson", dump(geo::zones_to_geojson(city.zones)));
            io::write_file(dir / "table.csv", table_to_csv(city.table));
            const auto w = pipeline::build_weights(city.zones, spatial::WeightScheme::knn, cfg.knn_k);
            io::write_file(dir / "weights.csv", spatial::weights_to_csv(w));
            io::write_file(dir / "stations.csv", geo::measurements_to_csv(geo::synthesize_stations(city)));
            std::string truth = "zone_id,value\n";
            std::string observed = "zone_id,value\n";
            for (std::size_t i = 0; i < city.truth.size(); ++i) {
                truth += city.table.zone_ids[i] + "," + io::format_double(city.truth[i]) + "\n";
                if (city.table.has_target(i)) observed += city.table.zone_ids[i] + "," + io::format_double(city.table.y[i]) + "\n";
            }
            io::write_file(dir / "truth.csv", truth);
            io::write_file(dir / "observed.csv", observed);
            io::write_file(dir / "generator.json", dump(geo::to_json(cfg)));
            std::cout << KV().add("stage", "generate-city").add("zones", city.table.rows()).add("features", city.table.cols())
                             .add("labelled", city.table.target_rows().size()).add("out", dir.string()).str()
                      << '\n';
        } else if (*ing) {
            std::optional<geo::GeoPoint> origin;
            if (!ing_origin.empty()) origin = geo::GeoPoint{ing_origin[0], ing_origin[1]};
            pipeline::DataConfig d;
            d.zones = ing_zones;
            d.table = ing_table;
            d.measurements = ing_meas;
            d.origin = origin;
            if (!ing_start.empty() || !ing_end.empty()) {
                geo::TimeWindow win;
                if (!ing_start.empty()) {
                    auto t = geo::parse_timestamp(ing_start);
                    if (!t) throw InvalidConfig("bad --window-start");
                    win.begin = *t;
                }
                if (!ing_end.empty()) {
                    auto t = geo::parse_timestamp(ing_end);
                    if (!t) throw InvalidConfig("bad --window-end");
                    win.end = *t;
                }
                d.window = win;
            }
            const auto data = pipeline::load_data(d);
            io::write_file(ing_c.out, table_to_csv(data.table));
            std::cout << KV().add("stage", "ingest").add("zones", data.table.rows()).add("features", data.table.cols())
                             .add("labelled", data.table.target_rows().size()).add("missing", data.missing_zones.size())
                             .add("out", ing_c.out).str()
                      << '\n';
        } else if (*wsub) {
            const auto zones = geo::load_zones_geojson(w_zones);
            const auto w = pipeline::build_weights(zones, spatial::parse_scheme(w_scheme), w_k);
            io::write_file(w_c.out, spatial::weights_to_csv(w));
            std::cout << KV().add("stage", "weights").add("scheme", w_scheme).add("zones", w.n).add("islands", w.islands().size())
                             .add("out", w_c.out).str()
                      << '\n';
        } else if (*msub) {
            const auto table = table_from_csv(io::read_file(m_table));
            const auto w = spatial::weights_from_csv(io::read_file(m_weights));
            std::vector<std::pair<std::string, std::vector<double>>> cols;
            if (m_feature.empty()) {
                for (std::size_t c = 0; c < table.cols(); ++c) cols.emplace_back(table.feature_names[c], table.column(c));
            } else if (m_feature == "no2") {
                cols.emplace_back("no2", table.y);
            } else {
                cols.emplace_back(m_feature, table.column(table.require_column(m_feature)));
            }
            nlohmann::ordered_json all = nlohmann::ordered_json::object();
            for (const auto& [name, col] : cols) {
                const auto r = spatial::morans_permutation_test(w, col, m_perm, m_c.seed.value_or(1));
                all[name] = spatial::to_json(r);
                std::cout << KV().add("feature", name).add("I", r.I).add("E_I", r.expected_I).add("z", r.z_score)
                                 .add("p", r.p_value).str()
                          << '\n';
            }
            if (!m_c.out.empty()) io::write_file(m_c.out, dump(m_feature.empty() ? all : all.begin().value()));
        } else if (*asub) {
            const auto table = table_from_csv(io::read_file(a_table));
            const auto w = spatial::weights_from_csv(io::read_file(a_weights));
            const auto res = features::augment_with_lags(table, w, features::LagOptions{a_cutoff, {}});
            io::write_file(a_c.out, table_to_csv(res.table));
            const fs::path cat = a_catalog.empty() ? sibling(a_c.out, "catalog.json") : fs::path(a_catalog);
            io::write_file(cat, dump(features::to_json(res.catalog)));
            std::cout << KV().add("stage", "augment").add("lags", res.table.cols() - table.cols()).add("features", res.table.cols())
                             .add("out", a_c.out).str()
                      << '\n';
        } else if (*tsub || *esub) {
            const bool training = tsub->parsed();
            const auto& c = training ? t_c : e_c;
            const auto table = table_from_csv(io::read_file(training ? t_table : e_table));
            const auto& cfg_path = training ? t_model_cfg : e_model_cfg;
            auto spec = cfg_path.empty() ? models::ModelSpec{} : models::model_spec_from_json(read_json(cfg_path));
            spec.kind = models::parse_model_kind(training ? t_kind : e_kind);
            models::CvConfig cv;
            cv.k = training ? t_k : e_k;
            if (c.seed) {
                if (training) {
                    spec.forest.seed = *c.seed;
                    spec.boost.seed = *c.seed;
                } else {
                    cv.seed = *c.seed;
                }
            }
            const auto report = models::cross_validate(table, spec, cv);
            fs::path report_path = training ? (t_report.empty() ? sibling(c.out, "eval_report.json") : fs::path(t_report)) : fs::path(c.out);
            io::write_file(report_path, models::report_to_json(report) + "\n");
            KV line;
            line.add("stage", training ? "train" : "evaluate").add("model", models::to_string(spec.kind))
                .add("accuracy", report.accuracy_pct).add("std", report.accuracy_std_pct).add("report", report_path.string());
            if (training) {
                const auto model = models::fit_model(table, spec);
                io::write_file(c.out, models::model_to_string(model) + "\n");
                line.add("version", models::model_hash(model)).add("out", c.out);
            }
            std::cout << line.str() << '\n';
        } else if (*ssub) {
            const auto model = models::model_from_json(read_json(s_model));
            const auto table = table_from_csv(io::read_file(s_table));
            std::optional<synth::Scenario> scenario;
            if (!s_scenario.empty()) scenario = synth::scenario_from_json(read_json(s_scenario));
            std::optional<spatial::SpatialWeights> w;
            if (!s_weights.empty()) w = spatial::weights_from_csv(io::read_file(s_weights));
            const auto ds = synth::generate_synthetic(model, table, scenario, w ? &*w : nullptr);
            io::write_file(s_c.out, synth::synthetic_to_csv(ds));
            fs::path side = s_c.out;
            side.replace_extension(".json");
            io::write_file(side, dump(synth::provenance_json(ds, scenario)));
            std::cout << KV().add("stage", "synth").add("scenario", ds.scenario_id).add("zones", ds.values.size())
                             .add("model_version", ds.model_version).add("out", s_c.out).str()
                      << '\n';
        } else if (*dsub) {
            const auto policy = d_policy.empty() ? decision::DecisionPolicy{} : decision::policy_from_json(read_json(d_policy));
            const auto rep = decision::equality_of_decisions(policy, read_view(d_real, decision::Source::real),
                                                             read_view(d_synth, decision::Source::synthetic));
            if (!d_c.out.empty()) {
                io::write_file(d_c.out, decision::report_to_csv(rep));
                fs::path side = d_c.out;
                side.replace_extension(".json");
                io::write_file(side, dump(decision::to_json(rep)));
            }
            std::cout << KV().add("agreement_rate", rep.agreement_rate).add("n_zones", rep.per_zone.size())
                             .add("n_agree", rep.n_agree).add("min_separation", rep.min_separation_real)
                             .add("mean_margin", rep.mean_margin).str()
                      << '\n';
        } else if (*nsub) {
            const auto policy = n_policy.empty() ? decision::DecisionPolicy{} : decision::policy_from_json(read_json(n_policy));
            const auto rows = decision::prop1_sensitivity(policy, read_view(n_real, decision::Source::real), parse_list(n_sds),
                                                          n_trials, n_c.seed.value_or(1));
            io::write_file(n_c.out, decision::sensitivity_to_csv(rows));
            for (const auto& r : rows)
                std::cout << KV().add("sd", r.sd).add("mean_agreement", r.mean_agreement).add("sd_agreement", r.sd_agreement).str()
                          << '\n';
        } else if (*rsub) {
            auto cfg = r_config.empty() ? pipeline::config_from_json(nlohmann::json::object()) : pipeline::load_config(r_config);
            if (r_c.seed) {
                cfg.seed = *r_c.seed;
                if (cfg.data.generate) cfg.data.generate->seed = *r_c.seed;
            }
            if (!r_c.out.empty()) cfg.output_dir = r_c.out;
            const auto res = pipeline::run_pipeline(cfg, std::cout);
            std::cout << KV().add("stage", "done").add("artifacts", res.artifacts.size()).add("out", cfg.output_dir.string()).str()
                      << '\n';
        } else if (*vsub) {
            auto svc = service::TwinService::from_directory(v_dir);
            httplib::Server server;
            service::mount(server, *svc, http);
            int port = http.port;
            if (port == 0) {
                port = server.bind_to_any_port(http.host);
            } else if (!server.bind_to_port(http.host, port)) {
                throw IoError("cannot bind " + http.host + ":" + std::to_string(port));
            }
            if (port < 0) throw IoError("cannot bind " + http.host);
            const auto snap_id = svc->state().first->snapshot_id;
            if (!v_c.out.empty())
                io::write_file(v_c.out, dump({{"host", http.host}, {"port", port}, {"snapshot_id", snap_id}}));
            std::cout << KV().add("stage", "serve").add("host", http.host).add("port", static_cast<std::size_t>(port))
                             .add("snapshot_id", snap_id).str()
                      << std::endl;
            server.listen_after_bind();
        }
    } catch (const pipeline::PipelineError& e) {
        std::cerr << "error: stage=" << e.stage() << " kind=" << e.kind() << ": " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const Error& e) {
        std::cerr << "error: kind=" << e.kind() << ": " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitOk;
}
