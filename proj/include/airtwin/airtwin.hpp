#pragma once

// Umbrella header. The HTTP adapter (service_http.hpp) is not included here
// because it needs cpp-httplib.

#include "city_generator.hpp"
#include "decision.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "features.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "moran.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "random.hpp"
#include "service.hpp"
#include "spatial_weights.hpp"
#include "synth.hpp"
#include "table.hpp"
#include "tree.hpp"
