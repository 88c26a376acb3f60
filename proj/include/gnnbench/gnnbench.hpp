#pragma once

#include "autodiff.hpp"
#include "bench.hpp"
#include "defenses.hpp"
#include "errors.hpp"
#include "explainers.hpp"
#include "graph.hpp"
#include "metrics.hpp"
#include "models.hpp"
#include "seeding.hpp"
#include "text.hpp"
