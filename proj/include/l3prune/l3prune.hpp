#pragma once

#include "l3prune/adapt.hpp"
#include "l3prune/checkpoint.hpp"
#include "l3prune/data.hpp"
#include "l3prune/error.hpp"
#include "l3prune/eval.hpp"
#include "l3prune/model.hpp"
#include "l3prune/numeric.hpp"
#include "l3prune/objective.hpp"
#include "l3prune/pooling.hpp"
#include "l3prune/profiler.hpp"
#include "l3prune/prune.hpp"
#include "l3prune/report.hpp"
#include "l3prune/rng.hpp"
