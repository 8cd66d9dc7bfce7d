#pragma once

#include "pebble/autodiff.hpp"
#include "pebble/envs.hpp"
#include "pebble/history.hpp"
#include "pebble/losses.hpp"
#include "pebble/nn.hpp"
#include "pebble/observation.hpp"
#include "pebble/probes.hpp"
#include "pebble/rl.hpp"
#include "pebble/rng.hpp"
#include "pebble/tensor.hpp"
#include "pebble/harness/agent.hpp"
#include "pebble/harness/checkpoint.hpp"
#include "pebble/harness/config.hpp"
#include "pebble/harness/csv.hpp"
#include "pebble/harness/logging.hpp"
#include "pebble/harness/training.hpp"
