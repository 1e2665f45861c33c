#pragma once

// Convenience header pulling in the whole toolkit.

#include "mpt/baselines.hpp"
#include "mpt/bench.hpp"
#include "mpt/common.hpp"
#include "mpt/control.hpp"
#include "mpt/mdp.hpp"
#include "mpt/pushcar.hpp"
#include "mpt/runner.hpp"
#include "mpt/tree.hpp"
