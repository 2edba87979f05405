#pragma once

#include "batchaug/errors.hpp"
#include "batchaug/rng.hpp"
#include "batchaug/parallel.hpp"
#include "batchaug/tensor.hpp"
#include "batchaug/dataio.hpp"
#include "batchaug/augment.hpp"
#include "batchaug/model.hpp"
#include "batchaug/optim.hpp"
#include "batchaug/diagnostics.hpp"
#include "batchaug/dynamics.hpp"
#include "batchaug/distsim.hpp"
#include "batchaug/config.hpp"
#include "batchaug/runner.hpp"
