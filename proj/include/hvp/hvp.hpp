#pragma once

#include "hvp/adam.hpp"
#include "hvp/config.hpp"
#include "hvp/denoiser.hpp"
#include "hvp/errors.hpp"
#include "hvp/gmm.hpp"
#include "hvp/gradcheck.hpp"
#include "hvp/io.hpp"
#include "hvp/mlp.hpp"
#include "hvp/objective.hpp"
#include "hvp/oracle.hpp"
#include "hvp/parallel.hpp"
#include "hvp/policy.hpp"
#include "hvp/rng.hpp"
#include "hvp/schedule.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"
#include "hvp/training.hpp"
