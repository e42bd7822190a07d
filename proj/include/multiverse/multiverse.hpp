#pragma once

#include "multiverse/errors.hpp"
#include "multiverse/tensor.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/autodiff.hpp"
#include "multiverse/nn.hpp"
#include "multiverse/grad_check.hpp"
#include "multiverse/scenegen.hpp"
#include "multiverse/model.hpp"
#include "multiverse/training.hpp"
#include "multiverse/inference.hpp"
#include "multiverse/metrics.hpp"
#include "multiverse/checkpoint.hpp"
