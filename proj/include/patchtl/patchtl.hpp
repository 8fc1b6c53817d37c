#pragma once

#include "patchtl/augmentation.hpp"
#include "patchtl/cohort.hpp"
#include "patchtl/config.hpp"
#include "patchtl/core_data.hpp"
#include "patchtl/error.hpp"
#include "patchtl/experiment.hpp"
#include "patchtl/losses.hpp"
#include "patchtl/metrics.hpp"
#include "patchtl/models.hpp"
#include "patchtl/patching.hpp"
#include "patchtl/preprocess.hpp"
#include "patchtl/rng.hpp"
#include "patchtl/tensor.hpp"
#include "patchtl/tensor_io.hpp"
#include "patchtl/training.hpp"
#include "patchtl/types.hpp"
