// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header pulling in the full library.

#include "shapemoe/checkpoint.hpp"
#include "shapemoe/config.hpp"
#include "shapemoe/dataset.hpp"
#include "shapemoe/errors.hpp"
#include "shapemoe/experts.hpp"
#include "shapemoe/grad_check.hpp"
#include "shapemoe/metrics.hpp"
#include "shapemoe/model.hpp"
#include "shapemoe/ops.hpp"
#include "shapemoe/params.hpp"
#include "shapemoe/rng.hpp"
#include "shapemoe/router.hpp"
#include "shapemoe/shape_encoder.hpp"
#include "shapemoe/sweep.hpp"
#include "shapemoe/tape.hpp"
#include "shapemoe/tensor.hpp"
#include "shapemoe/trainer.hpp"
