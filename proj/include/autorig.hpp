#pragma once

#include "autorig/common.hpp"
#include "autorig/dataset.hpp"
#include "autorig/diffusion.hpp"
#include "autorig/evaluation.hpp"
#include "autorig/generator.hpp"
#include "autorig/geometry.hpp"
#include "autorig/metrics.hpp"
#include "autorig/model.hpp"
#include "autorig/nn/checkpoint.hpp"
#include "autorig/nn/grad_check.hpp"
#include "autorig/nn/layers.hpp"
#include "autorig/nn/ops.hpp"
#include "autorig/nn/tape.hpp"
#include "autorig/skeleton.hpp"
#include "autorig/trainer.hpp"
