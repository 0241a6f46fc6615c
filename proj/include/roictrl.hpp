#pragma once

// Everything except the CLI command layer (roictrl/commands.hpp).

#include "roictrl/attention.hpp"
#include "roictrl/bench.hpp"
#include "roictrl/blend.hpp"
#include "roictrl/checkpoint.hpp"
#include "roictrl/config.hpp"
#include "roictrl/diffusion.hpp"
#include "roictrl/eval.hpp"
#include "roictrl/evaluate.hpp"
#include "roictrl/model.hpp"
#include "roictrl/ops.hpp"
#include "roictrl/optim.hpp"
#include "roictrl/parallel.hpp"
#include "roictrl/roi_ops.hpp"
#include "roictrl/scene.hpp"
#include "roictrl/tensor.hpp"
#include "roictrl/train.hpp"
#include "roictrl/verify.hpp"
