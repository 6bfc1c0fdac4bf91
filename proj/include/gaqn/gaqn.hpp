#pragma once

#include "gaqn/tensor.hpp"
#include "gaqn/rng.hpp"
#include "gaqn/autodiff.hpp"
#include "gaqn/ops.hpp"
#include "gaqn/losses.hpp"
#include "gaqn/dataset.hpp"
#include "gaqn/scene_synth.hpp"
#include "gaqn/repr_net.hpp"
#include "gaqn/draw_core.hpp"
#include "gaqn/discriminator.hpp"
#include "gaqn/adam.hpp"
#include "gaqn/trainer.hpp"
#include "gaqn/checkpoint.hpp"
#include "gaqn/image.hpp"
#include "gaqn/eval.hpp"
