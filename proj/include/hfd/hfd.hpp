#pragma once

// Everything at once. Individual headers are self-contained.

#include "hfd/checkpoint.hpp"
#include "hfd/codec/codec.hpp"
#include "hfd/codec/entropy.hpp"
#include "hfd/core/error.hpp"
#include "hfd/core/image.hpp"
#include "hfd/core/image_io.hpp"
#include "hfd/core/kv.hpp"
#include "hfd/core/patch.hpp"
#include "hfd/core/random.hpp"
#include "hfd/denoiser.hpp"
#include "hfd/diffusion.hpp"
#include "hfd/eval.hpp"
#include "hfd/nn/autograd.hpp"
#include "hfd/nn/net.hpp"
#include "hfd/pipeline.hpp"
#include "hfd/rectflow.hpp"
#include "hfd/schedule.hpp"
#include "hfd/tiler.hpp"
#include "hfd/trainer.hpp"
