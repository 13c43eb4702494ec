// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dia/tensor.hpp"
#include "dia/rng.hpp"
#include "dia/io.hpp"
#include "dia/diffop.hpp"
#include "dia/schedule.hpp"
#include "dia/denoiser.hpp"
#include "dia/codec.hpp"
#include "dia/ddim.hpp"
#include "dia/dataset.hpp"
#include "dia/train.hpp"
#include "dia/pipeline.hpp"
#include "dia/attacks.hpp"
#include "dia/metrics.hpp"
#include "dia/purify.hpp"
#include "dia/edit.hpp"
#include "dia/model_io.hpp"
#include "dia/bench.hpp"
#include "dia/selftest.hpp"

namespace dia {
inline constexpr const char* kVersion = "0.1.0";
}  // namespace dia
