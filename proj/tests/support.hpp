// SPDX-License-Identifier: Apache-2.0
// Shared fixtures: the default trained toy models, built once per process.
#pragma once

#include "dia/model_io.hpp"

namespace dia::fixtures {

inline const TrainedModels& default_trained() {
  static const TrainedModels m = train_models(ModelRecipe{});
  return m;
}

inline const TrainedModels& linear_codec_trained() {
  static const TrainedModels m = [] {
    ModelRecipe r;
    r.codec = "linear";
    return train_models(r);
  }();
  return m;
}

}  // namespace dia::fixtures
