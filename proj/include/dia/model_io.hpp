// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dia/codec.hpp"
#include "dia/dataset.hpp"
#include "dia/denoiser.hpp"
#include "dia/edit.hpp"
#include "dia/io.hpp"
#include "dia/schedule.hpp"
#include "dia/train.hpp"

namespace dia {

/// Recipe for the toy model pair: dataset, codec choice, denoiser training.
struct ModelRecipe {
  std::uint64_t seed = 3;
  std::size_t image_size = 8;
  std::size_t train_count = 256;
  std::size_t heldout_count = 64;
  std::string codec = "identity";  // "identity" or "linear"
  TrainConfig train;
  CodecTrainConfig codec_train;
  NoiseSchedule schedule = default_schedule();
};

inline void to_json(nlohmann::json& j, const ModelRecipe& r) {
  j = nlohmann::json{{"seed", r.seed},
                     {"image_size", r.image_size},
                     {"train_count", r.train_count},
                     {"heldout_count", r.heldout_count},
                     {"codec", r.codec},
                     {"epochs", r.train.epochs},
                     {"batch_size", r.train.batch_size},
                     {"lr", r.train.lr},
                     {"momentum", r.train.momentum},
                     {"cond_drop", r.train.cond_drop},
                     {"hidden", r.train.model.hidden},
                     {"depth", r.train.model.depth},
                     {"codec_latent", r.codec_train.latent_dim},
                     {"codec_iterations", r.codec_train.iterations},
                     {"schedule", r.schedule}};
}

inline void from_json(const nlohmann::json& j, ModelRecipe& r) {
  static const char* const known[] = {"seed",      "image_size", "train_count", "heldout_count", "codec",
                                      "epochs",    "batch_size", "lr",          "momentum",      "cond_drop",
                                      "hidden",    "depth",      "codec_latent", "codec_iterations", "schedule"};
  for (const auto& [k, v] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known))
      throw std::invalid_argument("unknown model recipe key '" + k + "'");
  r = ModelRecipe{};
  r.seed = j.value("seed", r.seed);
  r.image_size = j.value("image_size", r.image_size);
  r.train_count = j.value("train_count", r.train_count);
  r.heldout_count = j.value("heldout_count", r.heldout_count);
  r.codec = j.value("codec", r.codec);
  r.train.epochs = j.value("epochs", r.train.epochs);
  r.train.batch_size = j.value("batch_size", r.train.batch_size);
  r.train.lr = j.value("lr", r.train.lr);
  r.train.momentum = j.value("momentum", r.train.momentum);
  r.train.cond_drop = j.value("cond_drop", r.train.cond_drop);
  r.train.model.hidden = j.value("hidden", r.train.model.hidden);
  r.train.model.depth = j.value("depth", r.train.model.depth);
  r.codec_train.latent_dim = j.value("codec_latent", r.codec_train.latent_dim);
  r.codec_train.iterations = j.value("codec_iterations", r.codec_train.iterations);
  if (j.contains("schedule")) r.schedule = j.at("schedule").get<NoiseSchedule>();
  if (r.codec != "identity" && r.codec != "linear")
    throw std::invalid_argument("model codec must be identity or linear, got '" + r.codec + "'");
  if (r.image_size < 2) throw std::invalid_argument("model image_size must be >= 2");
  if (r.train_count < 2) throw std::invalid_argument("model train_count must be >= 2");
  if (r.train.epochs < 1) throw std::invalid_argument("model epochs must be >= 1");
  if (r.train.batch_size < 1) throw std::invalid_argument("model batch_size must be >= 1");
}

struct TrainedModels {
  Models models;
  TrainReport report;
  double codec_mse = 0.0;
};

/// Training and held-out images come from streams split off the recipe seed.
inline std::vector<Sample> recipe_dataset(const ModelRecipe& r, std::string_view part, std::size_t count) {
  return make_toy_dataset(Rng(r.seed).split(part).next_u64(), count, r.image_size);
}

inline TrainedModels train_models(const ModelRecipe& r) {
  const auto train = recipe_dataset(r, "train", r.train_count);
  const auto heldout = recipe_dataset(r, "heldout", r.heldout_count);
  TrainedModels out;
  out.models.schedule = r.schedule;
  if (r.codec == "linear") {
    out.models.codec = std::make_shared<LinearCodec>(
        train_linear_codec(train, r.codec_train, Rng(r.seed).split("codec").next_u64(), &out.codec_mse));
  } else {
    out.models.codec = std::make_shared<IdentityCodec>(Shape{r.image_size, r.image_size});
  }
  out.models.denoiser = std::make_shared<MlpDenoiser>(
      train_denoiser(train, heldout, *out.models.codec, r.schedule, r.train, r.seed, &out.report));
  return out;
}

// Model file: one compact JSON header line, then the DFT1 tensors it lists,
// concatenated in order.
namespace detail {

struct TensorList {
  nlohmann::json names = nlohmann::json::array();
  std::vector<const Tensor*> tensors;
  void add(const std::string& name, const Tensor& t) {
    names.push_back(name);
    tensors.push_back(&t);
  }
};

}  // namespace detail

inline void write_models(std::ostream& os, const Models& m, const nlohmann::json& meta = nlohmann::json::object()) {
  check_models(m);
  detail::TensorList list;
  nlohmann::json header{{"format", "dia-model"}, {"version", 1}, {"schedule", m.schedule},
                        {"query", m.query == InversionQuery::source ? "source" : "destination"}, {"meta", meta}};

  if (const auto* lc = dynamic_cast<const LinearCodec*>(m.codec.get())) {
    header["codec"] = {{"kind", "linear"}, {"image_shape", lc->image_shape()}};
    list.add("codec.enc_W", lc->enc_W());
    list.add("codec.enc_b", lc->enc_b());
    list.add("codec.dec_W", lc->dec_W());
    list.add("codec.dec_b", lc->dec_b());
  } else if (m.codec->kind() == "identity") {
    header["codec"] = {{"kind", "identity"}, {"image_shape", m.codec->image_shape()}};
  } else {
    throw std::invalid_argument("write_models: codec kind '" + m.codec->kind() + "' is not serializable");
  }

  if (const auto* mlp = dynamic_cast<const MlpDenoiser*>(m.denoiser.get())) {
    const auto& c = mlp->config();
    header["denoiser"] = {{"kind", "mlp"},
                          {"latent_dim", c.latent_dim},
                          {"hidden", c.hidden},
                          {"depth", c.depth},
                          {"time_dim", c.time_dim},
                          {"class_dim", c.class_dim},
                          {"num_classes", c.num_classes}};
    for (std::size_t l = 0; l < mlp->layers().size(); ++l) {
      list.add("mlp.W" + std::to_string(l), mlp->layers()[l].W);
      list.add("mlp.b" + std::to_string(l), mlp->layers()[l].b);
    }
    list.add("mlp.class_embed", mlp->class_embed());
  } else if (m.denoiser->kind() == "zero") {
    header["denoiser"] = {{"kind", "zero"}, {"latent_dim", m.denoiser->latent_dim()},
                          {"num_classes", m.denoiser->num_classes()}};
  } else {
    throw std::invalid_argument("write_models: denoiser kind '" + m.denoiser->kind() + "' is not serializable");
  }
  header["tensors"] = list.names;
  os << header.dump() << '\n';
  for (const auto* t : list.tensors) io::write_dft1(os, *t);
  if (!os) throw std::runtime_error("write_models: write failed");
}

inline Models read_models(std::istream& is, nlohmann::json* meta = nullptr) {
  std::string line;
  if (!std::getline(is, line)) throw io::FormatError("model file: missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw io::FormatError(std::string("model file: bad header: ") + e.what());
  }
  if (h.value("format", "") != "dia-model") throw io::FormatError("model file: not a dia-model file");
  if (h.value("version", 0) != 1) throw io::FormatError("model file: unsupported version");

  std::vector<std::string> names = h.at("tensors").get<std::vector<std::string>>();
  std::vector<Tensor> blobs;
  for (const auto& n : names) {
    try {
      blobs.push_back(io::read_dft1(is));
    } catch (const io::FormatError& e) {
      throw io::FormatError("model file: tensor '" + n + "': " + e.what());
    }
  }
  std::size_t next = 0;
  auto take = [&](const std::string& want) -> Tensor {
    if (next >= names.size() || names[next] != want) throw io::FormatError("model file: expected tensor '" + want + "'");
    return std::move(blobs[next++]);
  };

  Models m;
  m.schedule = h.at("schedule").get<NoiseSchedule>();
  const auto q = h.value("query", std::string("source"));
  if (q != "source" && q != "destination") throw io::FormatError("model file: bad query '" + q + "'");
  m.query = q == "source" ? InversionQuery::source : InversionQuery::destination;

  const auto& hc = h.at("codec");
  const Shape img = hc.at("image_shape").get<Shape>();
  const auto ck = hc.at("kind").get<std::string>();
  if (ck == "identity") {
    m.codec = std::make_shared<IdentityCodec>(img);
  } else if (ck == "linear") {
    Tensor eW = take("codec.enc_W"), eb = take("codec.enc_b"), dW = take("codec.dec_W"), db = take("codec.dec_b");
    m.codec = std::make_shared<LinearCodec>(img, std::move(eW), std::move(eb), std::move(dW), std::move(db));
  } else {
    throw io::FormatError("model file: unknown codec kind '" + ck + "'");
  }

  const auto& hd = h.at("denoiser");
  const auto dk = hd.at("kind").get<std::string>();
  if (dk == "mlp") {
    MlpConfig c;
    c.latent_dim = hd.at("latent_dim").get<std::size_t>();
    c.hidden = hd.at("hidden").get<std::size_t>();
    c.depth = hd.at("depth").get<std::size_t>();
    c.time_dim = hd.at("time_dim").get<std::size_t>();
    c.class_dim = hd.at("class_dim").get<std::size_t>();
    c.num_classes = hd.at("num_classes").get<int>();
    std::vector<AffineLayer> layers;
    for (std::size_t l = 0; l <= c.depth; ++l) {
      Tensor W = take("mlp.W" + std::to_string(l));
      Tensor b = take("mlp.b" + std::to_string(l));
      if (W.shape().size() != 2) throw io::FormatError("model file: layer weight is not a matrix");
      layers.push_back({std::move(W), std::move(b)});
    }
    Tensor emb = take("mlp.class_embed");
    m.denoiser = std::make_shared<MlpDenoiser>(c, std::move(layers), std::move(emb));
  } else if (dk == "zero") {
    m.denoiser = std::make_shared<ZeroDenoiser>(hd.at("latent_dim").get<std::size_t>(), hd.at("num_classes").get<int>());
  } else {
    throw io::FormatError("model file: unknown denoiser kind '" + dk + "'");
  }
  if (next != names.size()) throw io::FormatError("model file: unexpected tensor '" + names[next] + "'");
  check_models(m);
  if (meta) *meta = h.value("meta", nlohmann::json::object());
  return m;
}

inline void save_models(const std::filesystem::path& path, const Models& m,
                        const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_models(os, m, meta);
}

inline Models load_models(const std::filesystem::path& path, nlohmann::json* meta = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file " + path.string());
  return read_models(is, meta);
}

}  // namespace dia
