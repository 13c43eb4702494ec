// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dia/attacks.hpp"
#include "dia/dataset.hpp"
#include "dia/edit.hpp"
#include "dia/metrics.hpp"
#include "dia/model_io.hpp"
#include "dia/purify.hpp"

namespace dia {

/// Error in a benchmark config; reported before any work is done.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MethodSpec {
  std::string label;  // column value; defaults to the objective name
  AttackConfig attack;
};

enum class EditTarget { source, swap };

struct EditSpec {
  std::string name;
  EditTarget target = EditTarget::source;
  double guidance = 1.0;
};

enum class PurifyKind { none, gaussian, crop_resize, quantize };

struct PurifySpec {
  std::string name;
  PurifyKind kind = PurifyKind::none;
  double sigma = 0.1;
  double crop_frac = 0.1;
  int levels = 16;
};

struct BenchConfig {
  std::uint64_t seed = 0;
  std::uint64_t dataset_seed = 11;
  std::size_t count = 64;
  std::size_t size = 8;
  std::optional<NoiseSchedule> schedule;
  int steps = 10;
  InversionQuery query = InversionQuery::source;
  std::optional<std::string> model_path;
  ModelRecipe recipe;
  std::vector<MethodSpec> methods;
  std::vector<EditSpec> edits;
  std::vector<PurifySpec> purifications;
};

namespace detail {

inline std::string purify_label(const PurifySpec& p) {
  char buf[64];
  switch (p.kind) {
    case PurifyKind::none: return "none";
    case PurifyKind::gaussian: std::snprintf(buf, sizeof buf, "gaussian%.6g", p.sigma); return buf;
    case PurifyKind::crop_resize: std::snprintf(buf, sizeof buf, "crop%.6g", p.crop_frac); return buf;
    case PurifyKind::quantize: std::snprintf(buf, sizeof buf, "quant%d", p.levels); return buf;
  }
  return "none";
}

template <class F>
auto config_field(const char* where, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
}

}  // namespace detail

/// Parses and validates a benchmark config. Every method, edit and
/// purification name is checked here so a bad config fails before work.
inline BenchConfig parse_bench_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw ConfigError("bench config must be a JSON object");
  static const std::vector<std::string> known{"seed",  "dataset", "schedule",    "grid",
                                              "model", "attacks", "edits",       "purifications"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");

  BenchConfig c;
  c.seed = detail::config_field("seed", [&] { return j.value("seed", std::uint64_t{0}); });
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::config_field("dataset", [&] {
      c.dataset_seed = d.value("seed", c.dataset_seed);
      c.count = d.value("count", c.count);
      c.size = d.value("size", c.size);
      return 0;
    });
    if (c.count < 1) throw ConfigError("dataset.count must be >= 1");
    if (c.size < 2) throw ConfigError("dataset.size must be >= 2");
  }
  if (j.contains("schedule"))
    c.schedule = detail::config_field("schedule", [&] { return j.at("schedule").get<NoiseSchedule>(); });
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.steps = detail::config_field("grid.steps", [&] { return g.value("steps", c.steps); });
    const auto q = detail::config_field("grid.query", [&] { return g.value("query", std::string("source")); });
    if (q != "source" && q != "destination") throw ConfigError("grid.query must be source or destination");
    c.query = q == "source" ? InversionQuery::source : InversionQuery::destination;
    if (c.steps < 1) throw ConfigError("grid.steps must be >= 1");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("path")) {
      std::filesystem::path p = m.at("path").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.model_path = p.string();
    } else {
      c.recipe = detail::config_field("model", [&] { return m.get<ModelRecipe>(); });
    }
  }
  c.recipe.image_size = c.size;
  if (c.schedule) c.recipe.schedule = *c.schedule;

  if (!j.contains("attacks") || !j.at("attacks").is_array() || j.at("attacks").empty())
    throw ConfigError("attacks must be a non-empty array");
  for (const auto& a : j.at("attacks")) {
    nlohmann::json aj = a;
    if (!aj.contains("method")) throw ConfigError("every attack needs a 'method'");
    aj["objective"] = aj.at("method");
    aj.erase("method");
    std::string label = aj.value("label", aj.at("objective").get<std::string>());
    aj.erase("label");
    if (!aj.contains("traj_steps")) aj["traj_steps"] = c.steps;
    MethodSpec ms{label, detail::config_field("attacks", [&] { return aj.get<AttackConfig>(); })};
    for (const auto& prev : c.methods)
      if (prev.label == ms.label) throw ConfigError("duplicate method label '" + ms.label + "'");
    c.methods.push_back(std::move(ms));
  }

  if (j.contains("edits")) {
    for (const auto& e : j.at("edits")) {
      EditSpec es;
      const auto target = detail::config_field("edits", [&] { return e.value("target", std::string("source")); });
      if (target == "source") es.target = EditTarget::source;
      else if (target == "swap") es.target = EditTarget::swap;
      else throw ConfigError("edit target must be source or swap, got '" + target + "'");
      es.name = detail::config_field("edits", [&] { return e.value("name", target == "source" ? std::string("recon") : std::string("swap")); });
      es.guidance = detail::config_field("edits", [&] { return e.value("guidance", 1.0); });
      if (es.guidance < 0.0) throw ConfigError("edit guidance must be >= 0");
      c.edits.push_back(es);
    }
  }
  if (c.edits.empty()) c.edits.push_back({"recon", EditTarget::source, 1.0});

  if (j.contains("purifications")) {
    for (const auto& p : j.at("purifications")) {
      PurifySpec ps;
      const auto kind = detail::config_field("purifications", [&] { return p.at("kind").get<std::string>(); });
      detail::config_field("purifications", [&] {
        if (kind == "none") ps.kind = PurifyKind::none;
        else if (kind == "gaussian") ps.kind = PurifyKind::gaussian, ps.sigma = p.value("sigma", ps.sigma);
        else if (kind == "crop_resize") ps.kind = PurifyKind::crop_resize, ps.crop_frac = p.value("crop_frac", ps.crop_frac);
        else if (kind == "quantize") ps.kind = PurifyKind::quantize, ps.levels = p.value("levels", ps.levels);
        else throw ConfigError("unknown purification kind '" + kind + "' (valid: none, gaussian, crop_resize, quantize)");
        return 0;
      });
      if (ps.sigma < 0.0) throw ConfigError("gaussian sigma must be >= 0");
      if (!(ps.crop_frac >= 0.0 && ps.crop_frac < 1.0)) throw ConfigError("crop_frac must be in [0,1)");
      if (ps.levels < 2) throw ConfigError("quantize levels must be >= 2");
      ps.name = detail::purify_label(ps);
      c.purifications.push_back(ps);
    }
  }
  if (c.purifications.empty()) c.purifications.push_back({"none", PurifyKind::none});
  return c;
}

struct BenchRecord {
  std::string image_id;
  std::string method;
  std::string edit;
  std::string purify;
  double psnr_src = 0.0;
  double mse_src = 0.0;
  double ssim_src = 0.0;
  double linf_delta = 0.0;
  double mse_vs_natural = 0.0;
  double loss_final = 0.0;
};

struct BenchReport {
  std::vector<BenchRecord> records;     // per (method, edit, purify, image)
  std::vector<BenchRecord> aggregates;  // medians per (method, edit, purify)
  std::size_t natural_edits = 0;        // clean-image edits computed
};

inline constexpr const char* kBenchCsvHeader =
    "image_id,method,edit,purify,psnr_src,mse_src,ssim_src,linf_delta,mse_vs_natural,loss_final";

inline std::string format_csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string to_csv(const BenchReport& r) {
  std::ostringstream os;
  os << kBenchCsvHeader << '\n';
  auto row = [&os](const BenchRecord& b) {
    os << b.image_id << ',' << b.method << ',' << b.edit << ',' << b.purify << ',' << format_csv_number(b.psnr_src)
       << ',' << format_csv_number(b.mse_src) << ',' << format_csv_number(b.ssim_src) << ','
       << format_csv_number(b.linf_delta) << ',' << format_csv_number(b.mse_vs_natural) << ','
       << format_csv_number(b.loss_final) << '\n';
  };
  for (const auto& b : r.records) row(b);
  for (const auto& b : r.aggregates) row(b);
  return os.str();
}

/// Runs fn(i) for i in [0, n) on `jobs` workers. The first exception by
/// index is rethrown after all workers stop.
inline void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(jobs, n);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Loads or trains the models a config names. Trained models use the
/// config's schedule; loaded ones must agree with it.
inline Models bench_models(const BenchConfig& c) {
  Models m;
  if (c.model_path) {
    m = load_models(*c.model_path);
    if (c.schedule && !(c.schedule->T == m.schedule.T && c.schedule->beta_start == m.schedule.beta_start &&
                        c.schedule->beta_end == m.schedule.beta_end))
      throw ConfigError("config schedule does not match the schedule stored in " + *c.model_path);
  } else {
    m = train_models(c.recipe).models;
  }
  m.query = c.query;
  check_models(m);
  if (m.codec->image_shape() != Shape{c.size, c.size})
    throw ConfigError("model image shape " + shape_str(m.codec->image_shape()) + " does not match dataset size " +
                      std::to_string(c.size));
  return m;
}

inline Condition edit_target(const EditSpec& e, const Condition& src, int classes) {
  if (e.target == EditTarget::source || !src.class_id) return src;
  return Condition::of((*src.class_id + 1) % classes);
}

inline Tensor apply_purify(const PurifySpec& p, const Tensor& x, Rng& rng) {
  switch (p.kind) {
    case PurifyKind::none: return x;
    case PurifyKind::gaussian: return purify::gaussian(x, p.sigma, rng);
    case PurifyKind::crop_resize: return purify::crop_resize(x, p.crop_frac);
    case PurifyKind::quantize: return purify::quantize(x, p.levels);
  }
  return x;
}

inline AttackContext attack_context(const Models& m, const Condition& cond) {
  return {m.codec, m.denoiser, m.schedule, Guidance{cond, 1.0}, m.query};
}

/// Per-cell stream keyed by (image, method label).
inline Rng cell_rng(std::uint64_t seed, std::size_t image, const std::string& method) {
  return Rng(seed).split(static_cast<std::uint64_t>(image)).split(method);
}

/// attack → purify → edit → metrics, for every (image, method) cell.
/// Natural edits are computed once per (image, edit) and shared by all methods.
inline BenchReport run_benchmark(const BenchConfig& c, const Models& m, unsigned jobs = 1) {
  check_models(m);
  const auto data = make_toy_dataset(c.dataset_seed, c.count, c.size);
  const auto n_img = data.size(), n_edit = c.edits.size(), n_pur = c.purifications.size();
  const int classes = m.denoiser->num_classes();

  auto task_for = [&](std::size_t i, std::size_t e) {
    return EditTask{data[i].cond, edit_target(c.edits[e], data[i].cond, classes), c.steps, c.edits[e].guidance};
  };

  std::vector<Tensor> natural(n_img * n_edit);
  parallel_for(natural.size(), jobs, [&](std::size_t k) {
    const auto i = k / n_edit, e = k % n_edit;
    natural[k] = edit_ddim(data[i].image, task_for(i, e), m);
  });

  const auto n_meth = c.methods.size();
  const std::size_t per_cell = n_edit * n_pur;
  std::vector<BenchRecord> cells(n_meth * n_img * per_cell);
  parallel_for(n_meth * n_img, jobs, [&](std::size_t k) {
    const auto mi = k / n_img, i = k % n_img;
    const auto& method = c.methods[mi];
    const Tensor& x0 = data[i].image;
    Rng rng = cell_rng(c.seed, i, method.label);
    AttackConfig acfg = method.attack;
    acfg.seed = rng.next_u64();
    const AttackResult res = run_attack(x0, acfg, attack_context(m, data[i].cond));
    const double linf_delta = metrics::linf(res.immunized, x0);

    for (std::size_t p = 0; p < n_pur; ++p) {
      Rng prng = rng.split("purify").split(static_cast<std::uint64_t>(p));
      const Tensor purified = apply_purify(c.purifications[p], res.immunized, prng);
      for (std::size_t e = 0; e < n_edit; ++e) {
        const Tensor out = edit_ddim(purified, task_for(i, e), m);
        BenchRecord& r = cells[(mi * per_cell + e * n_pur + p) * n_img + i];
        r.image_id = std::to_string(i);
        r.method = method.label;
        r.edit = c.edits[e].name;
        r.purify = c.purifications[p].name;
        r.mse_src = metrics::mse(out, x0);
        r.psnr_src = metrics::psnr_from_mse(r.mse_src);
        r.ssim_src = metrics::ssim(out, x0);
        r.linf_delta = linf_delta;
        r.mse_vs_natural = metrics::mse(out, natural[i * n_edit + e]);
        r.loss_final = res.final_loss;
      }
    }
  });

  BenchReport rep;
  rep.natural_edits = natural.size();
  rep.records = std::move(cells);
  for (std::size_t g = 0; g < n_meth * per_cell; ++g) {
    const auto begin = rep.records.begin() + static_cast<std::ptrdiff_t>(g * n_img);
    std::vector<double> cols[6];
    for (auto it = begin; it != begin + static_cast<std::ptrdiff_t>(n_img); ++it) {
      cols[0].push_back(it->psnr_src);
      cols[1].push_back(it->mse_src);
      cols[2].push_back(it->ssim_src);
      cols[3].push_back(it->linf_delta);
      cols[4].push_back(it->mse_vs_natural);
      cols[5].push_back(it->loss_final);
    }
    BenchRecord a{"median", begin->method, begin->edit, begin->purify};
    a.psnr_src = metrics::median(cols[0]);
    a.mse_src = metrics::median(cols[1]);
    a.ssim_src = metrics::median(cols[2]);
    a.linf_delta = metrics::median(cols[3]);
    a.mse_vs_natural = metrics::median(cols[4]);
    a.loss_final = metrics::median(cols[5]);
    rep.aggregates.push_back(std::move(a));
  }
  return rep;
}

/// Looks up the aggregate row for (method, edit, purify).
inline const BenchRecord& find_aggregate(const BenchReport& r, const std::string& method, const std::string& edit,
                                         const std::string& purify = "none") {
  for (const auto& a : r.aggregates)
    if (a.method == method && a.edit == edit && a.purify == purify) return a;
  throw std::out_of_range("no aggregate for " + method + "/" + edit + "/" + purify);
}

}  // namespace dia
