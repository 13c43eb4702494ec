// SPDX-License-Identifier: Apache-2.0
//
// dia_forge: train toy models, immunize images, run edits and benchmarks.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dia/dia.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad flags, bad config, missing inputs.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << bytes;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json j{{"command", command},
           {"config_hash", hex64(dia::detail::fnv1a(config.dump()))},
           {"seed", seed},
           {"tool_version", dia::kVersion},
           {"outputs", outputs},
           {"wall_time_s", wall}};
    write_atomic(path, j.dump(2) + "\n");
  }
};

fs::path manifest_path(const std::string& flag, const fs::path& primary) {
  return flag.empty() ? fs::path(primary.string() + ".manifest.json") : fs::path(flag);
}

dia::Models load_model_or_usage(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("model file not found: " + path);
  return dia::load_models(path);
}

dia::Tensor load_image(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("input image not found: " + path);
  const auto ext = fs::path(path).extension().string();
  if (ext == ".dft1") return dia::io::load_dft1(path);
  return dia::io::load_pgm(path);
}

dia::Condition class_condition(int cls, const dia::Denoiser& d) {
  if (cls < 0) return dia::Condition::none();
  if (cls >= d.num_classes())
    throw UsageError("class " + std::to_string(cls) + " out of range (model has " + std::to_string(d.num_classes()) +
                     " classes)");
  return dia::Condition::of(cls);
}

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open config " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
  std::uint64_t seed = 3;
  int epochs = 200;
  std::size_t train_count = 256;
  std::size_t size = 8;
  std::string codec = "identity";
  std::string out;
  std::string manifest;
};

int cmd_train(const TrainOpts& o) {
  Manifest man;
  dia::ModelRecipe r;
  r.seed = o.seed;
  r.train.epochs = o.epochs;
  r.train_count = o.train_count;
  r.image_size = o.size;
  r.codec = o.codec;
  man.command = "train";
  man.config = r;
  man.seed = o.seed;

  const auto t = dia::train_models(r);
  dia::save_models(o.out, t.models, json{{"recipe", r}});
  std::printf("heldout_loss initial=%.6f final=%.6f\n", t.report.initial_heldout_loss, t.report.final_heldout_loss);
  if (r.codec == "linear") std::printf("codec_mse=%.6e\n", t.codec_mse);
  man.outputs = {o.out};
  man.write(manifest_path(o.manifest, o.out));
  return 0;
}

// ---- immunize ---------------------------------------------------------------

struct ImmunizeOpts {
  std::string model, in, out, objective = "dia_pt", grad_mode = "decomposed", manifest;
  double eps = 0.05;
  double step_size = -1.0;  // default ε/10
  int iters = 20;
  int traj_steps = 10;
  int cls = -1;
  std::uint64_t seed = 0;
  bool random_start = false;
};

int cmd_immunize(const ImmunizeOpts& o) {
  dia::AttackConfig cfg;
  try {
    cfg.objective = dia::parse_objective(o.objective);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (o.grad_mode != "decomposed" && o.grad_mode != "naive")
    throw UsageError("--grad-mode must be decomposed or naive");
  cfg.grad_mode = o.grad_mode == "naive" ? dia::GradMode::naive : dia::GradMode::decomposed;
  cfg.epsilon = o.eps;
  cfg.step_size = o.step_size > 0.0 ? o.step_size : o.eps / 10.0;
  cfg.iterations = o.iters;
  cfg.traj_steps = o.traj_steps;
  cfg.seed = o.seed;
  cfg.random_start = o.random_start;
  try {
    dia::validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const auto m = load_model_or_usage(o.model);
  const dia::Tensor x0 = load_image(o.in);
  if (x0.shape() != m.codec->image_shape())
    throw UsageError("image shape " + dia::shape_str(x0.shape()) + " does not match model " +
                     dia::shape_str(m.codec->image_shape()));
  const dia::Condition cond = class_condition(o.cls, *m.denoiser);

  Manifest man;
  man.command = "immunize";
  man.config = json{{"attack", cfg}, {"model", o.model}, {"input", o.in}, {"class", o.cls}};
  man.seed = o.seed;

  const auto res = dia::run_attack(x0, cfg, dia::attack_context(m, cond));
  const fs::path pgm = o.out + ".pgm", delta = o.out + ".delta.dft1", curve = o.out + ".loss.json";
  dia::io::save_pgm(pgm, res.immunized);
  dia::io::save_dft1(delta, res.delta);
  const double linf = dia::max_abs(dia::io::load_dft1(delta));
  if (linf > cfg.epsilon) throw std::runtime_error("stored perturbation exceeds epsilon: " + std::to_string(linf));
  write_atomic(curve, json{{"objective", o.objective},
                           {"config", cfg},
                           {"loss_curve", res.loss_curve},
                           {"final_loss", res.final_loss}}
                              .dump(2) +
                          "\n");
  std::printf("objective=%s initial=%.6g final=%.6g linf=%.6g\n", o.objective.c_str(),
              res.loss_curve.empty() ? 0.0 : res.loss_curve.front(), res.final_loss, linf);
  man.outputs = {pgm.string(), delta.string(), curve.string()};
  man.write(manifest_path(o.manifest, o.out));
  return 0;
}

// ---- edit -----------------------------------------------------------------

struct EditOpts {
  std::string model, in, out, manifest;
  int source = -1, target = -2;
  int steps = 10;
  double guidance = 1.0;
};

int cmd_edit(const EditOpts& o) {
  if (o.steps < 1) throw UsageError("--steps must be >= 1");
  const auto m = load_model_or_usage(o.model);
  const dia::Tensor x = load_image(o.in);
  if (x.shape() != m.codec->image_shape())
    throw UsageError("image shape " + dia::shape_str(x.shape()) + " does not match model " +
                     dia::shape_str(m.codec->image_shape()));
  dia::EditTask task{class_condition(o.source, *m.denoiser),
                     class_condition(o.target == -2 ? o.source : o.target, *m.denoiser), o.steps, o.guidance};
  Manifest man;
  man.command = "edit";
  man.config = json{{"model", o.model}, {"input", o.in}, {"source", o.source}, {"target", o.target},
                    {"steps", o.steps}, {"guidance", o.guidance}};
  const dia::Tensor out = dia::edit_ddim(x, task, m);
  dia::io::save_pgm(o.out, out);
  std::printf("psnr=%.4f mse=%.6g ssim=%.6f\n", dia::metrics::psnr(out, x), dia::metrics::mse(out, x),
              dia::metrics::ssim(out, x));
  man.outputs = {o.out};
  man.write(manifest_path(o.manifest, o.out));
  return 0;
}

// ---- bench ----------------------------------------------------------------

struct BenchOpts {
  std::string config, out, manifest;
  unsigned jobs = 1;
};

int cmd_bench(const BenchOpts& o) {
  const json j = read_json_file(o.config);
  dia::BenchConfig cfg;
  try {
    cfg = dia::parse_bench_config(j, fs::path(o.config).parent_path());
  } catch (const dia::ConfigError& e) {
    throw UsageError(o.config + ": " + e.what());
  }
  if (cfg.model_path && !fs::exists(*cfg.model_path)) throw UsageError("model file not found: " + *cfg.model_path);
  unsigned jobs = o.jobs;
  if (const char* env = std::getenv("DIA_FORGE_THREADS")) {
    try {
      jobs = static_cast<unsigned>(std::stoul(env));
    } catch (const std::exception&) {
      throw UsageError(std::string("DIA_FORGE_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());

  Manifest man;
  man.command = "bench";
  man.config = j;
  man.seed = cfg.seed;
  const dia::Models models = dia::bench_models(cfg);
  const auto report = dia::run_benchmark(cfg, models, jobs);
  write_atomic(o.out, dia::to_csv(report));
  for (const auto& a : report.aggregates)
    std::printf("%-10s %-8s %-12s mse_vs_natural=%.6g psnr_src=%.3f\n", a.method.c_str(), a.edit.c_str(),
                a.purify.c_str(), a.mse_vs_natural, a.psnr_src);
  man.outputs = {o.out};
  man.write(manifest_path(o.manifest, o.out));
  return 0;
}

// ---- make-data ------------------------------------------------------------

struct DataOpts {
  std::uint64_t seed = 11;
  std::size_t count = 8, size = 8;
  std::string dir;
};

int cmd_make_data(const DataOpts& o) {
  fs::create_directories(o.dir);
  const auto data = dia::make_toy_dataset(o.seed, o.count, o.size);
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "img%03zu_c%d.pgm", i, data[i].cond.class_id.value_or(0));
    dia::io::save_pgm(fs::path(o.dir) / name, data[i].image);
  }
  std::printf("wrote %zu images to %s\n", data.size(), o.dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDIM inversion-trajectory immunization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dia::kVersion);

  TrainOpts tr;
  auto* train = app.add_subcommand("train", "Train a toy denoiser (and optional linear codec)");
  train->add_option("--seed", tr.seed, "Seed for data, init and SGD")->capture_default_str();
  train->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--train-count", tr.train_count, "Training images")->capture_default_str();
  train->add_option("--size", tr.size, "Image side length")->capture_default_str();
  train->add_option("--codec", tr.codec, "identity or linear")->capture_default_str()->check(CLI::IsMember({"identity", "linear"}));
  train->add_option("--out", tr.out, "Model file to write")->required();
  train->add_option("--manifest", tr.manifest, "Manifest path (default <out>.manifest.json)");

  ImmunizeOpts im;
  auto* immunize = app.add_subcommand("immunize", "Compute a protective perturbation for one image");
  immunize->add_option("--model", im.model, "Model file")->required();
  immunize->add_option("--in", im.in, "Input image (.pgm or .dft1)")->required();
  immunize->add_option("--out", im.out, "Output prefix")->required();
  immunize->add_option("--objective", im.objective, "One of: " + dia::objective_list())->capture_default_str();
  immunize->add_option("--eps", im.eps, "L-infinity budget")->capture_default_str();
  immunize->add_option("--step-size", im.step_size, "PGD step (default eps/10)");
  immunize->add_option("--iters", im.iters, "PGD iterations")->capture_default_str();
  immunize->add_option("--traj-steps", im.traj_steps, "DDIM steps in the attacked trajectory")->capture_default_str();
  immunize->add_option("--class", im.cls, "Source class (-1 = unconditional)")->capture_default_str();
  immunize->add_option("--seed", im.seed, "Attack seed")->capture_default_str();
  immunize->add_flag("--random-start", im.random_start, "Start PGD from a uniform point in the ball");
  immunize->add_option("--grad-mode", im.grad_mode, "decomposed or naive")->capture_default_str();
  immunize->add_option("--manifest", im.manifest, "Manifest path (default <out>.manifest.json)");

  EditOpts ed;
  std::string edit_grad_mode;
  auto* edit = app.add_subcommand("edit", "Invert under the source class, resample under the target class");
  edit->add_option("--model", ed.model, "Model file")->required();
  edit->add_option("--in", ed.in, "Input image (.pgm or .dft1)")->required();
  edit->add_option("--out", ed.out, "Edited PGM")->required();
  edit->add_option("--source-class", ed.source, "Source class (-1 = unconditional)")->capture_default_str();
  edit->add_option("--target-class", ed.target, "Target class (default: source class)");
  edit->add_option("--steps", ed.steps, "DDIM steps")->capture_default_str();
  edit->add_option("--guidance", ed.guidance, "Guidance scale while sampling")->capture_default_str();
  edit->add_option("--grad-mode", edit_grad_mode)->group("");
  edit->add_option("--manifest", ed.manifest, "Manifest path (default <out>.manifest.json)");

  BenchOpts be;
  auto* bench = app.add_subcommand("bench", "Run a benchmark config and write a CSV report");
  bench->add_option("--config", be.config, "Benchmark JSON")->required();
  bench->add_option("--out", be.out, "CSV report")->required();
  bench->add_option("--jobs", be.jobs, "Worker threads (0 = all cores; DIA_FORGE_THREADS overrides)")->capture_default_str();
  bench->add_option("--manifest", be.manifest, "Manifest path (default <out>.manifest.json)");

  std::uint64_t st_seed = 0;
  auto* selftest = app.add_subcommand("selftest", "Run identity, decomposition, gradient and memory checks");
  selftest->add_option("--seed", st_seed, "Seed")->capture_default_str();

  DataOpts da;
  auto* data = app.add_subcommand("make-data", "Write toy dataset images as PGM");
  data->add_option("--seed", da.seed, "Dataset seed")->capture_default_str();
  data->add_option("--count", da.count, "Images to write")->capture_default_str();
  data->add_option("--size", da.size, "Image side length")->capture_default_str();
  data->add_option("--dir", da.dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train(tr);
    if (*immunize) return cmd_immunize(im);
    if (*edit) {
      if (edit->count("--grad-mode")) throw UsageError("--grad-mode is only valid for immunize");
      return cmd_edit(ed);
    }
    if (*bench) return cmd_bench(be);
    if (*selftest) return dia::print_selftest(dia::run_selftest(st_seed), std::cout) ? 0 : 1;
    if (*data) return cmd_make_data(da);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const dia::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
