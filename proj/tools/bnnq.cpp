// bnnq: train, evaluate, export, run and benchmark binarized networks.
//
// Exit codes: 0 ok, 1 usage or config, 2 data / IO / model file,
// 3 training divergence, 4 tolerance breach (gradcheck, bench floor).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "bnnq/bitinfer.hpp"
#include "bnnq/config.hpp"
#include "bnnq/errors.hpp"
#include "bnnq/gradcheck.hpp"
#include "bnnq/train.hpp"

namespace fs = std::filesystem;
using namespace bnnq;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kDiverged = 3, kTolerance = 4 };

struct Overrides {
  std::string config, preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<Index> batch, limit, test_limit;
  std::optional<std::string> ste, reg, dataset, data_dir, out;
  std::optional<double> lambda, lr;
  bool clip_latent = false, no_bin_act = false, no_augment = false;
};

void add_run_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "flat key = value config file");
  app->add_option("--preset", o.preset, "named preset (see `bnnq presets`)");
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--epochs", o.epochs, "number of epochs");
  app->add_option("--batch", o.batch, "batch size");
  app->add_option("--ste", o.ste, "estimator: htanh, htanh:K, htanh3, tanh, bireal, ss:B, ss_t[:B0]");
  app->add_option("--reg", o.reg, "regularizer: none, r1, r2, or xnor (dynamic scales)");
  app->add_option("--lambda", o.lambda, "regularization strength");
  app->add_option("--lr", o.lr, "base learning rate");
  app->add_option("--limit", o.limit, "use only the first N training records");
  app->add_option("--test-limit", o.test_limit, "use only the first N test records");
  app->add_option("--dataset", o.dataset, "cifar10, mnist or synthetic");
  app->add_option("--data-dir", o.data_dir, "dataset directory");
  app->add_option("--out", o.out, "output directory");
  app->add_flag("--clip-latent", o.clip_latent, "clip latent weights to [-1, 1] after each step");
  app->add_flag("--no-bin-act", o.no_bin_act, "keep activations real (hard tanh)");
  app->add_flag("--no-augment", o.no_augment, "disable crop and flip augmentation");
}

RunConfig resolve(const Overrides& o) {
  RunConfig cfg;
  if (!o.preset.empty()) cfg = preset_config(o.preset);
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw FormatError("cannot read config file " + o.config);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = parse_config(ss.str(), cfg);
  }
  auto set = [&](const char* key, const std::string& v) { apply_setting(cfg, key, v); };
  if (o.seed) set("train.seed", std::to_string(*o.seed));
  if (o.epochs) set("train.epochs", std::to_string(*o.epochs));
  if (o.batch) set("train.batch", std::to_string(*o.batch));
  if (o.ste) set("model.ste", *o.ste);
  if (o.reg) {
    if (*o.reg == "xnor") {
      set("reg.kind", "none");
      set("reg.scale_mode", "xnor");
    } else {
      set("reg.kind", *o.reg);
      if (*o.reg != "none" && cfg.train.reg.scale_mode != ScaleMode::TrainablePerFilter)
        set("reg.scale_mode", "trainable");
    }
  }
  if (o.lambda) set("reg.lambda", std::to_string(*o.lambda));
  if (o.lr) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *o.lr);
    set("train.lr", buf);
  }
  if (o.limit) set("data.limit", std::to_string(*o.limit));
  if (o.test_limit) set("data.test_limit", std::to_string(*o.test_limit));
  if (o.dataset) set("data.dataset", *o.dataset);
  if (o.data_dir) set("data.dir", *o.data_dir);
  if (o.out) set("out.dir", *o.out);
  if (o.clip_latent) set("train.clip_latent", "true");
  if (o.no_bin_act) set("model.binarize_activations", "false");
  if (o.no_augment) set("train.augment", "false");
  cfg.train.validate();
  return cfg;
}

Shape input_shape(const Dataset& d) { return {d.channels, d.height, d.width}; }

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  out << text;
  if (!out) throw FormatError("cannot write " + file.string());
}

fs::path stats_beside(const fs::path& artifact) { return artifact.parent_path() / "stats.txt"; }

// ---------------------------------------------------------------------------

int cmd_train(const Overrides& o, const std::string& resume) {
  RunConfig cfg = resolve(o);
  std::optional<Trainer> trainer;
  if (!resume.empty()) {
    trainer.emplace(Trainer::load_checkpoint(resume));
    // The checkpoint fixes the model and optimizer; only the epoch budget and
    // data options may change on resume.
    trainer->set_epochs(o.epochs ? *o.epochs : cfg.train.epochs);
    cfg.train = trainer->config();
    if (!o.out) cfg.out_dir = fs::path(resume).parent_path();
  }
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "config.txt", to_text(cfg));

  const DatasetSplit data = load_dataset(cfg.data);
  const ChannelStats stats = load_or_compute_stats(data.train, cfg.out_dir / "stats.txt");
  if (!trainer) trainer.emplace(cfg.train, input_shape(data.train));
  Trainer& t = *trainer;
  std::printf("model %s, %lld parameters, %lld train / %lld test records\n", cfg.train.topology.c_str(),
              static_cast<long long>(parameter_count(t.network())), static_cast<long long>(data.train.size()),
              static_cast<long long>(data.test.size()));
  const fs::path ckpt = cfg.out_dir / "checkpoint.bnnq";
  while (t.epoch() < cfg.train.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m = t.train_epoch(data.train, stats);
    if (data.test.size() > 0) m.test_top1 = evaluate(t.network(), data.test, stats).top1;
    append_metrics(cfg.out_dir / "metrics.csv", m);
    if (cfg.checkpoint_every > 0 && t.epoch() % cfg.checkpoint_every == 0) {
      t.save_checkpoint(ckpt);
      t.set_last_checkpoint(ckpt.string());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char test[32] = "-";
    if (m.test_top1) std::snprintf(test, sizeof test, "%.2f%%", *m.test_top1);
    std::printf("epoch %d/%d  lr %.3g  loss %.4f  train %.2f%%  test %s  reg %.3g  (%.1fs)\n", m.epoch,
                cfg.train.epochs, m.lr, m.train_loss, m.train_top1, test, m.reg_term, secs);
    std::fflush(stdout);
  }
  t.save_checkpoint(cfg.out_dir / "final.bnnq");
  std::printf("wrote %s\n", (cfg.out_dir / "final.bnnq").string().c_str());
  return kOk;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint, const std::string& stats_file, Index batch) {
  Trainer t = Trainer::load_checkpoint(checkpoint);
  RunConfig cfg = resolve(o);
  const DatasetSplit data = load_dataset(cfg.data);
  const ChannelStats stats = load_stats(stats_file.empty() ? stats_beside(checkpoint) : fs::path(stats_file));
  const EvalResult r = evaluate(t.network(), data.test, stats, batch);
  std::printf("top-1 %.2f%%  top-5 %.2f%%  loss %.4f  (%lld images)\n", r.top1, r.top5, r.loss,
              static_cast<long long>(r.count));
  return kOk;
}

int cmd_export(const std::string& checkpoint, const std::string& out) {
  const Trainer t = Trainer::load_checkpoint(checkpoint);
  const PackedModel pm = fold_and_export(t.network());
  const fs::path dst = out.empty() ? fs::path(checkpoint).replace_extension(".bnnp") : fs::path(out);
  pm.save(dst);
  const fs::path stats = stats_beside(checkpoint);
  if (fs::exists(stats) && stats_beside(dst) != stats) fs::copy_file(stats, stats_beside(dst), fs::copy_options::overwrite_existing);
  std::printf("wrote %s (%zu layers, %zu bytes)\n", dst.string().c_str(), pm.layers.size(), pm.to_bytes().size());
  return kOk;
}

int cmd_infer(const Overrides& o, const std::string& model, const std::string& stats_file, Index batch) {
  const PackedModel pm = PackedModel::load(model);
  RunConfig cfg = resolve(o);
  const DatasetSplit data = load_dataset(cfg.data);
  if (data.test.size() == 0) throw FormatError("no images to run inference on");
  const ChannelStats stats = load_stats(stats_file.empty() ? stats_beside(model) : fs::path(stats_file));
  // top-5 needs logits; recompute per batch.
  Index top1 = 0, top5 = 0;
  for (const auto& idx : batch_stream(data.test.size(), batch, 0, 0, false)) {
    const Batch b = make_batch(data.test, idx, stats, nullptr);
    const Tensor<float> logits = infer(pm, b.images);
    const Index k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const float* row = logits.data() + static_cast<Index>(i) * k;
      const int label = b.labels[i];
      int better = 0;
      for (Index c = 0; c < k; ++c) better += row[c] > row[label] || (row[c] == row[label] && c < label);
      top1 += better == 0;
      top5 += better < 5;
    }
  }
  const double n = static_cast<double>(data.test.size());
  std::printf("top-1 %.2f%%  top-5 %.2f%%  (%lld images, packed engine)\n", 100.0 * top1 / n, 100.0 * top5 / n,
              static_cast<long long>(data.test.size()));
  return kOk;
}

int cmd_bench(const std::string& model, Index batch, int reps, double min_speedup) {
  const PackedModel pm = PackedModel::load(model);
  const BenchResult r = bench_binary_layers(pm, batch, reps, 0xbe7c);
  std::printf("binary layers, batch %lld, %d reps (median)\n", static_cast<long long>(r.batch), r.reps);
  std::printf("  packed  %8.3f ms/batch  %10.1f images/s\n", r.packed_ms, 1000.0 * static_cast<double>(batch) / r.packed_ms);
  std::printf("  dense   %8.3f ms/batch  %10.1f images/s\n", r.dense_ms, 1000.0 * static_cast<double>(batch) / r.dense_ms);
  std::printf("  speedup %.2fx, outputs %s\n", r.speedup, r.outputs_match ? "identical" : "DIFFER");
  if (!r.outputs_match || r.speedup < min_speedup) return kTolerance;
  return kOk;
}

int cmd_gradcheck(bool mutate) {
  GradcheckOptions opts;
  if (mutate) opts.swish_grad_override = [](double x, double beta) { return -sswish_grad_value(x, beta); };
  const GradcheckReport r = run_gradcheck(opts);
  std::fputs(format_report(r).c_str(), stdout);
  if (!r.passed()) {
    std::printf("gradcheck FAILED:\n");
    for (const auto& c : r.cases)
      if (!c.pass()) std::printf("  %s\n", c.name.c_str());
    for (const auto& s : r.roots)
      if (!s.pass) std::printf("  SS' roots for beta=%g\n", s.beta);
    return kTolerance;
  }
  std::printf("gradcheck passed\n");
  return kOk;
}

int cmd_synth(const std::string& dir, std::uint64_t seed) {
  SyntheticOptions o;
  o.seed = seed;
  write_synthetic_cifar10(dir, o);
  std::printf("wrote synthetic CIFAR-format data to %s\n", dir.c_str());
  return kOk;
}

int cmd_presets(const std::string& name) {
  if (!name.empty()) {
    std::fputs(to_text(preset_config(name)).c_str(), stdout);
    return kOk;
  }
  for (const auto& p : preset_names()) std::printf("%s\n", p.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bnnq: binarized network training, export and packed inference"};
  app.require_subcommand(1);
  Overrides o;

  std::string resume;
  auto* train = app.add_subcommand("train", "train a model; writes config.txt, metrics.csv and checkpoints");
  add_run_flags(train, o);
  train->add_option("--resume", resume, "continue from a checkpoint");

  std::string checkpoint, stats_file, model, export_out;
  Index eval_batch = 100;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_run_flags(eval, o);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--stats", stats_file, "normalization statistics (default: next to the checkpoint)");
  eval->add_option("--eval-batch", eval_batch, "evaluation batch size");

  auto* exp = app.add_subcommand("export", "fold and pack a checkpoint into a packed model file");
  exp->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  exp->add_option("--out", export_out, "packed model path (default: checkpoint with .bnnp)");

  auto* inf = app.add_subcommand("infer", "run the packed engine on the test split");
  add_run_flags(inf, o);
  inf->add_option("--model", model, "packed model file")->required();
  inf->add_option("--stats", stats_file, "normalization statistics (default: next to the model)");
  inf->add_option("--eval-batch", eval_batch, "inference batch size");

  Index bench_batch = 64;
  int reps = 20;
  double min_speedup = 0;
  auto* bench = app.add_subcommand("bench", "time packed vs dense binary layers");
  bench->add_option("--model", model, "packed model file")->required();
  bench->add_option("--batch", bench_batch, "batch size");
  bench->add_option("--reps", reps, "timed repetitions");
  bench->add_option("--min-speedup", min_speedup, "exit 4 when the speedup is below this");

  bool mutate = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  grad->add_flag("--mutate-swish", mutate, "self-test: negate the SignSwish derivative (must fail)");

  std::string synth_dir;
  std::uint64_t synth_seed = 2019;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset in CIFAR-10 binary layout");
  synth->add_option("--out", synth_dir, "directory")->required();
  synth->add_option("--seed", synth_seed, "generator seed");

  std::string preset_name;
  auto* presets = app.add_subcommand("presets", "list presets or print one resolved");
  presets->add_option("name", preset_name, "preset to print");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(o, resume);
    if (*eval) return cmd_eval(o, checkpoint, stats_file, eval_batch);
    if (*exp) return cmd_export(checkpoint, export_out);
    if (*inf) return cmd_infer(o, model, stats_file, eval_batch);
    if (*bench) return cmd_bench(model, bench_batch, reps, min_speedup);
    if (*grad) return cmd_gradcheck(mutate);
    if (*synth) return cmd_synth(synth_dir, synth_seed);
    if (*presets) return cmd_presets(preset_name);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
