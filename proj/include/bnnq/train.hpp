#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bnnq/data.hpp"
#include "bnnq/network.hpp"
#include "bnnq/optim.hpp"

namespace bnnq {

struct TrainConfig {
  std::string topology = "conv4";
  SteKind ste = SteKind::swish_trainable(5.0);
  std::optional<SteKind> act_ste;  // same as `ste` when unset
  RegConfig reg;
  int epochs = 1;
  Index batch = 64;
  std::uint64_t seed = 0;
  LrSchedule lr{0.005, {{30, 0.1}, {45, 0.1}}};
  bool clip_latent = false;
  bool binarize_activations = true;
  bool augment = true;

  SteKind activation_ste() const { return act_ste.value_or(ste); }
  ModelOptions model_options() const;
  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;  // mean over batches of cross-entropy + lambda * R
  double train_top1 = 0;  // percent
  std::optional<double> test_top1;
  double reg_term = 0;  // mean over batches of lambda * R
  double mean_alpha = 0;
  std::vector<double> betas;
};

struct EvalResult {
  double top1 = 0;  // percent
  double top5 = 0;
  double loss = 0;
  Index count = 0;
  std::vector<int> predictions;
};

/// J = cross-entropy + lambda * sum over binary layers of R(W_h, alpha_h).
double total_loss(double ce, const Network<float>& net, const RegConfig& reg, int epoch = 0);

/// Deterministic eval-mode pass over `d` in sequential batches.
EvalResult evaluate(Network<float>& net, const Dataset& d, const ChannelStats& stats, Index batch = 100);

class Trainer {
 public:
  Trainer(TrainConfig cfg, Shape input_chw);

  const TrainConfig& config() const { return cfg_; }
  Network<float>& network() { return net_; }
  const Network<float>& network() const { return net_; }
  Adam<float>& optimizer() { return adam_; }
  /// Index of the next epoch to run (0-based).
  int epoch() const { return epoch_; }
  void set_last_checkpoint(std::string path) { last_checkpoint_ = std::move(path); }
  /// New epoch budget when resuming; the only config field that may change.
  void set_epochs(int epochs);

  /// One pass: augment, forward, loss, surrogate backward, Adam step per
  /// batch. Throws DivergenceError on a non-finite loss.
  EpochMetrics train_epoch(const Dataset& train, const ChannelStats& stats);

  /// "BNNQ" segment container with parameters, batchnorm buffers, optimizer
  /// moments, epoch counter, and the config text.
  std::vector<std::uint8_t> checkpoint_bytes() const;
  void save_checkpoint(const std::filesystem::path& file) const;
  static Trainer from_checkpoint_bytes(std::span<const std::uint8_t> bytes);
  static Trainer load_checkpoint(const std::filesystem::path& file);

 private:
  TrainConfig cfg_;
  Network<float> net_;
  Adam<float> adam_;
  int epoch_ = 0;
  std::string last_checkpoint_;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Weight diagnostics over all binary layers

/// Latent weights of every binary layer, flattened in layer order.
std::vector<float> binary_latent_weights(const Network<float>& net);
/// Fraction of binary latent weights with ||w| - alpha_c| <= rel * alpha_c.
double fraction_near_scale(const Network<float>& net, double rel = 0.1);
/// Fraction of binary latent weights with lo <= |w| <= hi.
double fraction_abs_in(const Network<float>& net, double lo, double hi);
double mean_scale(const Network<float>& net);
std::vector<double> swish_betas(const Network<float>& net);

// ---------------------------------------------------------------------------
// Metrics CSV

std::string metrics_header();
std::string metrics_row(const EpochMetrics& m);
void append_metrics(const std::filesystem::path& file, const EpochMetrics& m);

}  // namespace bnnq
