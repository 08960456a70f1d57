#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bnnq/train.hpp"

namespace bnnq {

struct DataConfig {
  std::string dataset = "cifar10";  // cifar10 | mnist | synthetic
  std::filesystem::path dir;
  Index limit = 0;       // 0 keeps every training record
  Index test_limit = 0;  // 0 keeps every test record
  std::uint64_t synthetic_seed = 2019;
};

struct RunConfig {
  std::string preset;
  TrainConfig train;
  DataConfig data;
  std::filesystem::path out_dir = "runs/default";
  int checkpoint_every = 1;
};

/// Names of the form conv4-<ste>-<reg> with ste in {ss, ss5, ss10, htanh,
/// htanh3, tanh, bireal} and reg in {r1, r2, xnor, none}, plus conv4-bnn.
std::vector<std::string> preset_names();
RunConfig preset_config(const std::string& name);

/// Every key accepted by apply_setting / parse_config.
std::vector<std::string> config_keys();

/// Set one dotted key. Unknown keys and malformed values raise ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Flat `key = value` lines; '#' starts a comment. A `preset` line is applied
/// first regardless of position, then the remaining lines in order.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& file);

/// Canonical text that parse_config maps back to an equal configuration.
std::string to_text(const RunConfig& cfg);
/// Only the train.* / model keys.
std::string train_config_text(const TrainConfig& cfg);
TrainConfig parse_train_config(const std::string& text);

/// CIFAR-10 directory: `data.dir` when set, else $BNNQ_CIFAR10_DIR, else empty.
std::filesystem::path cifar10_dir(const DataConfig& d);

/// Load the configured dataset and apply the record limits. The synthetic
/// set is generated in memory from `synthetic_seed`.
DatasetSplit load_dataset(const DataConfig& d);

}  // namespace bnnq
