#pragma once

// Run configuration in a small TOML-style syntax:
//
//   seed = 7
//   [dataset]
//   source = "synthetic_shapes"
//   [model]
//   channel_mult = [1, 2]
//
// Unknown sections or keys are rejected with the offending key named.

#include "mflow/gmcunet.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw section -> key -> value text, as written in the file.
struct ConfigDocument {
  std::map<std::string, std::map<std::string, std::string>> sections;  // "" is the top level
};

ConfigDocument parse_config_document(const std::string& text);

struct DatasetSection {
  std::string source = "synthetic_shapes";  // synthetic_shapes | idx_file | gaussian_toy
  std::string path;                         // IDX image file for idx_file
  std::string augmentation = "none";        // none | rotate
  int count = 1000;
  int holdout = 256;
  int side = 28;
};

struct DiffusionSection {
  int T = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct OptimizerSection {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double ema_decay = 0.995;
  int ema_interval = 10;
  bool ema_warmup = true;
  int batch_size = 32;
  int iterations = 2000;
};

struct OutputSection {
  std::string dir = "runs/default";
  int log_every = 10;
  int sample_every = 500;
  int grid_count = 16;
  int grid_cols = 4;
  int eval_every = 0;  // 0 disables held-out evaluation during training
  int eval_samples = 256;
  int eval_batch = 64;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSection dataset;
  UNetConfig model;
  DiffusionSection diffusion;
  OptimizerSection optimizer;
  OutputSection output;

  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
/// Canonical text of the effective configuration; parse_config(to_text(c)) == c.
std::string to_text(const RunConfig& cfg);

bool operator==(const RunConfig& a, const RunConfig& b);

/// Desk-scale defaults: 28x28 grayscale, T = 200, batch 32, 2000 iterations.
RunConfig default_config();

}  // namespace mflow
