#pragma once

#include "mflow/config.hpp"
#include "mflow/data_io.hpp"
#include "mflow/diffusion.hpp"
#include "mflow/gmcunet.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mflow {

/// Independent random stream for (seed, stream, step).
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step);

/// Training and held-out images for a run configuration.
struct RunData {
  ImageDataset train;
  ImageDataset holdout;
};

RunData load_run_data(const RunConfig& cfg);

struct SampleTrace {
  std::vector<int> steps;  // n_t captured after reaching each listed t (descending, ends at 0)
  std::vector<std::vector<GridFunction<float>>> states;
};

/// Owns the model, optimizer state and EMA shadow for one run. Every random
/// draw is derived from (seed, step), so a restored trainer continues exactly
/// like an uninterrupted one.
class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  Trainer(RunConfig cfg, RunData data);

  const RunConfig& config() const { return cfg_; }
  const RunData& data() const { return data_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  GmcUnet<float>& model() { return *model_; }
  const GmcUnet<float>& model() const { return *model_; }
  int step() const { return step_; }
  long ema_updates() const { return ema_updates_; }
  const std::vector<std::vector<float>>& ema_shadow() const { return ema_; }

  /// One optimizer iteration on a fresh batch; returns the batch epsilon-MSE.
  double train_step();

  /// Epsilon-MSE of the current weights on a fixed held-out set of
  /// (image, t, noise) triples, identical across calls.
  double eval_mse(int max_images = 0) const;

  /// Ancestral sampling with the EMA weights; optional trace at decile steps.
  /// `sampling_steps` in (0, T) walks an evenly spaced subsequence of the
  /// training steps with the matching respaced schedule.
  std::vector<GridFunction<float>> sample(int count, std::uint64_t seed, SampleTrace* trace = nullptr, int batch = 0,
                                          int sampling_steps = 0) const;

  /// Unbiased MMD^2 between `count` EMA samples and the first `count` held-out images.
  double sample_mmd(int count, std::uint64_t seed) const;
  double mmd_bandwidth() const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

 private:
  template <typename Fn>
  auto with_ema_weights(Fn&& fn) const;

  RunConfig cfg_;
  RunData data_;
  DiffusionSchedule schedule_;
  std::unique_ptr<GmcUnet<float>> model_;
  ad::AdamState<float> adam_;
  std::vector<std::vector<float>> ema_;
  long ema_updates_ = 0;
  int step_ = 0;
  mutable double bandwidth_ = 0.0;
};

/// Restores the configuration stored in a checkpoint header.
RunConfig config_from_checkpoint(const Checkpoint& ck);

/// Trainer restored from a checkpoint. Without `load_data` the datasets stay
/// empty, which is enough for sampling.
std::unique_ptr<Trainer> trainer_from_checkpoint(const Checkpoint& ck, bool load_data);

/// Schedule over the steps taus (ascending, subset of [1, T]) with
/// abar'_i = abar_{tau_i} and beta'_i = 1 - abar'_i / abar'_{i-1}.
DiffusionSchedule respace_schedule(const DiffusionSchedule& base, const std::vector<int>& taus);
std::vector<int> spaced_steps(int T, int count);

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double eval_mse = -1.0;  // negative when not evaluated at this step
  double mmd = -1.0;
};

/// Full training loop with artifact emission under cfg.output.dir: metrics.csv,
/// samples_<step>.pgm, checkpoint.bin and config.echo.
std::vector<MetricsRow> run_training(Trainer& trainer, std::ostream& log);

}  // namespace mflow
