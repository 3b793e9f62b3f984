#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "idmorph/adam.hpp"
#include "idmorph/checkpoint.hpp"
#include "idmorph/dataset.hpp"
#include "idmorph/networks.hpp"

namespace idmorph {

struct TrainConfig {
  NetConfig net;
  double lr = 2e-4;
  double lambda = 5.0;  // attribute-loss weight
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::size_t checkpoint_every = 500;  // 0 disables periodic checkpoints
  std::uint64_t seed = 1;
  bool deterministic = true;

  void validate() const;
  AdamConfig adam() const { return {lr, beta1, beta2, 1e-8}; }
};

/// Inputs of one adversarial iteration. Labels are 0-based.
template <typename T>
struct StepBatch {
  TensorPtr<T> images;               // [N,3,S,S]
  std::vector<std::size_t> identity;  // y_i
  std::vector<std::size_t> viewpoint; // y_a
  TensorPtr<T> z;                    // [N, noise_dim]
  TensorPtr<T> code;                 // [N, N_a]
  std::vector<std::size_t> target;    // y_a^t, the attribute of `code`
};

/// Throws LabelError naming the offending row when a label is out of range.
void check_labels(const std::vector<std::size_t>& identity, const std::vector<std::size_t>& viewpoint,
                  std::size_t num_identities, std::size_t num_attributes);

struct TrainOptions {
  std::filesystem::path metrics_path;    // empty: no metrics log
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::function<void(std::uint64_t step, double d_loss, double g_loss)> on_step;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  const TrainConfig& config() const { return cfg_; }
  Generator<T>& generator() { return gen_; }
  Discriminator<T>& discriminator() { return disc_; }
  std::uint64_t step_count() const { return step_; }
  Rng& rng() { return rng_; }

  /// Draws a batch (with replacement), fresh z and uniform target codes.
  StepBatch<T> sample_batch(const Dataset& data);

  /// Discriminator update. Returns the loss before the update.
  T d_step(const StepBatch<T>& batch);
  /// Generator update with D frozen. Returns the loss before the update.
  T g_step(const StepBatch<T>& batch);

  /// One d_step then one g_step on the same batch.
  std::pair<T, T> step(const Dataset& data);

  /// Runs until config().steps iterations have been made in total.
  void train(const Dataset& data, const TrainOptions& options = {});

  Checkpoint to_checkpoint() const;
  void restore(const Checkpoint& ck);
  static Trainer from_checkpoint(const Checkpoint& ck);

 private:
  TrainConfig cfg_;
  Rng init_rng_;
  Generator<T> gen_;
  Discriminator<T> disc_;
  Adam<T> opt_g_;
  Adam<T> opt_d_;
  Rng rng_;
  std::uint64_t step_ = 0;
};

/// Fraction of samples whose attribute-head argmax equals the viewpoint.
template <typename T>
double attribute_accuracy(Discriminator<T>& disc, const Dataset& data, std::size_t batch = 64);

/// Rebuilds a generator from a trainer checkpoint (any precision).
template <typename T>
Generator<T> load_generator(const Checkpoint& ck);

TrainConfig config_from_checkpoint(const Checkpoint& ck);

}  // namespace idmorph
