#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "esr/data.hpp"
#include "esr/head.hpp"
#include "esr/inference.hpp"
#include "esr/metrics.hpp"

namespace esr {

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 30;
  int batch_size = 128;
  bool cosine_schedule = true;
  std::uint64_t seed = 0;  // shuffling seed; initialization is seeded separately

  void validate() const;
};

// Candidate temperatures (strictly increasing) and the calibrated multiset
// grown one entry per stage after the first.
struct TemperaturePools {
  std::vector<double> candidates;
  std::vector<double> selected;

  void validate() const;
};

// Candidate grid given as min:max:step; materialized on demand with the last
// value clamped to max exactly.
struct PsiSpec {
  double min = 0.001;
  double max = 1.0;
  double step = 0.001;

  void validate() const;
  std::vector<double> materialize() const;
};

// Training aborted on a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& message, int stage_id, int epoch)
      : std::runtime_error(message), stage_id_(stage_id), epoch_(epoch) {}

  int stage_id() const noexcept { return stage_id_; }
  int epoch() const noexcept { return epoch_; }

 private:
  int stage_id_;
  int epoch_;
};

// Cosine-annealed rate at the given step: initial * (1 + cos(pi*step/total)) / 2.
double cosine_lr(double initial, std::size_t step, std::size_t total_steps);

struct TrainResult {
  StageHead head;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
};

// SGD with momentum and weight decay over the stage's train split, shuffled
// per epoch with the optimizer seed. Touches no data from other stages.
TrainResult train_stage(const StageDataset& stage_data, StageHead head, const EnergyConfig& cfg,
                        const OptimizerConfig& opt);

// Fraction of records routed to their true stage when every head is read at
// temperature t (argmax of confidence, ties to the smallest stage id).
double stage_id_accuracy(std::span<const FeatureRecord> records, std::span<const StageHead> bank,
                         Temperature t);

struct CalibrationResult {
  TemperaturePools pools;
  std::optional<double> chosen;  // empty when the bank has a single head
};

// Sweeps the candidate pool on the current stage's train split and appends
// the accuracy-maximizing temperature (ties to the smallest candidate).
// A single-head bank is a no-op. The sweep may fan out over `threads`.
CalibrationResult calibrate_temperature(std::span<const FeatureRecord> current_train,
                                        std::span<const StageHead> bank, TemperaturePools pools,
                                        int threads = 1);

struct StreamConfig {
  EnergyConfig energy;
  OptimizerConfig opt;
  PsiSpec psi;
  HeadVariant head_variant = HeadVariant::kLinear;
  std::size_t hidden_units = 64;
  StreamMode mode = StreamMode::kCil;
  bool calibrate = true;
  bool shared_head = false;  // one head over all classes, fine-tuned stage after stage
  std::uint64_t seed = 1;
  int threads = 1;
};

struct StreamResult {
  ModelBank bank;
  AccuracyMatrix matrix;  // one row per stage trained in this call
  std::vector<std::vector<double>> loss_traces;
  int first_trained_stage = 1;
};

// Runs the whole stream: per-stage training, calibration, and evaluation of
// every seen test split after each stage. Train data of a finished stage is
// dropped before the next one starts. With `resume` the completed stages are
// skipped and training continues from the bank's state.
StreamResult run_stream(std::vector<StageDataset> stages, const StreamConfig& cfg,
                        const ModelBank* resume = nullptr);

}  // namespace esr
