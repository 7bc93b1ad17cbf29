#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "esr/bank_io.hpp"
#include "esr/data.hpp"
#include "esr/metrics.hpp"
#include "esr/trainer.hpp"

namespace esr {

// Everything a reproducible experiment needs. Numeric defaults are the
// method's published operating point; changing them is always explicit.
struct ExperimentConfig {
  std::optional<StreamSpec> synthetic;
  std::optional<std::filesystem::path> manifest;

  EnergyConfig energy;
  OptimizerConfig opt;
  PsiSpec psi;
  HeadVariant head_variant = HeadVariant::kLinear;
  std::size_t hidden_units = 64;
  StreamMode mode = StreamMode::kCil;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  bool disable_anchor_loss = false;
  bool disable_calibration = false;
  bool shared_head = false;

  int threads = 1;  // execution width; never part of the report

  void validate() const;
};

// One seed's end-to-end result.
struct SeedOutcome {
  std::uint64_t seed = 0;
  double faa_value = 0.0;
  double ff_value = 0.0;
  std::vector<double> omega;
  std::optional<double> own_stage_rate;  // empty when heads don't map 1:1 to stages
  AccuracyMatrix matrix;
  std::vector<std::vector<double>> loss_traces;
  ModelBank bank;
};

// The stream a given run seed sees. Synthetic streams reseed the spec with a
// mix of its stream seed and the run seed, so every ablation variant of the
// same run seed trains on identical data. Manifest streams are fixed data.
std::vector<StageDataset> materialize_stream(const ExperimentConfig& cfg, std::uint64_t run_seed);

// Full pipeline for one seed with the config's ablation flags applied.
SeedOutcome execute_seed(const ExperimentConfig& cfg, std::uint64_t run_seed);

// All seeds, in config order.
std::vector<SeedOutcome> execute_all_seeds(const ExperimentConfig& cfg);

// Report assembly. One schema covers the three kinds; wall time is the only
// field allowed to differ between identical runs.
nlohmann::json config_echo(const ExperimentConfig& cfg);
nlohmann::json make_run_report(const ExperimentConfig& cfg, std::span<const SeedOutcome> outcomes,
                               double wall_seconds);

struct VariantOutcomes {
  std::string name;
  std::vector<SeedOutcome> outcomes;
};

nlohmann::json make_ablate_report(const ExperimentConfig& cfg,
                                  std::span<const VariantOutcomes> variants, double wall_seconds);

struct DeltaOutcomes {
  double delta = 0.0;
  std::vector<SeedOutcome> outcomes;
};

nlohmann::json make_delta_report(const ExperimentConfig& cfg,
                                 std::span<const DeltaOutcomes> deltas, double wall_seconds);

// Structural check for any emitted report; throws with a field path on the
// first violation.
void validate_report(const nlohmann::json& report);

// Tidy per-seed accuracy matrix (stage,split,accuracy) for external plotting.
void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& matrix);

}  // namespace esr
