#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "esr/data.hpp"
#include "esr/head.hpp"

namespace esr {

// Everything inference needs: the per-stage heads, the calibrated temperature
// pool (append order preserved, duplicates meaningful) and the shared energy
// settings. Immutable during prediction.
struct ModelBank {
  std::vector<StageHead> heads;  // stage ids contiguous from 1
  std::vector<double> omega;
  EnergyConfig cfg;
  StreamMode mode = StreamMode::kCil;

  std::size_t stage_count() const { return heads.size(); }
  void validate() const;
};

// One per-temperature vote: the stage whose head is most confident at that
// temperature.
struct StageVote {
  double temperature = 1.0;
  int stage_id = 1;
};

struct PredictionResult {
  int chosen_stage = 1;
  int chosen_class = 0;  // global class id
  std::vector<StageVote> votes;
  std::vector<double> confidences_at_1;  // indexed by stage id - 1
};

// One vote per temperature in omega (or a single T=1 vote when omega is
// empty); per-temperature ties go to the smallest stage id.
std::vector<StageVote> stage_votes(std::span<const float> feature, const ModelBank& bank);

// Mode of the votes. Ties on count are broken by the higher stage confidence
// at T=1, then by the smallest stage id.
int select_stage(std::span<const StageVote> votes, std::span<const double> confidences_at_1);

// Full pipeline: vote per temperature, pick the stage, then argmax the chosen
// head's logits (class ties go to the smallest local index).
PredictionResult predict(std::span<const float> feature, const ModelBank& bank);

// Batched predict, parallel over records, output order = input order.
std::vector<PredictionResult> predict_batch(std::span<const FeatureRecord> records,
                                            const ModelBank& bank, int threads = 1);

// Fraction of records whose own-stage head holds the strictly highest
// confidence at T=1. Measures how well energy anchoring separates stages;
// reported, never asserted to be 1.
double own_stage_top_rate(std::span<const FeatureRecord> records, const ModelBank& bank);

}  // namespace esr
