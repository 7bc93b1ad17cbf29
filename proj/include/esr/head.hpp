#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "esr/energy.hpp"
#include "esr/rng.hpp"

namespace esr {

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct AffineLayer {
  Matrix weight;
  std::vector<double> bias;
};

// Learnable parameters of a head; doubles as the gradient / velocity container.
struct HeadParams {
  AffineLayer output;                 // C x D, or C x H when hidden is present
  std::optional<AffineLayer> hidden;  // H x D, tanh activation
};

enum class HeadVariant { kLinear, kMlp };

// Shared energy-normalization settings for training.
struct EnergyConfig {
  double anchor = -10.0;           // free-energy target shared by all heads
  double lambda = 0.1;             // anchor-loss weight
  double train_temperature = 1.0;  // temperature used during training

  void validate() const;
};

// One stage's classifier and its label bookkeeping. The ordered label_set
// defines the mapping between global class ids and local logit indices.
struct StageHead {
  int stage_id = 1;
  std::vector<int> label_set;
  HeadParams params;

  std::size_t class_count() const { return label_set.size(); }
  std::size_t feature_dim() const {
    return params.hidden ? params.hidden->weight.cols : params.output.weight.cols;
  }
  int local_label(int global_label) const;  // throws if not in label_set
  int global_label(int local_index) const;
  void validate() const;
};

// Fresh head with weights drawn uniformly in +-1/sqrt(fan_in) and zero biases.
StageHead make_stage_head(int stage_id, std::vector<int> label_set, std::size_t feature_dim,
                          HeadVariant variant, std::size_t hidden_units, Rng& rng);

struct LabeledExample {
  std::vector<float> feature;
  int local_label = 0;
};

// Affine map (or tanh MLP) from a feature vector to per-class logits.
LogitVector forward(const StageHead& head, std::span<const float> feature);

// Cross-entropy in energy form: (E(y, x) - F_T(x)) / T.
double ce_loss(const StageHead& head, std::span<const float> feature, int local_label,
               const EnergyConfig& cfg);

// Squared deviation of the free energy from the shared anchor.
double anchor_loss(const StageHead& head, std::span<const float> feature, const EnergyConfig& cfg);

// Batch mean of ce_loss + lambda * anchor_loss.
double total_loss(const StageHead& head, std::span<const LabeledExample> batch,
                  const EnergyConfig& cfg);

// Analytic gradient of total_loss w.r.t. every head parameter.
HeadParams loss_gradients(const StageHead& head, std::span<const LabeledExample> batch,
                          const EnergyConfig& cfg);

// Flat views over the parameter arrays, in a fixed order shared between
// params, gradients and optimizer state.
std::vector<std::vector<double>*> parameter_arrays(HeadParams& p);
std::vector<const std::vector<double>*> parameter_arrays(const HeadParams& p);
HeadParams zeros_like(const HeadParams& p);

}  // namespace esr
