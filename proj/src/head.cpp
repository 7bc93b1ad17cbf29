#include "esr/head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace esr {

void EnergyConfig::validate() const {
  if (!std::isfinite(anchor)) {
    throw std::invalid_argument("EnergyConfig: anchor must be finite");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("EnergyConfig: lambda must be a nonnegative finite real");
  }
  if (!(train_temperature > 0.0) || !std::isfinite(train_temperature)) {
    throw std::invalid_argument("EnergyConfig: train_temperature must be positive");
  }
}

int StageHead::local_label(int global) const {
  const auto it = std::find(label_set.begin(), label_set.end(), global);
  if (it == label_set.end()) {
    throw std::invalid_argument("StageHead: label " + std::to_string(global) +
                                " not in label set of stage " + std::to_string(stage_id));
  }
  return static_cast<int>(it - label_set.begin());
}

int StageHead::global_label(int local_index) const {
  if (local_index < 0 || static_cast<std::size_t>(local_index) >= label_set.size()) {
    throw std::out_of_range("StageHead: local index " + std::to_string(local_index) +
                            " out of range for " + std::to_string(label_set.size()) + " classes");
  }
  return label_set[static_cast<std::size_t>(local_index)];
}

namespace {

void validate_layer(const AffineLayer& layer, const char* name) {
  if (layer.weight.data.size() != layer.weight.rows * layer.weight.cols ||
      layer.bias.size() != layer.weight.rows || layer.weight.rows == 0 || layer.weight.cols == 0) {
    throw std::invalid_argument(std::string("StageHead: inconsistent ") + name + " layer shape");
  }
  for (double v : layer.weight.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("StageHead: non-finite weight");
  }
  for (double v : layer.bias) {
    if (!std::isfinite(v)) throw std::invalid_argument("StageHead: non-finite bias");
  }
}

}  // namespace

void StageHead::validate() const {
  if (stage_id < 1) {
    throw std::invalid_argument("StageHead: stage id must be >= 1");
  }
  if (label_set.empty()) {
    throw std::invalid_argument("StageHead: empty label set");
  }
  std::vector<int> sorted = label_set;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("StageHead: duplicate labels in label set");
  }
  validate_layer(params.output, "output");
  if (params.output.weight.rows != label_set.size()) {
    throw std::invalid_argument("StageHead: output rows do not match label set size");
  }
  if (params.hidden) {
    validate_layer(*params.hidden, "hidden");
    if (params.output.weight.cols != params.hidden->weight.rows) {
      throw std::invalid_argument("StageHead: hidden/output shape mismatch");
    }
  }
}

StageHead make_stage_head(int stage_id, std::vector<int> label_set, std::size_t feature_dim,
                          HeadVariant variant, std::size_t hidden_units, Rng& rng) {
  if (feature_dim == 0) {
    throw std::invalid_argument("make_stage_head: feature dimension must be >= 1");
  }
  const std::size_t classes = label_set.size();
  StageHead head;
  head.stage_id = stage_id;
  head.label_set = std::move(label_set);

  const auto fill_uniform = [&rng](Matrix& m, std::size_t fan_in) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : m.data) {
      v = rng.uniform(-scale, scale);
    }
  };

  if (variant == HeadVariant::kMlp) {
    if (hidden_units == 0) {
      throw std::invalid_argument("make_stage_head: hidden_units must be >= 1 for the MLP head");
    }
    AffineLayer hidden;
    hidden.weight = Matrix(hidden_units, feature_dim);
    hidden.bias.assign(hidden_units, 0.0);
    fill_uniform(hidden.weight, feature_dim);
    head.params.hidden = std::move(hidden);
    head.params.output.weight = Matrix(classes, hidden_units);
    head.params.output.bias.assign(classes, 0.0);
    fill_uniform(head.params.output.weight, hidden_units);
  } else {
    head.params.output.weight = Matrix(classes, feature_dim);
    head.params.output.bias.assign(classes, 0.0);
    fill_uniform(head.params.output.weight, feature_dim);
  }
  head.validate();
  return head;
}

namespace {

template <class Scalar>
std::vector<double> affine_apply(const AffineLayer& layer, const Scalar* x) {
  std::vector<double> out(layer.weight.rows);
  for (std::size_t r = 0; r < layer.weight.rows; ++r) {
    double acc = layer.bias[r];
    const double* w = layer.weight.data.data() + r * layer.weight.cols;
    for (std::size_t c = 0; c < layer.weight.cols; ++c) {
      acc += w[c] * static_cast<double>(x[c]);
    }
    out[r] = acc;
  }
  return out;
}

struct ForwardTrace {
  std::vector<double> hidden_activation;  // tanh outputs, empty for linear heads
  LogitVector logits;
};

ForwardTrace forward_trace(const StageHead& head, std::span<const float> feature) {
  if (feature.size() != head.feature_dim()) {
    throw std::invalid_argument("forward: feature dimension " + std::to_string(feature.size()) +
                                " does not match head dimension " +
                                std::to_string(head.feature_dim()));
  }
  ForwardTrace trace;
  if (head.params.hidden) {
    trace.hidden_activation = affine_apply(*head.params.hidden, feature.data());
    for (double& v : trace.hidden_activation) {
      v = std::tanh(v);
    }
    trace.logits = affine_apply(head.params.output, trace.hidden_activation.data());
  } else {
    trace.logits = affine_apply(head.params.output, feature.data());
  }
  return trace;
}

}  // namespace

LogitVector forward(const StageHead& head, std::span<const float> feature) {
  return forward_trace(head, feature).logits;
}

double ce_loss(const StageHead& head, std::span<const float> feature, int local_label,
               const EnergyConfig& cfg) {
  cfg.validate();
  const LogitVector logits = forward(head, feature);
  if (local_label < 0 || static_cast<std::size_t>(local_label) >= logits.size()) {
    throw std::out_of_range("ce_loss: local label " + std::to_string(local_label) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
  }
  const Temperature t(cfg.train_temperature);
  return (energy_of_pair(logits, static_cast<std::size_t>(local_label)) -
          free_energy(logits, t)) /
         cfg.train_temperature;
}

double anchor_loss(const StageHead& head, std::span<const float> feature,
                   const EnergyConfig& cfg) {
  cfg.validate();
  const LogitVector logits = forward(head, feature);
  const double f = free_energy(logits, Temperature(cfg.train_temperature));
  const double d = f - cfg.anchor;
  return d * d;
}

double total_loss(const StageHead& head, std::span<const LabeledExample> batch,
                  const EnergyConfig& cfg) {
  if (batch.empty()) {
    throw std::invalid_argument("total_loss: empty batch");
  }
  cfg.validate();
  const Temperature t(cfg.train_temperature);
  double sum = 0.0;
  for (const LabeledExample& ex : batch) {
    const LogitVector logits = forward(head, ex.feature);
    if (ex.local_label < 0 || static_cast<std::size_t>(ex.local_label) >= logits.size()) {
      throw std::out_of_range("total_loss: local label " + std::to_string(ex.local_label) +
                              " out of range");
    }
    const double f = free_energy(logits, t);
    const double ce =
        (energy_of_pair(logits, static_cast<std::size_t>(ex.local_label)) - f) /
        cfg.train_temperature;
    sum += ce;
    if (cfg.lambda != 0.0) {
      const double d = f - cfg.anchor;
      sum += cfg.lambda * d * d;
    }
  }
  return sum / static_cast<double>(batch.size());
}

HeadParams loss_gradients(const StageHead& head, std::span<const LabeledExample> batch,
                          const EnergyConfig& cfg) {
  if (batch.empty()) {
    throw std::invalid_argument("loss_gradients: empty batch");
  }
  cfg.validate();
  HeadParams grad = zeros_like(head.params);
  const Temperature t(cfg.train_temperature);
  const std::size_t classes = head.class_count();

  for (const LabeledExample& ex : batch) {
    const ForwardTrace trace = forward_trace(head, ex.feature);
    if (ex.local_label < 0 || static_cast<std::size_t>(ex.local_label) >= classes) {
      throw std::out_of_range("loss_gradients: local label " + std::to_string(ex.local_label) +
                              " out of range");
    }
    const std::vector<double> p = gibbs_probabilities(trace.logits, t);
    const double f = free_energy(trace.logits, t);
    // d(ce)/d(logit_k) = (p_k - 1[k=y]) / T
    // d(anchor)/d(logit_k) = -2 (F - anchor) p_k
    const double anchor_coeff = 2.0 * cfg.lambda * (f - cfg.anchor);
    std::vector<double> glogit(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      const double onehot = (k == static_cast<std::size_t>(ex.local_label)) ? 1.0 : 0.0;
      glogit[k] = (p[k] - onehot) / cfg.train_temperature - anchor_coeff * p[k];
    }

    if (head.params.hidden) {
      const AffineLayer& out = head.params.output;
      const std::vector<double>& z = trace.hidden_activation;
      const std::size_t hidden_units = z.size();
      std::vector<double> gz(hidden_units, 0.0);
      for (std::size_t c = 0; c < classes; ++c) {
        grad.output.bias[c] += glogit[c];
        for (std::size_t h = 0; h < hidden_units; ++h) {
          grad.output.weight(c, h) += glogit[c] * z[h];
          gz[h] += glogit[c] * out.weight(c, h);
        }
      }
      const std::size_t dim = head.params.hidden->weight.cols;
      for (std::size_t h = 0; h < hidden_units; ++h) {
        const double ga = gz[h] * (1.0 - z[h] * z[h]);  // tanh'
        grad.hidden->bias[h] += ga;
        for (std::size_t d = 0; d < dim; ++d) {
          grad.hidden->weight(h, d) += ga * static_cast<double>(ex.feature[d]);
        }
      }
    } else {
      const std::size_t dim = head.feature_dim();
      for (std::size_t c = 0; c < classes; ++c) {
        grad.output.bias[c] += glogit[c];
        for (std::size_t d = 0; d < dim; ++d) {
          grad.output.weight(c, d) += glogit[c] * static_cast<double>(ex.feature[d]);
        }
      }
    }
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::vector<double>* arr : parameter_arrays(grad)) {
    for (double& v : *arr) {
      v *= inv_n;
    }
  }
  return grad;
}

std::vector<std::vector<double>*> parameter_arrays(HeadParams& p) {
  std::vector<std::vector<double>*> arrays{&p.output.weight.data, &p.output.bias};
  if (p.hidden) {
    arrays.push_back(&p.hidden->weight.data);
    arrays.push_back(&p.hidden->bias);
  }
  return arrays;
}

std::vector<const std::vector<double>*> parameter_arrays(const HeadParams& p) {
  std::vector<const std::vector<double>*> arrays{&p.output.weight.data, &p.output.bias};
  if (p.hidden) {
    arrays.push_back(&p.hidden->weight.data);
    arrays.push_back(&p.hidden->bias);
  }
  return arrays;
}

HeadParams zeros_like(const HeadParams& p) {
  HeadParams z;
  z.output.weight = Matrix(p.output.weight.rows, p.output.weight.cols);
  z.output.bias.assign(p.output.bias.size(), 0.0);
  if (p.hidden) {
    AffineLayer h;
    h.weight = Matrix(p.hidden->weight.rows, p.hidden->weight.cols);
    h.bias.assign(p.hidden->bias.size(), 0.0);
    z.hidden = std::move(h);
  }
  return z;
}

}  // namespace esr
