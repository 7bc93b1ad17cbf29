#include "esr/energy.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace esr {

Temperature::Temperature(double value) : value_(value) {
  if (!(value > 0.0) || !std::isfinite(value)) {
    throw std::invalid_argument("Temperature: value must be a positive finite real, got " +
                                std::to_string(value));
  }
}

double energy_of_pair(std::span<const double> logits, std::size_t class_index) {
  if (class_index >= logits.size()) {
    throw std::out_of_range("energy_of_pair: class index " + std::to_string(class_index) +
                            " out of range for " + std::to_string(logits.size()) + " classes");
  }
  return -logits[class_index];
}

double stable_logsumexp(std::span<const double> values) {
  if (values.empty()) {
    throw std::invalid_argument("stable_logsumexp: empty input");
  }
  double m = values[0];
  for (double v : values) {
    if (v > m) m = v;
  }
  double sum = 0.0;
  for (double v : values) {
    sum += std::exp(v - m);
  }
  return m + std::log(sum);
}

namespace {

// logsumexp of the virtual vector {v_i / T}, max-shifted. Arithmetic is the
// same as materializing the scaled vector and calling stable_logsumexp.
double logsumexp_scaled(std::span<const double> values, double t) {
  double m = values[0] / t;
  for (double v : values) {
    const double s = v / t;
    if (s > m) m = s;
  }
  double sum = 0.0;
  for (double v : values) {
    sum += std::exp(v / t - m);
  }
  return m + std::log(sum);
}

}  // namespace

double free_energy(std::span<const double> logits, Temperature t) {
  if (logits.empty()) {
    throw std::invalid_argument("free_energy: empty logit vector");
  }
  return -t.value() * logsumexp_scaled(logits, t.value());
}

double confidence_score(std::span<const double> logits, Temperature t) {
  return -free_energy(logits, t);
}

std::vector<double> gibbs_probabilities(std::span<const double> logits, Temperature t) {
  if (logits.empty()) {
    throw std::invalid_argument("gibbs_probabilities: empty logit vector");
  }
  const double tv = t.value();
  double m = logits[0] / tv;
  for (double v : logits) {
    const double s = v / tv;
    if (s > m) m = s;
  }
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / tv - m);
    sum += p[i];
  }
  for (double& v : p) {
    v /= sum;
  }
  return p;
}

}  // namespace esr
