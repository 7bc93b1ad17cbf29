#pragma once

#include <span>
#include <vector>

namespace esr {

// One log-score per class of a stage head's label set.
using LogitVector = std::vector<double>;

// Positive control temperature for energy scaling.
class Temperature {
 public:
  explicit Temperature(double value);
  double value() const { return value_; }

 private:
  double value_;
};

// Energy of an (input, label) pair: -logits[class_index].
double energy_of_pair(std::span<const double> logits, std::size_t class_index);

// log(sum_i exp(v_i)) via the max-shift identity m + log(sum_i exp(v_i - m)).
// Finite for any finite input.
double stable_logsumexp(std::span<const double> values);

// Helmholtz free energy -T * logsumexp(logits / T).
double free_energy(std::span<const double> logits, Temperature t);

// Confidence score H = -free_energy = T * logsumexp(logits / T).
// Strictly increasing in every logit entry.
double confidence_score(std::span<const double> logits, Temperature t);

// Gibbs distribution softmax(logits / T); entries in (0, 1], summing to 1.
std::vector<double> gibbs_probabilities(std::span<const double> logits, Temperature t);

}  // namespace esr
