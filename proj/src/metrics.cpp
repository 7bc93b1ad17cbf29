#include "esr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace esr {

void AccuracyMatrix::validate() const {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != i + 1) {
      throw std::invalid_argument("AccuracyMatrix: row " + std::to_string(i) + " has " +
                                  std::to_string(rows[i].size()) + " entries, expected " +
                                  std::to_string(i + 1));
    }
    for (double v : rows[i]) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("AccuracyMatrix: accuracy outside [0, 1]");
      }
    }
  }
}

double accuracy(std::span<const int> predicted, std::span<const int> expected) {
  if (predicted.size() != expected.size()) {
    throw std::invalid_argument("accuracy: size mismatch");
  }
  if (predicted.empty()) {
    throw std::invalid_argument("accuracy: empty input");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == expected[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

double faa(const AccuracyMatrix& m) {
  if (m.rows.empty()) {
    throw std::invalid_argument("faa: empty matrix");
  }
  return mean(m.rows.back());
}

double ff(const AccuracyMatrix& m) {
  m.validate();
  const std::size_t stages = m.rows.size();
  if (stages == 0) {
    throw std::invalid_argument("ff: empty matrix");
  }
  if (stages == 1) {
    return 0.0;
  }
  const std::vector<double>& final_row = m.rows.back();
  double sum = 0.0;
  for (std::size_t j = 0; j < stages - 1; ++j) {
    // Split j is first evaluated at row j, right after its own stage trained;
    // the maximum runs over every row before the final one.
    double best = m.rows[j][j];
    for (std::size_t t = j; t + 1 < stages; ++t) {
      best = std::max(best, m.rows[t][j]);
    }
    sum += best - final_row[j];
  }
  return sum / static_cast<double>(stages - 1);
}

double mean(std::span<const double> values) {
  if (values.empty()) {
    throw std::invalid_argument("mean: empty input");
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

double population_std(std::span<const double> values) {
  const double mu = mean(values);
  double sq = 0.0;
  for (double v : values) {
    const double d = v - mu;
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(values.size()));
}

}  // namespace esr
