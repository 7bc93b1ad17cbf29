#pragma once

#include <span>
#include <vector>

namespace esr {

// Lower-triangular record of evaluation results over a stage stream.
// rows[i] holds the accuracies on the test splits of stages 1..t measured
// after training stage t, where t == rows[i].size(); row i corresponds to
// t == i + 1 once the triangle is complete.
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;

  std::size_t stage_count() const { return rows.size(); }
  void validate() const;  // triangle shape, entries in [0, 1]
};

// Fraction of positions where predicted == expected. Throws on empty or
// mismatched inputs.
double accuracy(std::span<const int> predicted, std::span<const int> expected);

// Final average accuracy: mean of the last row of the matrix.
double faa(const AccuracyMatrix& m);

// Final forgetting: mean over stages j < S of the gap between the best
// accuracy ever measured on split j before the final stage and the final
// accuracy on split j. Zero for a single-stage run.
double ff(const AccuracyMatrix& m);

// Arithmetic mean and population standard deviation. Both throw on empty.
double mean(std::span<const double> values);
double population_std(std::span<const double> values);

}  // namespace esr
