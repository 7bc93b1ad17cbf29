#include "esr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>
#include <set>
#include <thread>

namespace esr {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("OptimizerConfig: learning rate must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("OptimizerConfig: momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("OptimizerConfig: weight decay must be nonnegative");
  }
  if (epochs < 0) {
    throw std::invalid_argument("OptimizerConfig: epochs must be nonnegative");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("OptimizerConfig: batch size must be >= 1");
  }
}

void TemperaturePools::validate() const {
  if (candidates.empty()) {
    throw std::invalid_argument("TemperaturePools: empty candidate pool");
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!(candidates[i] > 0.0) || !std::isfinite(candidates[i])) {
      throw std::invalid_argument("TemperaturePools: candidates must be positive");
    }
    if (i > 0 && !(candidates[i] > candidates[i - 1])) {
      throw std::invalid_argument("TemperaturePools: candidates must be strictly increasing");
    }
  }
  for (double t : selected) {
    if (!std::binary_search(candidates.begin(), candidates.end(), t)) {
      throw std::invalid_argument("TemperaturePools: selected temperature " + std::to_string(t) +
                                  " is not a candidate");
    }
  }
}

void PsiSpec::validate() const {
  if (!(min > 0.0) || !std::isfinite(min)) {
    throw std::invalid_argument("PsiSpec: min must be positive");
  }
  if (!(max >= min) || !std::isfinite(max)) {
    throw std::invalid_argument("PsiSpec: max must be >= min");
  }
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw std::invalid_argument("PsiSpec: step must be positive");
  }
}

std::vector<double> PsiSpec::materialize() const {
  validate();
  const double span = max - min;
  std::size_t count = static_cast<std::size_t>(std::floor(span / step + 0.5)) + 1;
  if (count < 1) count = 1;
  std::vector<double> values;
  values.reserve(count);
  for (std::size_t k = 0; k + 1 < count; ++k) {
    values.push_back(min + static_cast<double>(k) * step);
  }
  values.push_back(max);  // the top of the range is always a candidate, exactly
  return values;
}

double cosine_lr(double initial, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) {
    throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  }
  if (step > total_steps) {
    throw std::invalid_argument("cosine_lr: step beyond schedule end");
  }
  const double phase =
      std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return initial * (1.0 + std::cos(phase)) / 2.0;
}

TrainResult train_stage(const StageDataset& stage_data, StageHead head, const EnergyConfig& cfg,
                        const OptimizerConfig& opt) {
  cfg.validate();
  opt.validate();
  if (stage_data.train.empty()) {
    throw std::invalid_argument("train_stage: stage " + std::to_string(stage_data.stage_id) +
                                " has no training data");
  }

  std::vector<LabeledExample> examples;
  examples.reserve(stage_data.train.size());
  for (const FeatureRecord& r : stage_data.train) {
    if (r.features.size() != head.feature_dim()) {
      throw std::invalid_argument("train_stage: feature dimension " +
                                  std::to_string(r.features.size()) + " does not match head (" +
                                  std::to_string(head.feature_dim()) + ")");
    }
    examples.push_back({r.features, head.local_label(r.label)});
  }

  TrainResult result{std::move(head), {}};
  if (opt.epochs == 0) {
    return result;
  }

  const std::size_t n = examples.size();
  const std::size_t batch = static_cast<std::size_t>(opt.batch_size);
  const std::size_t batches_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = static_cast<std::size_t>(opt.epochs) * batches_per_epoch;

  Rng rng(opt.seed);
  HeadParams velocity = zeros_like(result.head.params);
  const auto params = parameter_arrays(result.head.params);
  const auto vel = parameter_arrays(velocity);

  std::size_t step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(examples);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t size = std::min(batch, n - start);
      const std::span<const LabeledExample> slice(examples.data() + start, size);

      const double loss = total_loss(result.head, slice, cfg);
      if (!std::isfinite(loss)) {
        throw DivergenceError("train_stage: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                  " (stage " + std::to_string(stage_data.stage_id) + ")",
                              stage_data.stage_id, epoch + 1);
      }
      epoch_loss += loss;

      HeadParams grads = loss_gradients(result.head, slice, cfg);
      const auto grad_arrays = parameter_arrays(grads);
      const double lr =
          opt.cosine_schedule ? cosine_lr(opt.learning_rate, step, total_steps) : opt.learning_rate;
      for (std::size_t a = 0; a < params.size(); ++a) {
        std::vector<double>& p = *params[a];
        std::vector<double>& v = *vel[a];
        const std::vector<double>& g = *grad_arrays[a];
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double regularized = g[i] + opt.weight_decay * p[i];
          v[i] = opt.momentum * v[i] - lr * regularized;
          p[i] += v[i];
        }
      }
      ++step;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches_per_epoch));
  }
  return result;
}

namespace {

// Logits of every head on every record, computed once so a temperature sweep
// touches no weights.
std::vector<std::vector<LogitVector>> logits_cache(std::span<const FeatureRecord> records,
                                                   std::span<const StageHead> bank) {
  std::vector<std::vector<LogitVector>> cache(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    cache[r].reserve(bank.size());
    for (const StageHead& head : bank) {
      cache[r].push_back(forward(head, records[r].features));
    }
  }
  return cache;
}

double stage_accuracy_from_logits(const std::vector<std::vector<LogitVector>>& cache,
                                  std::span<const FeatureRecord> records, Temperature t) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < cache.size(); ++r) {
    int best = 1;
    double best_conf = confidence_score(cache[r][0], t);
    for (std::size_t s = 1; s < cache[r].size(); ++s) {
      const double conf = confidence_score(cache[r][s], t);
      if (conf > best_conf) {
        best_conf = conf;
        best = static_cast<int>(s) + 1;
      }
    }
    if (best == records[r].stage_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(cache.size());
}

}  // namespace

double stage_id_accuracy(std::span<const FeatureRecord> records, std::span<const StageHead> bank,
                         Temperature t) {
  if (records.empty()) {
    throw std::invalid_argument("stage_id_accuracy: empty input");
  }
  if (bank.empty()) {
    throw std::invalid_argument("stage_id_accuracy: empty bank");
  }
  return stage_accuracy_from_logits(logits_cache(records, bank), records, t);
}

CalibrationResult calibrate_temperature(std::span<const FeatureRecord> current_train,
                                        std::span<const StageHead> bank, TemperaturePools pools,
                                        int threads) {
  pools.validate();
  if (bank.empty()) {
    throw std::invalid_argument("calibrate_temperature: empty bank");
  }
  if (bank.size() < 2) {
    return {std::move(pools), std::nullopt};
  }
  if (current_train.empty()) {
    throw std::invalid_argument("calibrate_temperature: empty calibration data");
  }

  const std::vector<std::vector<LogitVector>> cache = logits_cache(current_train, bank);
  const std::vector<double>& candidates = pools.candidates;
  std::vector<double> accuracies(candidates.size());

  const std::size_t workers =
      std::min<std::size_t>(std::max(threads, 1), candidates.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      accuracies[i] = stage_accuracy_from_logits(cache, current_train, Temperature(candidates[i]));
    }
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(workers);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        const std::size_t begin = candidates.size() * w / workers;
        const std::size_t end = candidates.size() * (w + 1) / workers;
        try {
          for (std::size_t i = begin; i < end; ++i) {
            accuracies[i] =
                stage_accuracy_from_logits(cache, current_train, Temperature(candidates[i]));
          }
        } catch (...) {
          failures[w] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : failures) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Strict improvement keeps the smallest candidate on ties; the scan order
  // is fixed regardless of the sweep's thread count.
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (accuracies[i] > accuracies[best]) best = i;
  }
  const double chosen = candidates[best];
  pools.selected.push_back(chosen);
  return {std::move(pools), chosen};
}

namespace {

constexpr std::uint64_t kInitTag = 0x494e4954u;     // head initialization
constexpr std::uint64_t kShuffleTag = 0x53485546u;  // epoch shuffling

std::vector<int> union_label_set(std::span<const StageDataset> stages) {
  std::set<int> labels;
  for (const StageDataset& ds : stages) {
    labels.insert(ds.label_set.begin(), ds.label_set.end());
  }
  return {labels.begin(), labels.end()};
}

double split_accuracy(std::span<const FeatureRecord> records, const ModelBank& bank, int threads) {
  const std::vector<PredictionResult> predictions = predict_batch(records, bank, threads);
  std::vector<int> predicted(records.size());
  std::vector<int> expected(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    predicted[i] = predictions[i].chosen_class;
    expected[i] = records[i].label;
  }
  return accuracy(predicted, expected);
}

}  // namespace

StreamResult run_stream(std::vector<StageDataset> stages, const StreamConfig& cfg,
                        const ModelBank* resume) {
  validate_stream(stages, cfg.mode);
  cfg.energy.validate();
  cfg.opt.validate();
  const int threads = std::max(1, cfg.threads);

  for (const StageDataset& ds : stages) {
    if (ds.train.empty() || ds.test.empty()) {
      throw std::invalid_argument("run_stream: stage " + std::to_string(ds.stage_id) +
                                  " is missing a train or test split");
    }
  }

  TemperaturePools pools{cfg.psi.materialize(), {}};
  StreamResult result;
  result.bank.cfg = cfg.energy;
  result.bank.mode = cfg.mode;

  std::size_t completed = 0;
  if (resume != nullptr) {
    if (cfg.shared_head) {
      throw std::invalid_argument("run_stream: resume is not supported with a shared head");
    }
    resume->validate();
    if (resume->heads.size() > stages.size()) {
      throw std::invalid_argument("run_stream: resume bank has more heads than the stream");
    }
    if (resume->cfg.anchor != cfg.energy.anchor || resume->cfg.lambda != cfg.energy.lambda ||
        resume->cfg.train_temperature != cfg.energy.train_temperature ||
        resume->mode != cfg.mode) {
      throw std::invalid_argument("run_stream: resume bank settings differ from the config");
    }
    result.bank = *resume;
    pools.selected = resume->omega;
    completed = resume->heads.size();
  }
  pools.validate();
  result.first_trained_stage = static_cast<int>(completed) + 1;

  // Test splits stay for evaluation; train splits live only until their
  // stage finishes.
  std::vector<std::vector<FeatureRecord>> test_splits;
  test_splits.reserve(stages.size());
  for (StageDataset& ds : stages) {
    test_splits.push_back(std::move(ds.test));
  }
  for (std::size_t i = 0; i < completed; ++i) {
    stages[i].train = {};
  }

  const std::vector<int> shared_labels =
      cfg.shared_head ? union_label_set(stages) : std::vector<int>{};

  for (std::size_t i = completed; i < stages.size(); ++i) {
    StageDataset& ds = stages[i];
    const std::uint64_t stage_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(ds.stage_id));
    const std::size_t dim = ds.train.front().features.size();

    StageHead head;
    if (cfg.shared_head) {
      if (result.bank.heads.empty()) {
        Rng init_rng(mix_seed(stage_seed, kInitTag));
        head = make_stage_head(1, shared_labels, dim, cfg.head_variant, cfg.hidden_units, init_rng);
      } else {
        head = std::move(result.bank.heads.front());
        result.bank.heads.clear();
      }
    } else {
      Rng init_rng(mix_seed(stage_seed, kInitTag));
      head = make_stage_head(ds.stage_id, ds.label_set, dim, cfg.head_variant, cfg.hidden_units,
                             init_rng);
    }

    OptimizerConfig opt = cfg.opt;
    opt.seed = mix_seed(stage_seed, kShuffleTag);
    TrainResult trained = train_stage(ds, std::move(head), cfg.energy, opt);
    result.bank.heads.push_back(std::move(trained.head));
    result.loss_traces.push_back(std::move(trained.epoch_losses));

    if (cfg.calibrate) {
      CalibrationResult calibrated =
          calibrate_temperature(ds.train, result.bank.heads, std::move(pools), threads);
      pools = std::move(calibrated.pools);
    }
    result.bank.omega = pools.selected;
    ds.train = {};  // rehearsal-free: this stage's data is gone for good

    std::vector<double> row;
    row.reserve(i + 1);
    for (std::size_t j = 0; j <= i; ++j) {
      row.push_back(split_accuracy(test_splits[j], result.bank, threads));
    }
    result.matrix.rows.push_back(std::move(row));
  }

  result.bank.validate();
  return result;
}

}  // namespace esr
