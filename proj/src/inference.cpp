#include "esr/inference.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <set>
#include <stdexcept>
#include <thread>

namespace esr {

void ModelBank::validate() const {
  if (heads.empty()) {
    throw std::invalid_argument("ModelBank: no heads");
  }
  cfg.validate();
  std::size_t dim = 0;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    heads[i].validate();
    if (heads[i].stage_id != static_cast<int>(i) + 1) {
      throw std::invalid_argument("ModelBank: stage ids must run 1.." +
                                  std::to_string(heads.size()) + " in order");
    }
    if (dim == 0) dim = heads[i].feature_dim();
    if (heads[i].feature_dim() != dim) {
      throw std::invalid_argument("ModelBank: heads disagree on feature dimension");
    }
  }
  if (heads.size() > 1) {
    if (mode == StreamMode::kDil) {
      for (std::size_t i = 1; i < heads.size(); ++i) {
        if (heads[i].label_set != heads[0].label_set) {
          throw std::invalid_argument("ModelBank: dil heads must share one label set");
        }
      }
    } else {
      std::set<int> seen;
      for (const StageHead& h : heads) {
        for (int label : h.label_set) {
          if (!seen.insert(label).second) {
            throw std::invalid_argument("ModelBank: label " + std::to_string(label) +
                                        " claimed by more than one stage");
          }
        }
      }
    }
  }
  for (double t : omega) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      throw std::invalid_argument("ModelBank: temperatures must be positive");
    }
  }
}

namespace {

std::vector<LogitVector> all_logits(std::span<const float> feature, const ModelBank& bank) {
  std::vector<LogitVector> logits;
  logits.reserve(bank.heads.size());
  for (const StageHead& head : bank.heads) {
    logits.push_back(forward(head, feature));
  }
  return logits;
}

int best_stage_at(std::span<const LogitVector> logits, Temperature t) {
  int best = 1;
  double best_conf = confidence_score(logits[0], t);
  for (std::size_t s = 1; s < logits.size(); ++s) {
    const double conf = confidence_score(logits[s], t);
    if (conf > best_conf) {
      best_conf = conf;
      best = static_cast<int>(s) + 1;
    }
  }
  return best;
}

std::vector<StageVote> votes_from_logits(std::span<const LogitVector> logits,
                                         std::span<const double> omega) {
  static constexpr double kFallback[] = {1.0};
  const std::span<const double> effective = omega.empty() ? std::span<const double>(kFallback)
                                                          : omega;
  std::vector<StageVote> votes;
  votes.reserve(effective.size());
  for (double t : effective) {
    votes.push_back({t, best_stage_at(logits, Temperature(t))});
  }
  return votes;
}

}  // namespace

std::vector<StageVote> stage_votes(std::span<const float> feature, const ModelBank& bank) {
  if (bank.heads.empty()) {
    throw std::invalid_argument("stage_votes: empty bank");
  }
  return votes_from_logits(all_logits(feature, bank), bank.omega);
}

int select_stage(std::span<const StageVote> votes, std::span<const double> confidences_at_1) {
  if (votes.empty()) {
    throw std::invalid_argument("select_stage: empty votes");
  }
  std::map<int, std::size_t> counts;
  for (const StageVote& v : votes) {
    if (v.stage_id < 1 || static_cast<std::size_t>(v.stage_id) > confidences_at_1.size()) {
      throw std::invalid_argument("select_stage: vote names stage " + std::to_string(v.stage_id) +
                                  " outside the confidence table");
    }
    ++counts[v.stage_id];
  }
  int best_stage = 0;
  std::size_t best_count = 0;
  double best_conf = 0.0;
  // Ascending map order makes the final tie-break (smallest id) implicit.
  for (const auto& [stage, count] : counts) {
    const double conf = confidences_at_1[static_cast<std::size_t>(stage) - 1];
    if (best_stage == 0 || count > best_count || (count == best_count && conf > best_conf)) {
      best_stage = stage;
      best_count = count;
      best_conf = conf;
    }
  }
  return best_stage;
}

PredictionResult predict(std::span<const float> feature, const ModelBank& bank) {
  if (bank.heads.empty()) {
    throw std::invalid_argument("predict: empty bank");
  }
  const std::vector<LogitVector> logits = all_logits(feature, bank);

  PredictionResult result;
  result.confidences_at_1.reserve(logits.size());
  const Temperature unit(1.0);
  for (const LogitVector& l : logits) {
    result.confidences_at_1.push_back(confidence_score(l, unit));
  }
  result.votes = votes_from_logits(logits, bank.omega);
  result.chosen_stage = select_stage(result.votes, result.confidences_at_1);

  const StageHead& head = bank.heads[static_cast<std::size_t>(result.chosen_stage) - 1];
  const LogitVector& chosen = logits[static_cast<std::size_t>(result.chosen_stage) - 1];
  std::size_t best_local = 0;
  for (std::size_t k = 1; k < chosen.size(); ++k) {
    if (chosen[k] > chosen[best_local]) best_local = k;
  }
  result.chosen_class = head.global_label(static_cast<int>(best_local));
  return result;
}

std::vector<PredictionResult> predict_batch(std::span<const FeatureRecord> records,
                                            const ModelBank& bank, int threads) {
  std::vector<PredictionResult> results(records.size());
  if (records.empty()) {
    return results;
  }
  const std::size_t workers =
      std::min<std::size_t>(std::max(threads, 1), records.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      results[i] = predict(records[i].features, bank);
    }
    return results;
  }

  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t begin = records.size() * w / workers;
      const std::size_t end = records.size() * (w + 1) / workers;
      try {
        for (std::size_t i = begin; i < end; ++i) {
          results[i] = predict(records[i].features, bank);
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
  return results;
}

double own_stage_top_rate(std::span<const FeatureRecord> records, const ModelBank& bank) {
  if (records.empty()) {
    throw std::invalid_argument("own_stage_top_rate: empty input");
  }
  if (bank.heads.empty()) {
    throw std::invalid_argument("own_stage_top_rate: empty bank");
  }
  const Temperature unit(1.0);
  std::size_t hits = 0;
  for (const FeatureRecord& r : records) {
    if (r.stage_id < 1 || static_cast<std::size_t>(r.stage_id) > bank.heads.size()) {
      throw std::invalid_argument("own_stage_top_rate: record stage " + std::to_string(r.stage_id) +
                                  " outside the bank");
    }
    const double own = confidence_score(
        forward(bank.heads[static_cast<std::size_t>(r.stage_id) - 1], r.features), unit);
    bool strictly_top = true;
    for (const StageHead& head : bank.heads) {
      if (head.stage_id == r.stage_id) continue;
      if (confidence_score(forward(head, r.features), unit) >= own) {
        strictly_top = false;
        break;
      }
    }
    if (strictly_top) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace esr
