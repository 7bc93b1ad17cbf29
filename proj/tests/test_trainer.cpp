#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <doctest.h>

#include "esr/data.hpp"
#include "esr/energy.hpp"
#include "esr/head.hpp"
#include "esr/rng.hpp"
#include "esr/trainer.hpp"
#include "oracles.hpp"

using esr::EnergyConfig;
using esr::FeatureRecord;
using esr::OptimizerConfig;
using esr::StageDataset;
using esr::StageHead;
using esr::StreamConfig;
using esr::StreamSpec;
using esr::Temperature;

namespace {

StreamSpec small_cil(int stages, std::uint64_t seed) {
  StreamSpec spec;
  spec.num_stages = stages;
  spec.classes_per_stage = 2;
  spec.feature_dim = 6;
  spec.train_per_class = 20;
  spec.test_per_class = 8;
  spec.seed = seed;
  return spec;
}

StreamConfig quick_config() {
  StreamConfig cfg;
  cfg.opt.epochs = 5;
  cfg.opt.batch_size = 32;
  cfg.psi.step = 0.01;  // coarse grid keeps the sweep cheap
  return cfg;
}

// Zero-weight head whose logits are exactly the given biases.
StageHead bias_head(int stage_id, std::vector<double> biases, std::size_t dim) {
  std::vector<int> labels(biases.size());
  for (std::size_t c = 0; c < labels.size(); ++c) labels[c] = static_cast<int>(c);
  esr::Rng rng(1);
  StageHead head = esr::make_stage_head(stage_id, labels, dim, esr::HeadVariant::kLinear, 0, rng);
  for (double& w : head.params.output.weight.data) w = 0.0;
  head.params.output.bias = std::move(biases);
  return head;
}

std::vector<FeatureRecord> records_for_stage(int stage_id, std::size_t count, std::size_t dim) {
  std::vector<FeatureRecord> records(count);
  esr::Rng rng(static_cast<std::uint64_t>(stage_id) * 1000 + 7);
  for (FeatureRecord& r : records) {
    r.stage_id = stage_id;
    r.label = 0;
    r.features.resize(dim);
    for (float& f : r.features) f = static_cast<float>(rng.normal());
  }
  return records;
}

double mean_free_energy(const StageHead& head, const std::vector<FeatureRecord>& records) {
  double sum = 0.0;
  for (const FeatureRecord& r : records) {
    sum += esr::free_energy(esr::forward(head, r.features), Temperature(1.0));
  }
  return sum / static_cast<double>(records.size());
}

double free_energy_std(const StageHead& head, const std::vector<FeatureRecord>& records) {
  std::vector<double> values;
  values.reserve(records.size());
  for (const FeatureRecord& r : records) {
    values.push_back(esr::free_energy(esr::forward(head, r.features), Temperature(1.0)));
  }
  return esr::population_std(values);
}

}  // namespace

TEST_CASE("cosine schedule follows the closed form") {
  const double eps = 0.01;
  const std::size_t total = 240;
  for (std::size_t step : {std::size_t{0}, std::size_t{1}, std::size_t{17}, std::size_t{239}}) {
    const double expect =
        eps * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                              static_cast<double>(total))) /
        2.0;
    CHECK(esr::cosine_lr(eps, step, total) == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(esr::cosine_lr(eps, 0, total) == doctest::Approx(eps).epsilon(1e-15));
  // The last step of a long run decays to a tiny fraction of the initial rate.
  CHECK(esr::cosine_lr(eps, 999, 1000) <= 1e-2 * eps);
  CHECK_THROWS_AS(esr::cosine_lr(eps, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(esr::cosine_lr(eps, 11, 10), std::invalid_argument);
}

TEST_CASE("optimizer config validation") {
  OptimizerConfig opt;
  CHECK_NOTHROW(opt.validate());
  opt.epochs = 0;
  CHECK_NOTHROW(opt.validate());  // a zero-epoch run is a legal no-op
  opt.epochs = -1;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
  opt = OptimizerConfig{};
  opt.learning_rate = 0.0;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
  opt = OptimizerConfig{};
  opt.momentum = 1.0;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
  opt = OptimizerConfig{};
  opt.momentum = -0.1;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
  opt = OptimizerConfig{};
  opt.batch_size = 0;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
  opt = OptimizerConfig{};
  opt.weight_decay = -1e-4;
  CHECK_THROWS_AS(opt.validate(), std::invalid_argument);
}

TEST_CASE("psi grid materializes the inclusive range") {
  esr::PsiSpec psi;
  const std::vector<double> grid = psi.materialize();
  REQUIRE(grid.size() == 1000);
  CHECK(grid.front() == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(grid[1] == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(grid.back() == 1.0);  // clamped exactly, no accumulation error
  for (std::size_t i = 1; i < grid.size(); ++i) {
    CHECK(grid[i] > grid[i - 1]);
  }

  esr::PsiSpec narrow{0.5, 0.5, 0.1};
  CHECK(narrow.materialize() == std::vector<double>{0.5});

  esr::PsiSpec bad{0.0, 1.0, 0.1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {0.5, 0.4, 0.1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = {0.1, 0.5, 0.0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("temperature pools validation") {
  esr::TemperaturePools pools{{0.1, 0.2, 0.3}, {0.2, 0.2}};
  CHECK_NOTHROW(pools.validate());
  pools.selected = {0.25};
  CHECK_THROWS_AS(pools.validate(), std::invalid_argument);
  pools = {{0.2, 0.1}, {}};
  CHECK_THROWS_AS(pools.validate(), std::invalid_argument);
  pools = {{}, {}};
  CHECK_THROWS_AS(pools.validate(), std::invalid_argument);
}

TEST_CASE("zero epochs leave the head untouched") {
  StreamSpec spec = small_cil(1, 5);
  const auto stream = esr::generate_stream(spec);
  esr::Rng init(9);
  const StageHead head = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                              esr::HeadVariant::kLinear, 0, init);
  OptimizerConfig opt;
  opt.epochs = 0;
  const esr::TrainResult result = esr::train_stage(stream[0], head, EnergyConfig{}, opt);
  CHECK(result.head.params.output.weight.data == head.params.output.weight.data);
  CHECK(result.head.params.output.bias == head.params.output.bias);
  CHECK(result.epoch_losses.empty());
}

TEST_CASE("training separates well-separated clusters perfectly") {
  StreamSpec spec;
  spec.num_stages = 1;
  spec.classes_per_stage = 2;
  spec.feature_dim = 8;
  spec.train_per_class = 50;
  spec.test_per_class = 10;
  spec.separation = 10.0;
  spec.seed = 13;
  const auto stream = esr::generate_stream(spec);

  esr::Rng init(2);
  StageHead head = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                        esr::HeadVariant::kLinear, 0, init);
  OptimizerConfig opt;
  opt.seed = 3;
  opt.batch_size = 8;  // 13 steps per epoch; the default 128 gives one step per epoch here
  const EnergyConfig cfg;
  const esr::TrainResult result = esr::train_stage(stream[0], std::move(head), cfg, opt);
  REQUIRE(result.epoch_losses.size() == 30);
  CHECK(result.epoch_losses.back() < result.epoch_losses.front());

  std::size_t hits = 0;
  for (const FeatureRecord& r : stream[0].train) {
    const esr::LogitVector logits = esr::forward(result.head, r.features);
    const std::size_t best = logits[0] >= logits[1] ? 0 : 1;
    if (result.head.global_label(static_cast<int>(best)) == r.label) ++hits;
  }
  CHECK(hits == stream[0].train.size());

  SUBCASE("the anchor pulls the mean free energy onto the target") {
    CHECK(std::abs(mean_free_energy(result.head, stream[0].train) - cfg.anchor) <= 1.0);
  }

  SUBCASE("the anchor tightens the free-energy spread") {
    EnergyConfig no_anchor;
    no_anchor.lambda = 0.0;
    esr::Rng init2(2);
    StageHead head2 = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                           esr::HeadVariant::kLinear, 0, init2);
    const esr::TrainResult plain = esr::train_stage(stream[0], std::move(head2), no_anchor, opt);
    CHECK(free_energy_std(result.head, stream[0].train) <
          free_energy_std(plain.head, stream[0].train));
  }
}

TEST_CASE("training is deterministic in the seeds") {
  StreamSpec spec = small_cil(1, 77);
  const auto stream = esr::generate_stream(spec);
  OptimizerConfig opt;
  opt.epochs = 3;
  opt.seed = 42;
  esr::Rng init_a(11);
  esr::Rng init_b(11);
  const StageHead head_a = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                                esr::HeadVariant::kLinear, 0, init_a);
  const StageHead head_b = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                                esr::HeadVariant::kLinear, 0, init_b);
  const auto a = esr::train_stage(stream[0], head_a, EnergyConfig{}, opt);
  const auto b = esr::train_stage(stream[0], head_b, EnergyConfig{}, opt);
  CHECK(a.head.params.output.weight.data == b.head.params.output.weight.data);
  CHECK(a.head.params.output.bias == b.head.params.output.bias);
  CHECK(a.epoch_losses == b.epoch_losses);

  opt.seed = 43;  // different shuffle order changes the trajectory
  const auto c = esr::train_stage(stream[0], head_a, EnergyConfig{}, opt);
  CHECK(a.head.params.output.weight.data != c.head.params.output.weight.data);
}

TEST_CASE("divergence aborts with the stage and epoch") {
  StreamSpec spec = small_cil(1, 31);
  auto stream = esr::generate_stream(spec);
  stream[0].stage_id = 1;

  SUBCASE("poisoned parameters fail on the first batch") {
    esr::Rng init(5);
    StageHead head = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                          esr::HeadVariant::kLinear, 0, init);
    head.params.output.weight.data[0] = std::numeric_limits<double>::quiet_NaN();
    OptimizerConfig opt;
    opt.epochs = 2;
    try {
      esr::train_stage(stream[0], std::move(head), EnergyConfig{}, opt);
      FAIL("expected DivergenceError");
    } catch (const esr::DivergenceError& e) {
      CHECK(e.stage_id() == 1);
      CHECK(e.epoch() == 1);
      CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
  }

  SUBCASE("an absurd learning rate overflows within a few epochs") {
    esr::Rng init(5);
    StageHead head = esr::make_stage_head(1, stream[0].label_set, spec.feature_dim,
                                          esr::HeadVariant::kLinear, 0, init);
    OptimizerConfig opt;
    opt.epochs = 60;
    opt.learning_rate = 1e6;
    opt.cosine_schedule = false;
    CHECK_THROWS_AS(esr::train_stage(stream[0], std::move(head), EnergyConfig{}, opt),
                    esr::DivergenceError);
  }
}

TEST_CASE("stage id accuracy routes by confidence") {
  const std::size_t dim = 3;

  SUBCASE("a single head matches everything") {
    const std::vector<StageHead> bank{bias_head(1, {0.5, -0.5}, dim)};
    const auto records = records_for_stage(1, 10, dim);
    CHECK(esr::stage_id_accuracy(records, bank, Temperature(1.0)) == 1.0);
  }

  SUBCASE("identical heads tie toward the smallest stage id") {
    std::vector<StageHead> bank;
    bank.push_back(bias_head(1, {1.0, 1.0}, dim));
    bank.push_back(bias_head(2, {1.0, 1.0}, dim));
    auto records = records_for_stage(1, 6, dim);
    const auto stage2 = records_for_stage(2, 6, dim);
    records.insert(records.end(), stage2.begin(), stage2.end());
    CHECK(esr::stage_id_accuracy(records, bank, Temperature(1.0)) == doctest::Approx(0.5));
  }

  SUBCASE("empty input is rejected") {
    const std::vector<StageHead> bank{bias_head(1, {0.0}, dim)};
    CHECK_THROWS_AS(esr::stage_id_accuracy({}, bank, Temperature(1.0)), std::invalid_argument);
  }
}

TEST_CASE("calibration picks the accuracy-maximizing temperature") {
  const std::size_t dim = 4;

  SUBCASE("single-head banks are a no-op") {
    const std::vector<StageHead> bank{bias_head(1, {1.0, 0.0}, dim)};
    esr::TemperaturePools pools{{0.001, 0.01, 0.1, 1.0}, {}};
    const auto result =
        esr::calibrate_temperature(records_for_stage(1, 4, dim), bank, pools);
    CHECK_FALSE(result.chosen.has_value());
    CHECK(result.pools.selected.empty());
    CHECK(result.pools.candidates == pools.candidates);
  }

  SUBCASE("a flat accuracy profile ties to the smallest candidate") {
    // Identical heads route every record to stage 1 at every temperature, so
    // stage-2 accuracy is 0 across the grid.
    std::vector<StageHead> bank;
    bank.push_back(bias_head(1, {1.0, 1.0}, dim));
    bank.push_back(bias_head(2, {1.0, 1.0}, dim));
    esr::TemperaturePools pools{{0.001, 0.01, 0.1, 1.0}, {}};
    const auto result =
        esr::calibrate_temperature(records_for_stage(2, 8, dim), bank, std::move(pools));
    REQUIRE(result.chosen.has_value());
    CHECK(*result.chosen == 0.001);
    CHECK(result.pools.selected == std::vector<double>{0.001});
  }

  SUBCASE("low temperatures expose a sharp head hidden at high ones") {
    // Head 1: logits [1, 1]; head 2: logits [1.01, -29]. At T=1 the two-way
    // spread of head 1 wins; below ~0.0144 head 2's peak dominates.
    std::vector<StageHead> bank;
    bank.push_back(bias_head(1, {1.0, 1.0}, dim));
    bank.push_back(bias_head(2, {1.01, -29.0}, dim));
    const auto calibration_data = records_for_stage(2, 10, dim);

    esr::PsiSpec psi;
    esr::TemperaturePools pools{psi.materialize(), {}};
    const auto result = esr::calibrate_temperature(calibration_data, bank, pools);
    REQUIRE(result.chosen.has_value());
    CHECK(*result.chosen <= 0.0144);
    CHECK(result.pools.selected.back() == *result.chosen);

    // Brute-force oracle over the same grid in extended precision.
    const std::vector<double> logits1{1.0, 1.0};
    const std::vector<double> logits2{1.01, -29.0};
    long double best_acc = -1.0L;
    double best_t = 0.0;
    for (double t : pools.candidates) {
      std::size_t hits = 0;
      for (const FeatureRecord& r : calibration_data) {
        const long double h1 = -oracle::free_energy(logits1, static_cast<long double>(t));
        const long double h2 = -oracle::free_energy(logits2, static_cast<long double>(t));
        const int routed = h2 > h1 ? 2 : 1;
        if (routed == r.stage_id) ++hits;
      }
      const long double acc =
          static_cast<long double>(hits) / static_cast<long double>(calibration_data.size());
      if (acc > best_acc) {
        best_acc = acc;
        best_t = t;
      }
    }
    CHECK(*result.chosen == best_t);

    // The chosen temperature routes at least as well as the untuned T = 1.
    CHECK(esr::stage_id_accuracy(calibration_data, bank, Temperature(*result.chosen)) >=
          esr::stage_id_accuracy(calibration_data, bank, Temperature(1.0)));
  }

  SUBCASE("the sweep is thread-count invariant") {
    std::vector<StageHead> bank;
    bank.push_back(bias_head(1, {0.4, 0.2}, dim));
    bank.push_back(bias_head(2, {0.5, 0.1}, dim));
    esr::PsiSpec psi;
    psi.step = 0.01;
    esr::TemperaturePools pools{psi.materialize(), {}};
    const auto serial =
        esr::calibrate_temperature(records_for_stage(2, 12, dim), bank, pools, 1);
    const auto parallel =
        esr::calibrate_temperature(records_for_stage(2, 12, dim), bank, pools, 8);
    REQUIRE(serial.chosen.has_value());
    REQUIRE(parallel.chosen.has_value());
    CHECK(*serial.chosen == *parallel.chosen);
  }
}

TEST_CASE("run_stream grows one head and one temperature per stage") {
  SUBCASE("a single stage leaves the pool empty") {
    const auto stream = esr::generate_stream(small_cil(1, 41));
    const auto result = esr::run_stream(stream, quick_config());
    CHECK(result.bank.heads.size() == 1);
    CHECK(result.bank.omega.empty());
    REQUIRE(result.matrix.rows.size() == 1);
    CHECK(result.matrix.rows[0].size() == 1);
    CHECK(result.first_trained_stage == 1);
  }

  SUBCASE("three stages yield two calibrated temperatures") {
    const auto stream = esr::generate_stream(small_cil(3, 41));
    const StreamConfig cfg = quick_config();
    const auto result = esr::run_stream(stream, cfg);
    CHECK(result.bank.heads.size() == 3);
    REQUIRE(result.bank.omega.size() == 2);
    const auto grid = cfg.psi.materialize();
    for (double t : result.bank.omega) {
      CHECK(std::binary_search(grid.begin(), grid.end(), t));
    }
    REQUIRE(result.matrix.rows.size() == 3);
    CHECK(result.matrix.rows[2].size() == 3);
    CHECK(result.loss_traces.size() == 3);
    // Easy clusters: the final row should be near-perfect everywhere.
    for (double acc : result.matrix.rows[2]) {
      CHECK(acc >= 0.9);
    }
  }

  SUBCASE("disabling calibration leaves the pool empty") {
    const auto stream = esr::generate_stream(small_cil(2, 41));
    StreamConfig cfg = quick_config();
    cfg.calibrate = false;
    const auto result = esr::run_stream(stream, cfg);
    CHECK(result.bank.omega.empty());
  }

  SUBCASE("a shared head carries all classes") {
    const auto stream = esr::generate_stream(small_cil(3, 41));
    StreamConfig cfg = quick_config();
    cfg.shared_head = true;
    const auto result = esr::run_stream(stream, cfg);
    REQUIRE(result.bank.heads.size() == 1);
    CHECK(result.bank.heads[0].class_count() == 6);
    CHECK(result.bank.omega.empty());  // single head, nothing to calibrate
    CHECK(result.matrix.rows.size() == 3);
  }
}

TEST_CASE("run_stream is deterministic and leaves old heads frozen") {
  const auto stream = esr::generate_stream(small_cil(3, 51));
  const StreamConfig cfg = quick_config();

  const auto a = esr::run_stream(stream, cfg);
  const auto b = esr::run_stream(stream, cfg);
  REQUIRE(a.bank.heads.size() == b.bank.heads.size());
  for (std::size_t h = 0; h < a.bank.heads.size(); ++h) {
    CHECK(a.bank.heads[h].params.output.weight.data == b.bank.heads[h].params.output.weight.data);
    CHECK(a.bank.heads[h].params.output.bias == b.bank.heads[h].params.output.bias);
  }
  CHECK(a.bank.omega == b.bank.omega);
  CHECK(a.matrix.rows == b.matrix.rows);

  SUBCASE("a prefix run produces bit-identical early heads") {
    const std::vector<StageDataset> prefix(stream.begin(), stream.begin() + 1);
    const auto first_only = esr::run_stream(prefix, cfg);
    CHECK(first_only.bank.heads[0].params.output.weight.data ==
          a.bank.heads[0].params.output.weight.data);
    CHECK(first_only.bank.heads[0].params.output.bias == a.bank.heads[0].params.output.bias);
  }

  SUBCASE("thread fan-out does not change the outcome") {
    StreamConfig threaded = cfg;
    threaded.threads = 8;
    const auto c = esr::run_stream(stream, threaded);
    CHECK(c.bank.omega == a.bank.omega);
    CHECK(c.matrix.rows == a.matrix.rows);
    for (std::size_t h = 0; h < a.bank.heads.size(); ++h) {
      CHECK(c.bank.heads[h].params.output.weight.data ==
            a.bank.heads[h].params.output.weight.data);
    }
  }

  SUBCASE("resume from a mid-stream bank converges to the same final state") {
    const std::vector<StageDataset> first_two(stream.begin(), stream.begin() + 2);
    const auto partial = esr::run_stream(first_two, cfg);
    const auto resumed = esr::run_stream(stream, cfg, &partial.bank);
    CHECK(resumed.first_trained_stage == 3);
    REQUIRE(resumed.bank.heads.size() == 3);
    for (std::size_t h = 0; h < 3; ++h) {
      CHECK(resumed.bank.heads[h].params.output.weight.data ==
            a.bank.heads[h].params.output.weight.data);
      CHECK(resumed.bank.heads[h].params.output.bias == a.bank.heads[h].params.output.bias);
    }
    CHECK(resumed.bank.omega == a.bank.omega);
    REQUIRE(resumed.matrix.rows.size() == 1);
    CHECK(resumed.matrix.rows[0] == a.matrix.rows[2]);
  }

  SUBCASE("resume rejects mismatched settings") {
    const std::vector<StageDataset> first_two(stream.begin(), stream.begin() + 2);
    const auto partial = esr::run_stream(first_two, cfg);
    StreamConfig other = cfg;
    other.energy.anchor = -5.0;
    CHECK_THROWS_AS(esr::run_stream(stream, other, &partial.bank), std::invalid_argument);
    StreamConfig shared = cfg;
    shared.shared_head = true;
    CHECK_THROWS_AS(esr::run_stream(stream, shared, &partial.bank), std::invalid_argument);
  }
}

TEST_CASE("run_stream validates its inputs") {
  auto stream = esr::generate_stream(small_cil(2, 61));
  const StreamConfig cfg = quick_config();

  SUBCASE("out-of-order stage ids are rejected") {
    std::swap(stream[0], stream[1]);
    CHECK_THROWS_AS(esr::run_stream(stream, cfg), std::invalid_argument);
  }

  SUBCASE("missing splits are rejected") {
    stream[1].test.clear();
    CHECK_THROWS_AS(esr::run_stream(stream, cfg), std::invalid_argument);
  }
}
