#include "esr/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "esr/inference.hpp"
#include "esr/rng.hpp"

namespace esr {

using nlohmann::json;

void ExperimentConfig::validate() const {
  if (synthetic.has_value() == manifest.has_value()) {
    throw std::invalid_argument(
        "ExperimentConfig: exactly one of synthetic spec and manifest path must be set");
  }
  if (synthetic) {
    synthetic->validate();
    if (synthetic->mode != mode) {
      throw std::invalid_argument("ExperimentConfig: stream mode disagrees with synthetic spec");
    }
  }
  energy.validate();
  opt.validate();
  psi.validate();
  if (head_variant == HeadVariant::kMlp && hidden_units == 0) {
    throw std::invalid_argument("ExperimentConfig: hidden_units must be >= 1 for the MLP head");
  }
  if (seeds.empty()) {
    throw std::invalid_argument("ExperimentConfig: at least one seed required");
  }
  std::vector<std::uint64_t> sorted = seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("ExperimentConfig: seeds must be distinct");
  }
}

namespace {

constexpr std::uint64_t kRunSeedTag = 0x52554e53u;  // reseeds the stream per run seed

std::string variant_name(HeadVariant v) { return v == HeadVariant::kMlp ? "mlp" : "linear"; }

}  // namespace

std::vector<StageDataset> materialize_stream(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  cfg.validate();
  if (cfg.manifest) {
    std::vector<StageDataset> stream = load_stream(*cfg.manifest);
    validate_stream(stream, cfg.mode);
    return stream;
  }
  StreamSpec spec = *cfg.synthetic;
  spec.seed = mix_seed(mix_seed(spec.seed, kRunSeedTag), run_seed);
  return generate_stream(spec);
}

SeedOutcome execute_seed(const ExperimentConfig& cfg, std::uint64_t run_seed) {
  std::vector<StageDataset> stream = materialize_stream(cfg, run_seed);

  std::vector<FeatureRecord> test_pool;
  for (const StageDataset& ds : stream) {
    test_pool.insert(test_pool.end(), ds.test.begin(), ds.test.end());
  }
  const std::size_t stage_total = stream.size();

  StreamConfig scfg;
  scfg.energy = cfg.energy;
  if (cfg.disable_anchor_loss) {
    scfg.energy.lambda = 0.0;
  }
  scfg.opt = cfg.opt;
  scfg.psi = cfg.psi;
  scfg.head_variant = cfg.head_variant;
  scfg.hidden_units = cfg.hidden_units;
  scfg.mode = cfg.mode;
  scfg.calibrate = !cfg.disable_calibration;
  scfg.shared_head = cfg.shared_head;
  scfg.seed = run_seed;
  scfg.threads = cfg.threads;

  StreamResult result = run_stream(std::move(stream), scfg);

  SeedOutcome outcome;
  outcome.seed = run_seed;
  outcome.faa_value = faa(result.matrix);
  outcome.ff_value = ff(result.matrix);
  outcome.omega = result.bank.omega;
  if (result.bank.heads.size() == stage_total) {
    outcome.own_stage_rate = own_stage_top_rate(test_pool, result.bank);
  }
  outcome.matrix = std::move(result.matrix);
  outcome.loss_traces = std::move(result.loss_traces);
  outcome.bank = std::move(result.bank);
  return outcome;
}

std::vector<SeedOutcome> execute_all_seeds(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<SeedOutcome> outcomes;
  outcomes.reserve(cfg.seeds.size());
  for (std::uint64_t seed : cfg.seeds) {
    outcomes.push_back(execute_seed(cfg, seed));
  }
  return outcomes;
}

json config_echo(const ExperimentConfig& cfg) {
  json source;
  if (cfg.synthetic) {
    const StreamSpec& s = *cfg.synthetic;
    source = {{"kind", "synthetic"},
              {"num_stages", s.num_stages},
              {"classes_per_stage", s.classes_per_stage},
              {"feature_dim", s.feature_dim},
              {"train_per_class", s.train_per_class},
              {"test_per_class", s.test_per_class},
              {"separation", s.separation},
              {"domain_shift", s.domain_shift},
              {"noise_scale", s.noise_scale},
              {"stream_seed", s.seed}};
  } else {
    source = {{"kind", "manifest"}, {"path", cfg.manifest->generic_string()}};
  }
  return {{"mode", to_string(cfg.mode)},
          {"source", source},
          {"energy",
           {{"anchor", cfg.energy.anchor},
            {"lambda", cfg.energy.lambda},
            {"train_temperature", cfg.energy.train_temperature}}},
          {"optimizer",
           {{"learning_rate", cfg.opt.learning_rate},
            {"momentum", cfg.opt.momentum},
            {"weight_decay", cfg.opt.weight_decay},
            {"epochs", cfg.opt.epochs},
            {"batch_size", cfg.opt.batch_size},
            {"cosine_schedule", cfg.opt.cosine_schedule}}},
          {"psi", {{"min", cfg.psi.min}, {"max", cfg.psi.max}, {"step", cfg.psi.step}}},
          {"head", {{"variant", variant_name(cfg.head_variant)}, {"hidden_units", cfg.hidden_units}}},
          {"seeds", cfg.seeds},
          {"flags",
           {{"disable_anchor_loss", cfg.disable_anchor_loss},
            {"disable_calibration", cfg.disable_calibration},
            {"shared_head", cfg.shared_head}}}};
}

namespace {

json seed_entry(const SeedOutcome& outcome) {
  json entry = {{"seed", outcome.seed},
                {"faa", outcome.faa_value},
                {"ff", outcome.ff_value},
                {"omega", outcome.omega},
                {"omega_size", outcome.omega.size()},
                {"accuracy_matrix", outcome.matrix.rows}};
  if (outcome.own_stage_rate) {
    entry["own_stage_top_rate"] = *outcome.own_stage_rate;
  } else {
    entry["own_stage_top_rate"] = nullptr;
  }
  return entry;
}

json summarize(std::span<const SeedOutcome> outcomes) {
  std::vector<double> faas;
  std::vector<double> ffs;
  faas.reserve(outcomes.size());
  ffs.reserve(outcomes.size());
  for (const SeedOutcome& o : outcomes) {
    faas.push_back(o.faa_value);
    ffs.push_back(o.ff_value);
  }
  return {{"faa_mean", mean(faas)},
          {"faa_std", population_std(faas)},
          {"ff_mean", mean(ffs)},
          {"ff_std", population_std(ffs)}};
}

json seed_block(std::span<const SeedOutcome> outcomes) {
  json seeds = json::array();
  for (const SeedOutcome& o : outcomes) {
    seeds.push_back(seed_entry(o));
  }
  return seeds;
}

}  // namespace

json make_run_report(const ExperimentConfig& cfg, std::span<const SeedOutcome> outcomes,
                     double wall_seconds) {
  return {{"schema", "esr-report-v1"},
          {"kind", "run"},
          {"config", config_echo(cfg)},
          {"seeds", seed_block(outcomes)},
          {"summary", summarize(outcomes)},
          {"wall_time_seconds", wall_seconds}};
}

json make_ablate_report(const ExperimentConfig& cfg, std::span<const VariantOutcomes> variants,
                        double wall_seconds) {
  json list = json::array();
  for (const VariantOutcomes& v : variants) {
    list.push_back(
        {{"name", v.name}, {"seeds", seed_block(v.outcomes)}, {"summary", summarize(v.outcomes)}});
  }
  return {{"schema", "esr-report-v1"},
          {"kind", "ablate"},
          {"config", config_echo(cfg)},
          {"variants", list},
          {"wall_time_seconds", wall_seconds}};
}

json make_delta_report(const ExperimentConfig& cfg, std::span<const DeltaOutcomes> deltas,
                       double wall_seconds) {
  json list = json::array();
  std::vector<double> faa_means;
  faa_means.reserve(deltas.size());
  for (const DeltaOutcomes& d : deltas) {
    json summary = summarize(d.outcomes);
    faa_means.push_back(summary["faa_mean"].get<double>());
    list.push_back({{"delta", d.delta}, {"seeds", seed_block(d.outcomes)}, {"summary", summary}});
  }
  const auto [lo, hi] = std::minmax_element(faa_means.begin(), faa_means.end());
  return {{"schema", "esr-report-v1"},
          {"kind", "sweep-delta"},
          {"config", config_echo(cfg)},
          {"deltas", list},
          {"faa_spread", *hi - *lo},
          {"wall_time_seconds", wall_seconds}};
}

namespace {

void require(bool ok, const std::string& where) {
  if (!ok) {
    throw std::runtime_error("validate_report: " + where);
  }
}

void check_number(const json& j, const std::string& where) {
  require(j.is_number(), where + " must be a number");
}

void check_matrix(const json& m, const std::string& where) {
  require(m.is_array() && !m.empty(), where + " must be a nonempty array");
  for (std::size_t i = 0; i < m.size(); ++i) {
    const json& row = m[i];
    require(row.is_array() && row.size() == i + 1,
            where + " row " + std::to_string(i) + " must have " + std::to_string(i + 1) +
                " entries");
    for (const json& v : row) {
      require(v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0,
              where + " entries must lie in [0, 1]");
    }
  }
}

void check_seed_block(const json& seeds, const std::string& where) {
  require(seeds.is_array() && !seeds.empty(), where + " must be a nonempty array");
  for (const json& entry : seeds) {
    require(entry.is_object(), where + " entries must be objects");
    for (const char* key : {"seed", "faa", "ff", "omega", "omega_size", "own_stage_top_rate",
                            "accuracy_matrix"}) {
      require(entry.contains(key), where + " entry missing '" + key + "'");
    }
    check_number(entry["faa"], where + ".faa");
    check_number(entry["ff"], where + ".ff");
    require(entry["omega"].is_array(), where + ".omega must be an array");
    require(entry["omega_size"].is_number_unsigned() &&
                entry["omega_size"].get<std::size_t>() == entry["omega"].size(),
            where + ".omega_size must match the omega array");
    require(entry["own_stage_top_rate"].is_null() || entry["own_stage_top_rate"].is_number(),
            where + ".own_stage_top_rate must be a number or null");
    check_matrix(entry["accuracy_matrix"], where + ".accuracy_matrix");
  }
}

void check_summary(const json& summary, const std::string& where) {
  require(summary.is_object(), where + " must be an object");
  for (const char* key : {"faa_mean", "faa_std", "ff_mean", "ff_std"}) {
    require(summary.contains(key), where + " missing '" + key + "'");
    check_number(summary[key], where + "." + key);
  }
}

void check_config(const json& config) {
  require(config.is_object(), "config must be an object");
  for (const char* key : {"mode", "source", "energy", "optimizer", "psi", "head", "seeds",
                          "flags"}) {
    require(config.contains(key), std::string("config missing '") + key + "'");
  }
  require(config["source"].contains("kind"), "config.source missing 'kind'");
}

}  // namespace

void validate_report(const json& report) {
  require(report.is_object(), "report must be an object");
  require(report.contains("schema") && report["schema"] == "esr-report-v1",
          "schema must be 'esr-report-v1'");
  require(report.contains("kind"), "missing kind");
  const std::string kind = report["kind"].get<std::string>();
  require(report.contains("config"), "missing config");
  check_config(report["config"]);
  require(report.contains("wall_time_seconds") && report["wall_time_seconds"].is_number(),
          "missing wall_time_seconds");

  if (kind == "run") {
    require(report.contains("seeds"), "run report missing seeds");
    check_seed_block(report["seeds"], "seeds");
    require(report.contains("summary"), "run report missing summary");
    check_summary(report["summary"], "summary");
  } else if (kind == "ablate") {
    require(report.contains("variants") && report["variants"].is_array() &&
                !report["variants"].empty(),
            "ablate report missing variants");
    for (const json& v : report["variants"]) {
      require(v.contains("name") && v["name"].is_string(), "variant missing name");
      check_seed_block(v["seeds"], "variant.seeds");
      check_summary(v["summary"], "variant.summary");
    }
  } else if (kind == "sweep-delta") {
    require(report.contains("deltas") && report["deltas"].is_array() && !report["deltas"].empty(),
            "sweep report missing deltas");
    for (const json& d : report["deltas"]) {
      require(d.contains("delta") && d["delta"].is_number(), "delta entry missing delta");
      check_seed_block(d["seeds"], "delta.seeds");
      check_summary(d["summary"], "delta.summary");
    }
    require(report.contains("faa_spread") && report["faa_spread"].is_number(),
            "sweep report missing faa_spread");
  } else {
    require(false, "unknown kind '" + kind + "'");
  }
}

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& matrix) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("write_accuracy_csv: cannot open '" + path.string() + "'");
  }
  out << "stage,split,accuracy\n";
  for (std::size_t i = 0; i < matrix.rows.size(); ++i) {
    for (std::size_t j = 0; j < matrix.rows[i].size(); ++j) {
      out << (i + 1) << "," << (j + 1) << "," << json(matrix.rows[i][j]).dump() << "\n";
    }
  }
  if (!out) {
    throw std::runtime_error("write_accuracy_csv: short write to '" + path.string() + "'");
  }
}

}  // namespace esr
