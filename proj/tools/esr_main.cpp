#include <charconv>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "esr/experiment.hpp"
#include "esr/gradcheck.hpp"
#include "esr/inference.hpp"

namespace {

using esr::ExperimentConfig;
using esr::SeedOutcome;

// Flag values shared by the experiment subcommands.
struct CliOptions {
  std::string manifest;
  std::string mode = "cil";
  int stages = 5;
  int classes_per_stage = 2;
  std::size_t dim = 16;
  int train_per_class = 100;
  int test_per_class = 50;
  double separation = 10.0;
  double domain_shift = 0.0;
  double noise = 1.0;
  std::uint64_t stream_seed = 1;

  double delta = -10.0;
  double lambda = 0.1;
  double train_temperature = 1.0;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 30;
  int batch = 128;
  bool constant_lr = false;
  std::string psi = "0.001:1.0:0.001";
  std::string head = "linear";
  std::size_t hidden = 64;

  std::vector<std::uint64_t> seeds;
  std::string out = "esr-out";
  bool disable_anchor_loss = false;
  bool disable_calibration = false;
  bool shared_head = false;
};

int threads_from_env() {
  const char* v = std::getenv("ESR_THREADS");
  if (v == nullptr || *v == '\0') {
    return 1;
  }
  int n = 0;
  const auto [ptr, ec] = std::from_chars(v, v + std::strlen(v), n);
  if (ec != std::errc() || *ptr != '\0' || n < 1) {
    throw std::invalid_argument("ESR_THREADS must be a positive integer, got '" + std::string(v) +
                                "'");
  }
  return n;
}

esr::PsiSpec parse_psi(const std::string& text) {
  esr::PsiSpec psi;
  const auto first = text.find(':');
  const auto second = text.find(':', first == std::string::npos ? first : first + 1);
  if (first == std::string::npos || second == std::string::npos ||
      text.find(':', second + 1) != std::string::npos) {
    throw std::invalid_argument("--psi expects MIN:MAX:STEP, got '" + text + "'");
  }
  try {
    std::size_t used = 0;
    psi.min = std::stod(text.substr(0, first), &used);
    if (used != first) throw std::invalid_argument("");
    const std::string mid = text.substr(first + 1, second - first - 1);
    psi.max = std::stod(mid, &used);
    if (used != mid.size()) throw std::invalid_argument("");
    const std::string tail = text.substr(second + 1);
    psi.step = std::stod(tail, &used);
    if (used != tail.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw std::invalid_argument("--psi expects numeric MIN:MAX:STEP, got '" + text + "'");
  }
  try {
    psi.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("--psi: " + std::string(e.what()));
  }
  return psi;
}

void add_stream_options(CLI::App* cmd, CliOptions& o) {
  cmd->add_option("--mode", o.mode, "stream structure")
      ->check(CLI::IsMember({"cil", "dil", "xdcil"}));
  cmd->add_option("--stages", o.stages, "number of stages");
  cmd->add_option("--classes-per-stage", o.classes_per_stage, "classes introduced per stage");
  cmd->add_option("--dim", o.dim, "feature dimension");
  cmd->add_option("--train-per-class", o.train_per_class, "train samples per class per stage");
  cmd->add_option("--test-per-class", o.test_per_class, "test samples per class per stage");
  cmd->add_option("--separation", o.separation, "cluster mean radius");
  cmd->add_option("--domain-shift", o.domain_shift, "per-stage mean shift (dil/xdcil)");
  cmd->add_option("--noise", o.noise, "sample noise scale");
  cmd->add_option("--stream-seed", o.stream_seed, "seed of the synthetic stream family");
}

void add_experiment_options(CLI::App* cmd, CliOptions& o) {
  add_stream_options(cmd, o);
  cmd->add_option("--manifest", o.manifest, "embedding-file manifest (instead of synthetic data)");
  cmd->add_option("--seed", o.seeds, "run seed, repeatable (default 1 2 3 4 5)");
  cmd->add_option("--delta", o.delta, "free-energy anchor");
  cmd->add_option("--lambda", o.lambda, "anchor-loss weight");
  cmd->add_option("--train-temperature", o.train_temperature, "temperature during training");
  cmd->add_option("--lr", o.lr, "initial learning rate");
  cmd->add_option("--momentum", o.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", o.weight_decay, "L2 weight decay");
  cmd->add_option("--epochs", o.epochs, "epochs per stage");
  cmd->add_option("--batch", o.batch, "batch size");
  cmd->add_flag("--constant-lr", o.constant_lr, "disable cosine annealing");
  cmd->add_option("--psi", o.psi, "temperature candidates MIN:MAX:STEP");
  cmd->add_option("--head", o.head, "head architecture")->check(CLI::IsMember({"linear", "mlp"}));
  cmd->add_option("--hidden", o.hidden, "hidden units of the mlp head");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_flag("--disable-anchor-loss", o.disable_anchor_loss, "train without the anchor term");
  cmd->add_flag("--disable-calibration", o.disable_calibration, "skip temperature calibration");
  cmd->add_flag("--shared-head", o.shared_head, "one head fine-tuned across all stages");
}

esr::StreamSpec stream_spec_from(const CliOptions& o) {
  esr::StreamSpec spec;
  spec.mode = esr::parse_stream_mode(o.mode);
  spec.num_stages = o.stages;
  spec.classes_per_stage = o.classes_per_stage;
  spec.feature_dim = o.dim;
  spec.train_per_class = o.train_per_class;
  spec.test_per_class = o.test_per_class;
  spec.separation = o.separation;
  spec.domain_shift = o.domain_shift;
  spec.noise_scale = o.noise;
  spec.seed = o.stream_seed;
  return spec;
}

ExperimentConfig build_config(const CliOptions& o, const CLI::App* cmd) {
  ExperimentConfig cfg;
  if (o.manifest.empty()) {
    cfg.synthetic = stream_spec_from(o);
    cfg.mode = cfg.synthetic->mode;
  } else {
    cfg.manifest = std::filesystem::path(o.manifest);
    cfg.mode = esr::read_manifest(*cfg.manifest).mode;
    if (cmd->count("--mode") > 0 && esr::parse_stream_mode(o.mode) != cfg.mode) {
      throw std::invalid_argument("--mode disagrees with the manifest's mode line");
    }
  }
  cfg.energy.anchor = o.delta;
  cfg.energy.lambda = o.lambda;
  cfg.energy.train_temperature = o.train_temperature;
  cfg.opt.learning_rate = o.lr;
  cfg.opt.momentum = o.momentum;
  cfg.opt.weight_decay = o.weight_decay;
  cfg.opt.epochs = o.epochs;
  cfg.opt.batch_size = o.batch;
  cfg.opt.cosine_schedule = !o.constant_lr;
  cfg.psi = parse_psi(o.psi);
  cfg.head_variant = o.head == "mlp" ? esr::HeadVariant::kMlp : esr::HeadVariant::kLinear;
  cfg.hidden_units = o.hidden;
  if (!o.seeds.empty()) {
    cfg.seeds = o.seeds;
  }
  cfg.disable_anchor_loss = o.disable_anchor_loss;
  cfg.disable_calibration = o.disable_calibration;
  cfg.shared_head = o.shared_head;
  cfg.threads = threads_from_env();
  cfg.validate();
  return cfg;
}

std::filesystem::path prepare_out_dir(const std::string& out) {
  const std::filesystem::path dir(out);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_report(const std::filesystem::path& path, const nlohmann::json& report) {
  esr::validate_report(report);
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("write_report: cannot open '" + path.string() + "'");
  }
  out << report.dump(2) << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<SeedOutcome> run_seeds_verbose(const ExperimentConfig& cfg) {
  std::vector<SeedOutcome> outcomes;
  outcomes.reserve(cfg.seeds.size());
  for (std::uint64_t seed : cfg.seeds) {
    try {
      outcomes.push_back(esr::execute_seed(cfg, seed));
    } catch (const esr::DivergenceError& e) {
      throw esr::DivergenceError("seed " + std::to_string(seed) + ": " + e.what(), e.stage_id(),
                                 e.epoch());
    }
  }
  return outcomes;
}

void print_summary(const std::string& label, std::span<const SeedOutcome> outcomes) {
  std::vector<double> faas;
  std::vector<double> ffs;
  for (const SeedOutcome& o : outcomes) {
    faas.push_back(o.faa_value);
    ffs.push_back(o.ff_value);
  }
  std::cout << label << ": faa " << esr::mean(faas) << " +- " << esr::population_std(faas)
            << ", ff " << esr::mean(ffs) << " +- " << esr::population_std(ffs) << " over "
            << outcomes.size() << " seed(s)\n";
}

void cmd_synth(const CliOptions& o) {
  const esr::StreamSpec spec = stream_spec_from(o);
  const std::vector<esr::StageDataset> stream = esr::generate_stream(spec);
  const std::filesystem::path dir = prepare_out_dir(o.out);

  esr::StreamManifest manifest;
  manifest.mode = spec.mode;
  for (const esr::StageDataset& ds : stream) {
    const std::string base = "stage" + std::to_string(ds.stage_id);
    esr::write_embeddings(dir / (base + "_train.esnf"), ds.train);
    esr::write_embeddings(dir / (base + "_test.esnf"), ds.test);
    manifest.stages.push_back({ds.stage_id, base + "_train.esnf", base + "_test.esnf"});
  }
  esr::write_manifest(dir / "manifest.txt", manifest);
  std::cout << "wrote " << stream.size() << " stages to " << dir.string() << "\n";
}

void cmd_run(const CliOptions& o, const CLI::App* cmd) {
  const auto start = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = build_config(o, cmd);
  const std::filesystem::path dir = prepare_out_dir(o.out);

  const std::vector<SeedOutcome> outcomes = run_seeds_verbose(cfg);
  for (const SeedOutcome& outcome : outcomes) {
    const std::string tag = "seed" + std::to_string(outcome.seed);
    esr::save_bank(dir / ("bank_" + tag + ".esrb"), outcome.bank);
    esr::write_accuracy_csv(dir / ("accuracy_" + tag + ".csv"), outcome.matrix);
  }
  write_report(dir / "report.json", esr::make_run_report(cfg, outcomes, seconds_since(start)));
  print_summary("run", outcomes);
}

void cmd_ablate(const CliOptions& o, const CLI::App* cmd) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentConfig base = build_config(o, cmd);
  base.disable_anchor_loss = false;
  base.disable_calibration = false;
  base.shared_head = false;

  std::vector<esr::VariantOutcomes> variants;
  const auto run_variant = [&](const std::string& name, auto mutate) {
    ExperimentConfig cfg = base;
    mutate(cfg);
    variants.push_back({name, run_seeds_verbose(cfg)});
    print_summary(name, variants.back().outcomes);
  };
  run_variant("full", [](ExperimentConfig&) {});
  run_variant("disable_anchor_loss", [](ExperimentConfig& c) { c.disable_anchor_loss = true; });
  run_variant("disable_calibration", [](ExperimentConfig& c) { c.disable_calibration = true; });
  run_variant("shared_head", [](ExperimentConfig& c) { c.shared_head = true; });

  const std::filesystem::path dir = prepare_out_dir(o.out);
  write_report(dir / "report.json", esr::make_ablate_report(base, variants, seconds_since(start)));
}

void cmd_sweep_delta(const CliOptions& o, const CLI::App* cmd, const std::vector<double>& deltas) {
  const auto start = std::chrono::steady_clock::now();
  const ExperimentConfig base = build_config(o, cmd);

  std::vector<esr::DeltaOutcomes> results;
  for (double delta : deltas) {
    ExperimentConfig cfg = base;
    cfg.energy.anchor = delta;
    results.push_back({delta, run_seeds_verbose(cfg)});
    print_summary("delta " + std::to_string(delta), results.back().outcomes);
  }

  const std::filesystem::path dir = prepare_out_dir(o.out);
  const nlohmann::json report = esr::make_delta_report(base, results, seconds_since(start));
  write_report(dir / "report.json", report);
  std::cout << "faa spread " << report["faa_spread"].get<double>() << " over " << deltas.size()
            << " anchor value(s)\n";
}

void cmd_predict(const std::string& bank_path, const std::string& input_path,
                 const std::string& out_path) {
  const esr::ModelBank bank = esr::load_bank(bank_path);
  const std::vector<esr::FeatureRecord> records = esr::read_embeddings(input_path);
  const std::vector<esr::PredictionResult> predictions =
      esr::predict_batch(records, bank, threads_from_env());

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("predict: cannot open '" + out_path + "'");
  }
  out << "index,true_stage,true_label,predicted_stage,predicted_class\n";
  std::size_t correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    out << i << "," << records[i].stage_id << "," << records[i].label << ","
        << predictions[i].chosen_stage << "," << predictions[i].chosen_class << "\n";
    if (predictions[i].chosen_class == records[i].label) ++correct;
  }
  std::cout << "wrote " << records.size() << " predictions to " << out_path << ", class accuracy "
            << (static_cast<double>(correct) / static_cast<double>(records.size())) << "\n";
}

int cmd_gradcheck(std::uint64_t seed, double epsilon) {
  constexpr double kTolerance = 1e-6;
  const std::vector<esr::GradCheckCase> cases = esr::run_gradcheck(seed, epsilon);
  double worst = 0.0;
  for (const esr::GradCheckCase& c : cases) {
    std::cout << c.name << ": max relative error " << c.max_relative_error << " over " << c.checks
              << " parameters\n";
    worst = std::max(worst, c.max_relative_error);
  }
  std::cout << "overall max relative error " << worst << "\n";
  return worst < kTolerance ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stage-routed classifier heads with energy anchoring over frozen features"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "config file; keys live in a [subcommand] section, command-line flags win");

  CliOptions synth_opts;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic stream as embedding files");
  add_stream_options(synth, synth_opts);
  synth->add_option("--out", synth_opts.out, "output directory");

  CliOptions run_opts;
  CLI::App* run = app.add_subcommand("run", "train over a stream and report faa/ff");
  add_experiment_options(run, run_opts);

  CliOptions ablate_opts;
  CLI::App* ablate = app.add_subcommand("ablate", "full method against its three ablations");
  add_experiment_options(ablate, ablate_opts);

  CliOptions sweep_opts;
  std::vector<double> sweep_deltas;
  CLI::App* sweep = app.add_subcommand("sweep-delta", "rerun the stream per anchor value");
  add_experiment_options(sweep, sweep_opts);
  sweep->add_option("--deltas", sweep_deltas,
                    "anchor values to sweep, repeatable (default 0 -1 -3 -5 -10 -15)");

  std::string predict_bank;
  std::string predict_input;
  std::string predict_out = "predictions.csv";
  CLI::App* predict = app.add_subcommand("predict", "classify an embedding file with a saved bank");
  predict->add_option("--bank", predict_bank, "bank file")->required();
  predict->add_option("--input", predict_input, "embedding file")->required();
  predict->add_option("--out", predict_out, "predictions csv");

  std::uint64_t gradcheck_seed = 7;
  double gradcheck_epsilon = 1e-6;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--seed", gradcheck_seed, "probe seed");
  gradcheck->add_option("--epsilon", gradcheck_epsilon, "finite-difference step");

  // --config lives on the main app; fallthrough lets it appear after the subcommand too.
  for (CLI::App* sub : {synth, run, ablate, sweep, predict, gradcheck}) sub->fallthrough();

  int rc = 0;
  synth->callback([&] { cmd_synth(synth_opts); });
  run->callback([&] { cmd_run(run_opts, run); });
  ablate->callback([&] { cmd_ablate(ablate_opts, ablate); });
  sweep->callback([&] {
    if (sweep_deltas.empty()) {
      sweep_deltas = {0.0, -1.0, -3.0, -5.0, -10.0, -15.0};
    }
    cmd_sweep_delta(sweep_opts, sweep, sweep_deltas);
  });
  predict->callback([&] { cmd_predict(predict_bank, predict_input, predict_out); });
  gradcheck->callback([&] { rc = cmd_gradcheck(gradcheck_seed, gradcheck_epsilon); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const esr::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const esr::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
