#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cocokit/gradcheck.hpp"
#include "cocokit/stats.hpp"
#include "cocokit/trainer.hpp"

namespace fs = std::filesystem;
using namespace cocokit;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kIoOrConfig = 2, kDiverged = 3 };

struct ConfigFlags {
  std::string preset = "desk";
  std::string config_file;
  std::string mode;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd, bool with_mode) {
    cmd->add_option("--preset", preset, "Base settings: desk (32x32, short phases) or full (128x128, 1000 epochs)")
        ->check(CLI::IsMember({"desk", "full"}));
    cmd->add_option("--config", config_file, "key=value run manifest applied over the preset")->check(CLI::ExistingFile);
    if (with_mode)
      cmd->add_option("--mode", mode, "softmax_baseline | cascade_crc | cascade_procrc | coconet");
    cmd->add_option_function<std::uint64_t>("--seed", [this](std::uint64_t s) {
      seed = s;
      seed_given = true;
    }, "Random seed");
    cmd->add_option("--set", overrides, "Extra key=value settings, applied last")->allow_extra_args(false);
  }

  TrainConfig resolve() const {
    TrainConfig cfg = preset == "full" ? TrainConfig() : TrainConfig::desk();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw IoError("cannot open config " + config_file);
      cfg.merge(in, config_file);
    }
    if (!mode.empty()) cfg.mode = parse_mode(mode);
    if (seed_given) cfg.seed = seed;
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

void echo_config(const TrainConfig& cfg) {
  std::istringstream lines(cfg.serialize());
  std::string line;
  std::cout << "config:\n";
  while (std::getline(lines, line)) std::cout << "  " << line << '\n';
}

std::string pm(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << r.mean << " +/- " << r.std;
  return out.str();
}

void print_report_table(const std::vector<std::pair<TrainMode, EvalReport>>& rows) {
  std::size_t folds = 0;
  for (const auto& [m, r] : rows) folds = std::max(folds, r.folds.size());
  std::cout << std::left << std::setw(18) << "method";
  for (std::size_t f = 0; f < folds; ++f) std::cout << std::right << std::setw(8) << ("fold" + std::to_string(f + 1));
  std::cout << "   test accuracy (%)\n";
  for (const auto& [mode, r] : rows) {
    std::cout << std::left << std::setw(18) << to_string(mode);
    for (double a : r.folds) std::cout << std::right << std::setw(8) << std::fixed << std::setprecision(1) << a;
    std::cout << "   " << pm(r) << '\n';
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<TrainMode> parse_modes(const std::string& list) {
  std::vector<TrainMode> modes;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) modes.push_back(parse_mode(item));
  if (modes.empty()) throw InvalidArgument("no modes given");
  return modes;
}

int run_crossval(const TrainConfig& cfg, const std::string& data_path, int k, const std::vector<TrainMode>& modes,
                 const std::string& out_path, const std::string& log_dir, bool ordered) {
  echo_config(cfg);
  const auto data = load_dataset(data_path);
  std::cout << "data: " << data.size() << " images, " << data.num_classes() << " classes, k=" << k << '\n';
  if (!log_dir.empty()) fs::create_directories(log_dir);
  const auto reports = crossval(cfg, data, k, modes, log_dir, [](int fold, TrainMode mode, double acc) {
    std::cout << "  fold " << fold << "  " << std::left << std::setw(18) << to_string(mode) << std::fixed
              << std::setprecision(2) << acc << "\n"
              << std::flush;
  });
  std::vector<std::pair<TrainMode, EvalReport>> rows(reports.begin(), reports.end());
  if (ordered)
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second.mean > b.second.mean; });
  print_report_table(rows);
  if (!out_path.empty()) {
    nlohmann::json j;
    if (rows.size() == 1) {
      j = to_json(rows.front().second);
      j["mode"] = to_string(rows.front().first);
    } else {
      j["modes"] = nlohmann::json::object();
      for (const auto& [mode, r] : rows) j["modes"][to_string(mode)] = to_json(r);
      j["order"] = nlohmann::json::array();
      for (const auto& [mode, r] : rows) j["order"].push_back(to_string(mode));
    }
    write_json(out_path, j);
    std::cout << "report: " << out_path << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative representation classifiers and collaborative fine-tuning of a small CNN"};
  app.require_subcommand(1);

  // gen-data
  SynthConfig synth;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic fine-grained dataset (manifest + raw images)");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  gen->add_option("--per-class", synth.per_class, "Images per class (largest class with --long-tail)")->capture_default_str();
  gen->add_option("--size", synth.image_size, "Image side length")->capture_default_str();
  gen->add_option("--channels", synth.channels, "Colour channels")->capture_default_str();
  gen->add_option("--contrast", synth.glyph_contrast, "Glyph contrast")->capture_default_str();
  gen->add_option("--jitter", synth.jitter, "Max glyph offset in pixels")->capture_default_str();
  gen->add_option("--textures", synth.background_textures, "Shared background textures")->capture_default_str();
  gen->add_option("--noise", synth.noise, "Pixel noise standard deviation")->capture_default_str();
  gen->add_flag("--long-tail", synth.long_tail, "Geometric decay of class sizes");
  gen->add_option("--tail-decay", synth.tail_decay, "Per-class decay factor with --long-tail")->capture_default_str();
  gen->add_option("--seed", synth.seed, "Random seed")->capture_default_str();

  // train
  ConfigFlags train_flags;
  std::string train_data, train_out, train_log;
  auto* train_cmd = app.add_subcommand("train", "Train one mode and write a checkpoint and loss log");
  train_flags.attach(train_cmd, true);
  train_cmd->add_option("--data", train_data, "Dataset manifest")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--log", train_log, "Loss CSV (default: <out>.loss.csv)");

  // eval
  std::string eval_model, eval_data, eval_json;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset");
  eval_cmd->add_option("--model", eval_model, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset manifest")->required();
  eval_cmd->add_option("--json", eval_json, "Write the report as JSON");

  // crossval
  ConfigFlags cv_flags;
  std::string cv_data, cv_out, cv_logs;
  int cv_k = 5;
  auto* cv_cmd = app.add_subcommand("crossval", "Stratified k-fold cross-validation of one mode");
  cv_flags.attach(cv_cmd, true);
  cv_cmd->add_option("--data", cv_data, "Dataset manifest")->required();
  cv_cmd->add_option("--k", cv_k, "Number of folds")->capture_default_str();
  cv_cmd->add_option("--out", cv_out, "Report JSON");
  cv_cmd->add_option("--log-dir", cv_logs, "Directory for per-fold loss CSVs");

  // compare
  ConfigFlags cmp_flags;
  std::string cmp_data, cmp_out, cmp_logs;
  std::string cmp_modes = "softmax_baseline,cascade_crc,cascade_procrc,coconet";
  int cmp_k = 5;
  auto* cmp_cmd = app.add_subcommand("compare", "Cross-validate several modes and rank them");
  cmp_flags.attach(cmp_cmd, false);
  cmp_cmd->add_option("--data", cmp_data, "Dataset manifest")->required();
  cmp_cmd->add_option("--modes", cmp_modes, "Comma-separated modes")->capture_default_str();
  cmp_cmd->add_option("--k", cmp_k, "Number of folds")->capture_default_str();
  cmp_cmd->add_option("--out", cmp_out, "Report JSON");
  cmp_cmd->add_option("--log-dir", cmp_logs, "Directory for per-fold loss CSVs");

  // gradcheck
  CollabCheckOptions gc;
  gc.trials = 20;
  std::string gc_sizes = "8,10,6";
  bool gc_corrupt = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every analytic gradient");
  gc_cmd->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  gc_cmd->add_option("--sizes", gc_sizes, "d,m,n of the collaborative instances")->capture_default_str();
  gc_cmd->add_option("--trials", gc.trials, "Random instances per gradient")->capture_default_str();
  gc_cmd->add_flag("--corrupt", gc_corrupt, "Deliberately perturb the analytic gradients (negative control)");

  // sigtest
  long wins = 0, trials = 0;
  double alpha = 0.05;
  int comparisons = 9;
  auto* sig_cmd = app.add_subcommand("sigtest", "One-tailed sign test with a Bonferroni threshold");
  sig_cmd->add_option("--wins", wins, "Experiments won")->required();
  sig_cmd->add_option("--trials", trials, "Experiments run")->required();
  sig_cmd->add_option("--alpha", alpha, "Family-wise significance level")->capture_default_str();
  sig_cmd->add_option("--comparisons", comparisons, "Number of simultaneous comparisons")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kIoOrConfig;
  }

  try {
    if (*gen) {
      std::cout << "gen-data: classes=" << synth.classes << " per_class=" << synth.per_class << " size=" << synth.image_size
                << " channels=" << synth.channels << " contrast=" << synth.glyph_contrast << " jitter=" << synth.jitter
                << " textures=" << synth.background_textures << " noise=" << synth.noise
                << " long_tail=" << (synth.long_tail ? "true" : "false") << " tail_decay=" << synth.tail_decay
                << " seed=" << synth.seed << '\n';
      const auto set = synth_finegrained(synth);
      const auto manifest = save_dataset(set, gen_out);
      std::cout << "class  images\n";
      const auto sizes = set.class_sizes();
      for (std::size_t c = 0; c < sizes.size(); ++c) std::cout << std::setw(5) << c << "  " << std::setw(6) << sizes[c] << '\n';
      std::cout << "manifest: " << manifest.string() << '\n';
      return kOk;
    }

    if (*train_cmd) {
      const TrainConfig cfg = train_flags.resolve();
      echo_config(cfg);
      const auto data = load_dataset(train_data);
      std::cout << "data: " << data.size() << " images, " << data.num_classes() << " classes\n";
      const fs::path log = train_log.empty() ? fs::path(train_out + ".loss.csv") : fs::path(train_log);
      fs::remove(log);
      const auto model = train(cfg, data, log);
      save_model(model, train_out);
      std::cout << "train accuracy: " << std::fixed << std::setprecision(2) << evaluate(model, data) << "%\n";
      std::cout << "lambda: " << model.lambda << '\n';
      std::cout << "checkpoint: " << train_out << "\nloss log: " << log.string() << '\n';
      return kOk;
    }

    if (*eval_cmd) {
      const auto model = load_model(eval_model);
      std::cout << "model: " << eval_model << " (" << to_string(model.mode) << ")\n";
      const auto data = load_dataset(eval_data);
      const double acc = evaluate(model, data);
      std::cout << "accuracy: " << std::fixed << std::setprecision(2) << acc << "% on " << data.size() << " images\n";
      if (!eval_json.empty()) {
        auto j = to_json(aggregate({acc}, fingerprint(model.config)));
        j["mode"] = to_string(model.mode);
        write_json(eval_json, j);
      }
      return kOk;
    }

    if (*cv_cmd) {
      const TrainConfig cfg = cv_flags.resolve();
      const std::vector<TrainMode> modes{cfg.mode};
      return run_crossval(cfg, cv_data, cv_k, modes, cv_out, cv_logs, false);
    }

    if (*cmp_cmd) {
      const TrainConfig cfg = cmp_flags.resolve();
      return run_crossval(cfg, cmp_data, cmp_k, parse_modes(cmp_modes), cmp_out, cmp_logs, true);
    }

    if (*gc_cmd) {
      int d = 0, m = 0, n = 0;
      char tail = 0;
      if (std::sscanf(gc_sizes.c_str(), "%d,%d,%d%c", &d, &m, &n, &tail) != 3)
        throw InvalidArgument("--sizes expects d,m,n");
      gc.d = d;
      gc.m = m;
      gc.n = n;
      gc.corrupt = gc_corrupt;
      std::cout << "gradcheck: seed=" << gc.seed << " sizes=" << d << ',' << m << ',' << n << " trials=" << gc.trials
                << " corrupt=" << (gc_corrupt ? "true" : "false") << '\n';
      constexpr double kTolerance = 1e-5;
      std::vector<GradientReport> reports;
      for (auto weighting : {ResidualWeighting::kMixed, ResidualWeighting::kPerColumn}) {
        gc.weighting = weighting;
        const std::string suffix = weighting == ResidualWeighting::kMixed ? "" : " (per_column)";
        for (auto r : check_collab_gradients(gc)) {
          r.name += suffix;
          reports.push_back(r);
        }
      }
      FeatnetCheckOptions fc;
      fc.seed = gc.seed;
      fc.corrupt = gc_corrupt;
      reports.push_back(check_featnet_gradients(fc));
      std::vector<std::string> failed;
      for (const auto& r : reports) {
        const bool ok = r.max_rel_error <= kTolerance;
        std::cout << (ok ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.name << " max rel error "
                  << std::scientific << std::setprecision(2) << r.max_rel_error << '\n';
        if (!ok) failed.push_back(r.name);
      }
      if (failed.empty()) return kOk;
      std::cout << "failed:";
      for (const auto& f : failed) std::cout << ' ' << f;
      std::cout << '\n';
      return kCheckFailed;
    }

    if (*sig_cmd) {
      const double p = binomial_sign_test(wins, trials);
      const double adjusted = bonferroni(alpha, comparisons);
      std::cout << "wins " << wins << " of " << trials << '\n'
                << "one-tail p = " << std::setprecision(4) << p << '\n'
                << "adjusted alpha = " << alpha << " / " << comparisons << " = " << std::setprecision(4) << adjusted << '\n'
                << (p < adjusted ? "significant" : "not significant") << '\n';
      return kOk;
    }
  } catch (const Divergence& e) {
    std::cerr << "error: diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoOrConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoOrConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoOrConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoOrConfig;
  }
  return kOk;
}
