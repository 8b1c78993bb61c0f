// Command-line front end: gen-corpus, pretrain, edit, eval, report, ablate.
// Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ftedit/runner.hpp"

namespace {

using ftedit::ExperimentConfig;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "Experiment config (key = value lines)")->check(CLI::ExistingFile);
  app->add_option("-s,--set", c.overrides, "Override a config key, e.g. --set editor.epochs=5")->take_all();
  app->add_option("-o,--out", c.out_dir, "Output directory (overrides run.out_dir)");
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(ExperimentConfig::trim(kv.substr(0, eq)), ExperimentConfig::trim(kv.substr(eq + 1)));
  }
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

void print_report(const ftedit::EvalReport& r, const std::string& where) {
  std::printf("%s: score %.1f  efficacy %.1f  generalization %.1f  locality %.1f  fluency %.2f  consistency %.1f\n",
              r.variant.c_str(), r.edit_score, r.efficacy.mean, r.generalization.mean, r.locality.mean,
              r.fluency.mean, r.consistency.mean);
  std::printf("report written to %s\n", where.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge editing by fine-tuning on a synthetic fact world"};
  app.require_subcommand(1);

  Common gen_c, pre_c, edit_c, eval_c, ablate_c, show_c;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the fact world, edit set and vocabulary");
  add_common(gen, gen_c);
  auto* pre = app.add_subcommand("pretrain", "Train the base model until it knows the training facts");
  add_common(pre, pre_c);
  auto* edit = app.add_subcommand("edit", "Apply the configured editor variant and evaluate it");
  add_common(edit, edit_c);
  std::string variant;
  edit->add_option("-v,--variant", variant, "Variant label, e.g. FT+Mask+Para+Rand");
  auto* eval = app.add_subcommand("eval", "Evaluate an edited checkpoint (or the base model)");
  add_common(eval, eval_c);
  bool eval_base = false;
  eval->add_flag("--base", eval_base, "Evaluate the unedited base model");
  std::string eval_variant;
  eval->add_option("-v,--variant", eval_variant, "Variant label of the run to evaluate");
  auto* report = app.add_subcommand("report", "Render a ladder table across run directories");
  std::vector<std::string> run_dirs;
  std::string report_csv;
  report->add_option("runs", run_dirs, "Run directories containing report.csv")->required()->check(CLI::ExistingDirectory);
  report->add_option("--csv", report_csv, "Also write the ladder as CSV");
  auto* ablate = app.add_subcommand("ablate", "Run every variant in ablate.variants and write the ladder");
  add_common(ablate, ablate_c);
  auto* show = app.add_subcommand("show-config", "Print the effective configuration");
  add_common(show, show_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  ExperimentConfig cfg;
  try {
    if (*gen) cfg = load_config(gen_c);
    if (*pre) cfg = load_config(pre_c);
    if (*edit) {
      cfg = load_config(edit_c);
      if (!variant.empty()) cfg.set("editor.variant", variant);
    }
    if (*eval) {
      cfg = load_config(eval_c);
      if (!eval_variant.empty()) cfg.set("editor.variant", eval_variant);
    }
    if (*ablate) cfg = load_config(ablate_c);
    if (*show) cfg = load_config(show_c);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    namespace fs = std::filesystem;
    if (*show) {
      cfg.write(std::cout);
    } else if (*gen) {
      ftedit::step_gen_corpus(cfg);
      std::printf("corpus written to %s\n", ftedit::RunPaths{cfg.out_dir}.corpus_dir().c_str());
    } else if (*pre) {
      const auto out = ftedit::step_pretrain(cfg);
      std::printf("pretrained %d epochs, training-fact accuracy %.1f%%\n", out.epochs, 100.0 * out.accuracy);
      if (!out.reached_target) {
        std::fprintf(stderr, "error: base model stayed below pretrain.target_accuracy (%.3f)\n",
                     cfg.pretrain.target_accuracy);
        return 2;
      }
    } else if (*edit) {
      const auto res = ftedit::step_edit(cfg);
      print_report(res.report, (res.dir / "report.csv").string());
      if (res.diverged) {
        std::fprintf(stderr, "error: training diverged: %s\n", res.diagnostic.c_str());
        return 2;
      }
    } else if (*eval) {
      const auto r = ftedit::step_eval(cfg, eval_base);
      const ftedit::RunPaths paths{cfg.out_dir};
      print_report(r, ((eval_base ? paths.base_dir() : paths.run_dir(cfg.editor.run_name())) / "report.csv").string());
    } else if (*report) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto rows = ftedit::read_ladder(dirs);
      ftedit::write_ladder_text(std::cout, rows);
      if (!report_csv.empty()) {
        std::ofstream out(report_csv, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + report_csv);
        ftedit::write_ladder_csv(out, rows);
      }
    } else if (*ablate) {
      const auto rows = ftedit::step_ablate(cfg);
      ftedit::write_ladder_text(std::cout, rows);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
