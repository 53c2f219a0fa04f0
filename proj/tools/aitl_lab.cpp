// Command-line front end: each verb runs one pipeline stage against the
// cached artifacts in output.dir. Exit codes: 0 success, 2 config error,
// 3 stage failure.

#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "aitl/catalog.hpp"
#include "aitl/config.hpp"
#include "aitl/pipeline.hpp"

using namespace aitl;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "flat key=value config file or manifest.json");
  cmd->add_option("--set", args.overrides, "override a config key, e.g. --set attack.eps=8")->take_all();
  cmd->add_option("--seed", args.seed, "master seed (required)")->each([&](const std::string&) {
    args.seed_given = true;
  });
  cmd->add_option("--out", args.out_dir, "output directory (overrides output.dir)");
}

ExperimentConfig resolve(const CommonArgs& args) {
  ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = load_config_file(args.config_path);
  std::map<std::string, std::string> kv;
  for (const auto& ov : args.overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + ov);
    kv[ov.substr(0, eq)] = ov.substr(eq + 1);
  }
  apply_kv(cfg, kv);
  if (args.seed_given) {
    cfg.seed = args.seed;
    cfg.seed_set = true;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

PipelineState prepared(const CommonArgs& args) {
  PipelineState st;
  prepare(st, resolve(args));
  return st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale laboratory for transfer-based black-box attacks with learned transform combos"};
  app.require_subcommand(1);

  CommonArgs a_zoo, a_tuples, a_aitl, a_attack, a_eval, a_report, a_sweep, a_ablate, a_pipe;
  std::string ablate_axis = "N";
  std::string catalog_out;
  std::vector<std::string> attack_ids;

  auto* c_zoo = app.add_subcommand("train-zoo", "train (or load) the source/target/eval classifiers");
  add_common(c_zoo, a_zoo);
  auto* c_tuples = app.add_subcommand("gen-tuples", "generate (image, combo, q_asr) supervision tuples");
  add_common(c_tuples, a_tuples);
  auto* c_aitl = app.add_subcommand("train-aitl", "train the adaptive transformation learner");
  add_common(c_aitl, a_aitl);
  auto* c_attack = app.add_subcommand("attack", "craft adversarial batches for the configured attacks");
  add_common(c_attack, a_attack);
  c_attack->add_option("--attack", attack_ids, "restrict to specific attack ids")->take_all();
  auto* c_eval = app.add_subcommand("evaluate", "evaluate cached adversarial batches on the held-out models");
  add_common(c_eval, a_eval);
  auto* c_report = app.add_subcommand("report", "emit frequency histogram, charts and the run manifest");
  add_common(c_report, a_report);
  auto* c_sweep = app.add_subcommand("sweep", "attack success rate across perturbation budgets");
  add_common(c_sweep, a_sweep);
  auto* c_ablate = app.add_subcommand("ablate", "rerun the learned attack varying N or M");
  add_common(c_ablate, a_ablate);
  c_ablate->add_option("--axis", ablate_axis, "ablation axis: N or M");
  auto* c_pipe = app.add_subcommand("pipeline", "run every stage end to end");
  add_common(c_pipe, a_pipe);
  auto* c_catalog = app.add_subcommand("catalog", "print the transform catalog JSON");
  c_catalog->add_option("--out", catalog_out, "write to a file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_catalog->parsed()) {
      std::string js = transform_catalog_json().dump(2) + "\n";
      if (catalog_out.empty())
        std::fputs(js.c_str(), stdout);
      else
        atomic_write_file(catalog_out, js);
      return 0;
    }
    if (c_zoo->parsed()) {
      PipelineState st = prepared(a_zoo);
      stage_zoo(st);
      std::printf("zoo ready: %zu models under %s/models\n", st.models.size(), st.dir().c_str());
      return 0;
    }
    if (c_tuples->parsed()) {
      PipelineState st = prepared(a_tuples);
      stage_zoo(st);
      auto tuples = stage_tuples(st);
      std::printf("tuple store: %zu tuples in %s\n", tuples.size(), tuples_path(st).c_str());
      return 0;
    }
    if (c_aitl->parsed()) {
      PipelineState st = prepared(a_aitl);
      stage_zoo(st);
      auto tuples = file_exists(aitl_path(st)) ? std::vector<TrainingTuple>{} : stage_tuples(st);
      stage_aitl(st, tuples);
      std::printf("aitl checkpoint: %s\n", aitl_path(st).c_str());
      return 0;
    }
    if (c_attack->parsed()) {
      PipelineState st = prepared(a_attack);
      stage_zoo(st);
      if (!attack_ids.empty()) st.cfg.attacks = attack_ids;
      bool need_aitl = false;
      for (const auto& id : st.cfg.attacks) need_aitl |= id == "aitl" || id == "ens-aitl";
      if (need_aitl) {
        auto tuples = file_exists(aitl_path(st)) ? std::vector<TrainingTuple>{} : stage_tuples(st);
        stage_aitl(st, tuples);
      }
      stage_attacks(st);
      std::printf("adversarial batches under %s/adv\n", st.dir().c_str());
      return 0;
    }
    if (c_eval->parsed()) {
      PipelineState st = prepared(a_eval);
      stage_zoo(st);
      stage_evaluate(st);
      std::printf("asr table: %s/results/asr.csv\n", st.dir().c_str());
      return 0;
    }
    if (c_report->parsed()) {
      PipelineState st = prepared(a_report);
      stage_report(st);
      std::printf("reports under %s/results\n", st.dir().c_str());
      return 0;
    }
    if (c_sweep->parsed()) {
      PipelineState st = prepared(a_sweep);
      stage_zoo(st);
      bool need_aitl = false;
      for (const auto& id : st.cfg.sweep_attacks) need_aitl |= id == "aitl" || id == "ens-aitl";
      if (need_aitl) {
        auto tuples = file_exists(aitl_path(st)) ? std::vector<TrainingTuple>{} : stage_tuples(st);
        stage_aitl(st, tuples);
      }
      stage_sweep(st);
      std::printf("budget sweep: %s/results/budget_sweep.csv\n", st.dir().c_str());
      return 0;
    }
    if (c_ablate->parsed()) {
      PipelineState st = prepared(a_ablate);
      stage_zoo(st);
      auto tuples = file_exists(aitl_path(st)) ? std::vector<TrainingTuple>{} : stage_tuples(st);
      stage_aitl(st, tuples);
      stage_ablate(st, ablate_axis);
      std::printf("ablation table: %s/results/ablation_%s.csv\n", st.dir().c_str(), ablate_axis.c_str());
      return 0;
    }
    if (c_pipe->parsed()) {
      run_pipeline(resolve(a_pipe));
      std::printf("pipeline complete\n");
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stage failure: %s\n", e.what());
    return 3;
  }
  return 0;
}
