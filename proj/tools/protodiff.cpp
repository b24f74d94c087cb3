#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "protodiff/pipeline.hpp"
#include "protodiff/toy.hpp"

namespace fs = std::filesystem;
using namespace protodiff;

namespace {

struct Common {
  std::string config;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Pipeline config (JSON)")->required();
  cmd->add_option("--out", c.out, "Output root (overrides the config's output)");
  cmd->add_flag("--force", c.force, "Rerun stages that already completed for this run id");
}

PipelineConfig load(const Common& c, const nlohmann::json& j) {
  return PipelineConfig::from_json(j, fs::path(c.config).parent_path());
}

RunOptions options(const Common& c) { return {c.out, c.force, &std::cerr}; }

void report_run(const RunResult& r) { std::cout << r.run_dir.string() << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-guided latent diffusion for synthetic pathology pretraining data"};
  app.require_subcommand(1);

  Common run_opts;
  std::string stage_list;
  auto* run = app.add_subcommand("run", "Run pipeline stages from one config");
  add_common(run, run_opts);
  run->add_option("--stages", stage_list, "Comma-separated subset of stages (default: all)");

  Common stage_opts;
  std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
  for (Stage s : {Stage::curate, Stage::train_ae, Stage::train_diffusion, Stage::train_classifier}) {
    auto* cmd = app.add_subcommand(stage_name(s), std::string("Run the ") + stage_name(s) + " stage");
    add_common(cmd, stage_opts);
    stage_cmds.emplace_back(cmd, s);
  }

  std::string mode;
  std::size_t n_per = 0, n_per_real = 0;
  double guidance_w = -1.0;
  auto* build = app.add_subcommand("build-dataset", "Sample the synthetic corpus and write its manifest");
  add_common(build, stage_opts);
  build->add_option("--mode", mode, "synthetic or hybrid")->check(CLI::IsMember({"synthetic", "hybrid"}));
  build->add_option("--n-per", n_per, "Synthetic samples per prototype");
  build->add_option("--n-per-real", n_per_real, "Real patches per prototype (hybrid)");
  build->add_option("--guidance-w", guidance_w, "Guidance scale");
  stage_cmds.emplace_back(build, Stage::build_dataset);

  std::string task_kind;
  std::size_t hidden = 0;
  std::uint64_t mil_seed = 0;
  auto* mil = app.add_subcommand("train-mil", "Train ABMIL models for every configured task");
  add_common(mil, stage_opts);
  mil->add_option("--task", task_kind, "Only tasks of this type")->check(CLI::IsMember({"subtype", "survival"}));
  mil->add_option("--hidden", hidden, "Hidden width for a single model variant")->check(CLI::IsMember({256, 512}));
  mil->add_option("--seed", mil_seed, "Stage seed");
  stage_cmds.emplace_back(mil, Stage::train_mil);

  std::vector<std::string> pred_files;
  std::string truth_file, task_name, json_out;
  auto* eval = app.add_subcommand("evaluate", "Score predictions (pipeline stage, or standalone files)");
  eval->add_option("--config", stage_opts.config, "Pipeline config (JSON)");
  eval->add_option("--out", stage_opts.out, "Output root (overrides the config's output)");
  eval->add_flag("--force", stage_opts.force, "Rerun even if already completed");
  eval->add_option("--pred", pred_files, "Prediction CSV; repeat to compare models (first is the reference)");
  eval->add_option("--truth", truth_file, "Label table for the predicted slides");
  eval->add_option("--task", task_name, "Task name for the report");
  eval->add_option("--json", json_out, "Write the MetricReports here");

  Common sample_opts;
  std::size_t prototype = 0, count = 0;
  double sample_w = 0.0;
  std::uint64_t sample_seed = 0;
  std::string sample_out;
  auto* sample = app.add_subcommand("sample", "Draw samples for one prototype from a completed run");
  add_common(sample, sample_opts);
  sample->add_option("--prototype", prototype, "Global prototype id")->required();
  sample->add_option("--count", count, "Number of samples")->required();
  sample->add_option("--w,--guidance-w", sample_w, "Guidance scale")->check(CLI::NonNegativeNumber);
  sample->add_option("--seed", sample_seed, "Sampling seed");
  sample->add_option("--output", sample_out, "PSMP file to write")->required();

  std::string toy_dir;
  std::uint64_t toy_seed = 7;
  auto* make_toy = app.add_subcommand("make-toy", "Write a small synthetic input set and its config");
  make_toy->add_option("--out", toy_dir, "Directory to create")->required();
  make_toy->add_option("--seed", toy_seed, "Data seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      std::vector<Stage> stages;
      std::stringstream ss(stage_list);
      for (std::string name; std::getline(ss, name, ',');)
        if (!name.empty()) stages.push_back(parse_stage(name));
      report_run(run_pipeline(load(run_opts, read_config_json(run_opts.config)), stages, options(run_opts)));
      return 0;
    }
    for (const auto& [cmd, stage] : stage_cmds) {
      if (!*cmd) continue;
      auto j = read_config_json(stage_opts.config);
      if (stage == Stage::build_dataset) {
        if (!mode.empty()) j["dataset"]["mode"] = mode;
        if (n_per > 0) j["dataset"]["n_per"] = n_per;
        if (n_per_real > 0) j["dataset"]["n_per_real"] = n_per_real;
        if (guidance_w >= 0.0) j["dataset"]["guidance_w"] = guidance_w;
      }
      if (stage == Stage::train_mil) {
        if (hidden > 0) j["mil"]["variants"] = {{{"name", "abmil-" + std::to_string(hidden)}, {"hidden", hidden}}};
        if (mil->count("--seed")) j["mil"]["seed"] = mil_seed;
        if (!task_kind.empty() && j.contains("tasks")) {
          const std::string type = task_kind == "subtype" ? "subtyping" : "survival";
          nlohmann::json kept = nlohmann::json::array();
          for (const auto& t : j["tasks"])
            if (t.value("type", "") == type) kept.push_back(t);
          j["tasks"] = kept;
        }
      }
      report_run(run_pipeline(load(stage_opts, j), {stage}, options(stage_opts)));
      return 0;
    }
    if (*eval) {
      if (!pred_files.empty() || !truth_file.empty()) {
        if (pred_files.empty() || truth_file.empty()) throw ConfigError("standalone evaluate needs --pred and --truth");
        std::vector<std::pair<std::string, Predictions>> models;
        for (const auto& f : pred_files) models.emplace_back(fs::path(f).stem().string(), parse_predictions(io::read_text(f)));
        const auto ev = evaluate_task(task_name.empty() ? "task" : task_name, parse_bag_table(io::read_text(truth_file)), models);
        for (const auto& w : ev.warnings) std::cerr << "warning: " << w << '\n';
        std::cout << format_report_table(ev.reports);
        if (!json_out.empty()) {
          nlohmann::ordered_json arr = nlohmann::ordered_json::array();
          for (const auto& r : ev.reports) arr.push_back(r.to_json());
          io::write_text(json_out, nlohmann::ordered_json{{"reports", arr}, {"warnings", ev.warnings}}.dump(2) + "\n");
        }
        return 0;
      }
      if (stage_opts.config.empty()) throw ConfigError("evaluate needs --config, or --pred and --truth");
      report_run(run_pipeline(load(stage_opts, read_config_json(stage_opts.config)), {Stage::evaluate}, options(stage_opts)));
      return 0;
    }
    if (*sample) {
      const auto cfg = load(sample_opts, read_config_json(sample_opts.config));
      const auto batch = sample_from_run(run_directory(cfg, options(sample_opts)), {prototype, sample_w, sample_seed, count});
      save_samples(sample_out, batch);
      std::cout << sample_out << '\n';
      return 0;
    }
    if (*make_toy) {
      toy::write_inputs(toy_dir, toy_seed);
      std::cout << (fs::path(toy_dir) / "config.json").string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 1;
}
