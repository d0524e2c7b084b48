#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "logo/harness.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw logo::Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw logo::Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw logo::Error("failed writing " + path.string());
}

void print_metrics(const logo::Metrics& m) {
  std::printf("UAR %.6f\nWAR %.6f\n", m.uar, m.war);
  for (std::size_t c = 0; c < m.per_class_recall.size(); ++c) {
    std::printf("class %zu recall %.6f (support %zu)\n", c, m.per_class_recall[c], m.support[c]);
  }
  for (auto c : m.zero_support_classes) {
    std::fprintf(stderr, "note: class %zu has no samples and is excluded from UAR\n", c);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LOGO-Former local-global spatio-temporal attention: training, evaluation and cost tools"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic clips; writes model.lgfm and history.csv");
  std::string train_config, train_out, resume;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda, lr;
  std::optional<std::size_t> epochs;
  train_cmd->add_option("--config", train_config, "Run config file (key = value)")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--seed", seed, "Seed for model init and batch order");
  train_cmd->add_option("--lambda", lambda, "Compact-term weight");
  train_cmd->add_option("--epochs", epochs, "Epoch count");
  train_cmd->add_option("--lr", lr, "Learning rate");
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint written by train");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a synthetic set");
  std::string eval_model;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--model", eval_model, "Checkpoint path")->required();
  eval_cmd->add_option("--data-seed", eval_seed, "Seed of the synthetic evaluation set")->required();

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  std::string grad_config;
  double threshold = 1e-3;
  grad_cmd->add_option("--config", grad_config, "Run config file; defaults to the tiny config");
  grad_cmd->add_option("--threshold", threshold, "Maximum accepted relative error");

  // cost
  auto* cost_cmd = app.add_subcommand("cost", "Closed-form attention pair costs as CSV");
  std::string grid_path, cost_config, cost_out;
  auto* grid_opt = cost_cmd->add_option("--grid", grid_path, "File of F,H,W,f,h,w rows");
  auto* row_opt = cost_cmd->add_option("--config", cost_config, "Single row F,H,W,f,h,w");
  grid_opt->excludes(row_opt);
  cost_cmd->add_option("--out", cost_out, "Write CSV here instead of standard output");

  // export-embeddings
  auto* export_cmd = app.add_subcommand("export-embeddings", "Write final CLS features per clip as CSV");
  std::string export_model, export_out;
  std::optional<std::uint64_t> export_seed;
  export_cmd->add_option("--model", export_model, "Checkpoint path")->required();
  export_cmd->add_option("--out", export_out, "CSV output path")->required();
  export_cmd->add_option("--data-seed", export_seed, "Seed of the synthetic set (default: training data)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      logo::RunConfig run = logo::RunConfig::from_file(train_config);
      if (seed) run.train.model.seed = run.train.seed = *seed;
      if (lambda) run.train.lambda = *lambda;
      if (epochs) run.train.epochs = *epochs;
      if (lr) run.train.lr = *lr;
      run.train.validate();

      logo::TrainState state = resume.empty() ? logo::TrainState::fresh(run.train.model)
                                              : logo::train_state_from(logo::read_checkpoint(resume));
      const logo::Dataset data = logo::generate(run.data);
      const logo::RunHistory history = logo::train(state, run.train, data, [](const auto& r, const auto&) {
        std::fprintf(stderr, "epoch %zu loss %.6f ce %.6f compact %.6f war %.4f\n", r.epoch, r.loss_total, r.loss_ce,
                     r.loss_compact, r.train_war);
        return true;
      });

      fs::create_directories(train_out);
      logo::write_checkpoint(fs::path(train_out) / "model.lgfm", logo::to_checkpoint(state, run));
      write_file(fs::path(train_out) / "history.csv", logo::history_csv(history));
      print_metrics(history.final_metrics);
      return 0;
    }

    if (*eval_cmd) {
      const logo::Checkpoint ck = logo::read_checkpoint(eval_model);
      logo::RunConfig run = logo::run_config_from(ck);
      run.data.prototype_seed = run.data.seed;
      run.data.seed = eval_seed;
      const logo::Model model = logo::from_checkpoint(ck);
      print_metrics(logo::evaluate_model(model, logo::generate(run.data), logo::eval_workers()));
      return 0;
    }

    if (*grad_cmd) {
      const logo::ModelConfig config =
          grad_config.empty() ? logo::tiny_config() : logo::RunConfig::from_file(grad_config).train.model;
      const logo::GradcheckReport report = logo::gradcheck(config);
      for (const auto& e : report.entries) {
        std::printf("%-28s %6zu  rel %.3e  abs %.3e\n", e.name.c_str(), e.size, e.max_rel_error, e.max_abs_error);
      }
      std::printf("max relative error %.3e (%s)\n", report.max_rel_error, report.worst.c_str());
      return report.max_rel_error < threshold ? 0 : 1;
    }

    if (*cost_cmd) {
      std::vector<logo::CostGridRow> grid;
      if (!grid_path.empty()) {
        grid = logo::parse_cost_grid(read_file(grid_path));
      } else if (!cost_config.empty()) {
        grid.push_back(logo::parse_cost_row(cost_config));
      } else {
        throw logo::ConfigError("cost needs --grid PATH or --config F,H,W,f,h,w");
      }
      const std::string csv = logo::cost_sweep(grid, logo::eval_workers());
      if (cost_out.empty()) {
        std::fputs(csv.c_str(), stdout);
      } else {
        write_file(cost_out, csv);
      }
      return 0;
    }

    if (*export_cmd) {
      const logo::Checkpoint ck = logo::read_checkpoint(export_model);
      logo::RunConfig run = logo::run_config_from(ck);
      if (export_seed) {
        run.data.prototype_seed = run.data.seed;
        run.data.seed = *export_seed;
      }
      logo::export_embeddings(logo::from_checkpoint(ck), logo::generate(run.data), export_out);
      return 0;
    }
  } catch (const logo::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
