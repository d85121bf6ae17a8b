// fseb: command-line front end for the experiment runner.
//
//   fseb run <config> [--out DIR] [--workers N]
//   fseb ablate <config> --axis NAME --values V1,V2,... [--out DIR] [--workers N]
//   fseb grid <checkpoint> --spec <config> [--out PATH]
//   fseb compare <results.json>... [--csv PATH] [--markdown PATH]
//
// Exit status: 0 ok, 2 config or input error, 3 numerical abort.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "fseb/experiment.hpp"

namespace ex = fseb::experiment;

namespace {

void print_summary(const ex::RunResult& r) {
  std::cout << r.config.name << " -> " << r.results_path.string() << "\n";
  for (const auto& a : r.aggregates) {
    char line[160];
    if (a.se) {
      std::snprintf(line, sizeof line, "  %-20s %.4f ± %.4f (n=%zu)\n", a.metric.c_str(), a.mean, *a.se, a.n);
    } else {
      std::snprintf(line, sizeof line, "  %-20s %.4f (n=%zu)\n", a.metric.c_str(), a.mean, a.n);
    }
    std::cout << line;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-space empirical Bayes experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ex::version_string()));

  std::string config_path, out_dir, axis, checkpoint, spec_path, out_path, csv_path, md_path;
  std::vector<std::string> values, results;
  std::size_t workers = 0;

  auto* run = app.add_subcommand("run", "train and evaluate every seed of a config");
  run->add_option("config", config_path, "experiment config (or a results.json to re-run)")->required();
  run->add_option("--out", out_dir, "override output_dir");
  run->add_option("--workers", workers, "concurrent seeds (default: FSEB_WORKERS or 1)");

  auto* abl = app.add_subcommand("ablate", "run one config per value along an axis");
  abl->add_option("config", config_path)->required();
  abl->add_option("--axis", axis, "context-batch-size | context-distribution | data-fraction | corruption-level")
      ->required();
  abl->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  abl->add_option("--out", out_dir, "override output_dir");
  abl->add_option("--workers", workers);

  auto* grid = app.add_subcommand("grid", "write grid predictions for a checkpoint");
  grid->add_option("checkpoint", checkpoint)->required();
  grid->add_option("--spec", spec_path, "config supplying the model and eval.grid")->required();
  grid->add_option("--out", out_path, "output CSV")->default_val("grid.csv");

  auto* cmp = app.add_subcommand("compare", "tabulate results files");
  cmp->add_option("results", results)->required();
  cmp->add_option("--csv", csv_path, "write the CSV summary here");
  cmp->add_option("--markdown", md_path, "write the markdown table here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::size_t n_workers = workers ? workers : ex::worker_count();
    if (*run) {
      auto cfg = ex::load_config(config_path);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      print_summary(ex::run(cfg, n_workers));
    } else if (*abl) {
      auto cfg = ex::load_config(config_path);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      const auto res = ex::ablate(cfg, ex::parse_axis(axis), values, n_workers);
      for (const auto& cell : res.cells) print_summary(cell);
      std::cout << "table -> " << res.table_path.string() << "\n";
    } else if (*grid) {
      const auto cfg = ex::load_config(spec_path);
      if (!cfg.eval.grid) throw fseb::ConfigError("config field 'eval.grid' is required for the grid verb");
      const auto model = fseb::load_checkpoint(checkpoint, cfg.model);
      ex::emit_grid_predictions(model, *cfg.eval.grid, out_path);
      std::cout << "grid -> " << out_path << "\n";
    } else if (*cmp) {
      std::vector<std::filesystem::path> paths(results.begin(), results.end());
      const auto c = ex::compare(paths);
      if (!csv_path.empty()) std::ofstream(csv_path) << c.csv;
      if (!md_path.empty()) {
        std::ofstream(md_path) << c.markdown;
      } else {
        std::cout << c.markdown;
      }
    }
  } catch (const fseb::TrainingAborted& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const fseb::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const fseb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fseb::DataError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const fseb::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
