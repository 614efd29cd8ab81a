// SPDX-License-Identifier: Apache-2.0
/**
 * @file   uamvse_cli.cpp
 * @brief  Command-line driver: gen-data, train, eval, normalize, grid-search
 *         and grad-check.
 *
 * Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
 */
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "uamvse/config.hpp"
#include "uamvse/uamvse.hpp"

namespace fs = std::filesystem;
using namespace uamvse;

namespace {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

RunConfig resolve_config(const std::string &path, const std::vector<std::string> &overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  for (const auto &o : overrides) apply_override(cfg, o);
  return cfg;
}

void write_json(const fs::path &path, const nlohmann::json &j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

nlohmann::json read_json(const fs::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return j;
}

std::vector<double> parse_grid(const std::string &text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (used != item.size()) throw Error("grid: bad temperature '" + item + "'");
    grid.push_back(v);
  }
  if (grid.empty()) throw Error("grid: no temperatures given");
  return grid;
}

std::vector<NormOrder> parse_orders(const std::string &text) {
  if (text.empty()) return all_norm_orders();
  std::vector<NormOrder> orders;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) orders.push_back(parse_norm_order(item));
  return orders;
}

ScoreMatrix split_scores(const Checkpoint &ck, const fs::path &data, const std::string &split, Dataset &sub) {
  const Dataset ds = load_dataset(data);
  if (ds.region_dim() != ck.config.d1 || ds.token_dim() != ck.config.d2) {
    throw DataError("dataset feature dims do not match the checkpoint");
  }
  const auto &ids = ds.splits.get(split);
  if (ids.empty()) throw DataError("split '" + split + "' is empty");
  sub = ds.subset(ids);
  ScoreMatrix A = aggregate_scores(score_dataset(sub, ck.params, ck.config));
  if (!all_finite(A.values.data())) throw NumericError("non-finite similarity scores");
  return A;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Multi-view visual semantic embedding with uncertainty-weighted losses"};
  app.require_subcommand(1);
  const std::string keys = config_help();

  // gen-data
  std::string gen_config, gen_out;
  std::vector<std::string> gen_set;
  auto *gen = app.add_subcommand("gen-data", "Generate a synthetic paired-feature dataset");
  gen->add_option("--config", gen_config, "JSON run config");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--set", gen_set, "key=value config override (repeatable, wins over --config)");
  gen->footer(keys);

  // train
  std::string train_config, train_data, train_run;
  std::vector<std::string> train_set;
  auto *trn = app.add_subcommand("train", "Train a model; writes checkpoints and log.jsonl");
  trn->add_option("--config", train_config, "JSON run config");
  trn->add_option("--data", train_data, "Dataset directory or manifest (default: data_manifest)");
  trn->add_option("--run", train_run, "Run directory (default: run_dir)");
  trn->add_option("--set", train_set, "key=value config override (repeatable)");
  trn->footer(keys);

  // eval
  std::string ev_ckpt, ev_data, ev_split = "test", ev_norm, ev_out = "report.json", ev_scores;
  auto *ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split; writes report.json");
  ev->add_option("--checkpoint", ev_ckpt, "UAMP checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory or manifest")->required();
  ev->add_option("--split", ev_split, "train | val | test")->capture_default_str();
  ev->add_option("--normalize", ev_norm, "Normalization config JSON (e.g. best_norm.json)");
  ev->add_option("--out", ev_out, "Report path")->capture_default_str();
  ev->add_option("--scores-out", ev_scores, "Also write the score matrix as CSV");
  ev->footer(keys);

  // normalize
  std::string nm_in, nm_out, nm_order = "row-then-col";
  double nm_tau_row = 170.0, nm_tau_col = 20.0;
  auto *nm = app.add_subcommand("normalize", "Softmax-normalize a CSV score matrix");
  nm->add_option("--scores", nm_in, "Input CSV (rows = images, columns = captions)")->required();
  nm->add_option("--tau-row", nm_tau_row, "Row temperature")->capture_default_str();
  nm->add_option("--tau-col", nm_tau_col, "Column temperature")->capture_default_str();
  nm->add_option("--order", nm_order, "row-then-col | col-then-row | row-only | col-only | none")->capture_default_str();
  nm->add_option("--out", nm_out, "Output CSV")->required();
  nm->footer(keys);

  // grid-search
  std::string gs_ckpt, gs_data, gs_split = "val", gs_grid = "0.01,0.1,1,10,20,170,200", gs_orders,
                                gs_out = "best_norm.json";
  auto *gs = app.add_subcommand("grid-search", "Search normalization temperatures on a split");
  gs->add_option("--checkpoint", gs_ckpt, "UAMP checkpoint")->required();
  gs->add_option("--data", gs_data, "Dataset directory or manifest")->required();
  gs->add_option("--split", gs_split, "Split to search on")->capture_default_str();
  gs->add_option("--grid", gs_grid, "Comma-separated temperatures")->capture_default_str();
  gs->add_option("--orders", gs_orders, "Comma-separated orders (default: all, none first)");
  gs->add_option("--out", gs_out, "Output JSON")->capture_default_str();
  gs->footer(keys);

  // grad-check
  std::uint64_t gc_seed = 1;
  std::size_t gc_trials = 20, gc_seeds = 5;
  double gc_tol = 1e-4;
  auto *gc = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  gc->add_option("--trials", gc_trials, "Sampled parameters per case")->capture_default_str();
  gc->add_option("--seeds", gc_seeds, "Seeds per loss/pooling case")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();
  gc->footer(keys);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      const RunConfig cfg = resolve_config(gen_config, gen_set);
      const Dataset ds = generate_synthetic(cfg.synth);
      save_dataset(gen_out, ds);
      std::cout << "wrote " << ds.images.size() << " images, " << ds.captions.size() << " captions to " << gen_out
                << "\n";
    } else if (*trn) {
      RunConfig cfg = resolve_config(train_config, train_set);
      const std::string data = train_data.empty() ? cfg.data_manifest : train_data;
      const std::string run = train_run.empty() ? cfg.run_dir : train_run;
      if (data.empty() || run.empty()) throw Error("train: --data and --run (or data_manifest/run_dir) are required");
      const Dataset ds = load_dataset(data);
      cfg.model.d1 = ds.region_dim();
      cfg.model.d2 = ds.token_dim();
      fs::create_directories(run);
      write_json(fs::path(run) / "config.json", to_json(cfg));
      const auto res = train(ds, cfg.model, cfg.train, {fs::path(run), [](const EpochLog &e) {
                               std::cout << to_json(e).dump() << "\n";
                             }});
      if (!res.log.empty()) {
        std::cout << "best epoch " << res.best_epoch << ", val rsum " << res.log[res.best_epoch].val_rsum << "\n";
      } else {
        save_checkpoint(fs::path(run) / "best.uamp", cfg.model, res.params);
      }
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      Dataset sub;
      ScoreMatrix A = split_scores(ck, ev_data, ev_split, sub);
      if (!ev_norm.empty()) A = normalize_matrix(A, normalization_from_json(read_json(ev_norm)));
      if (!ev_scores.empty()) save_csv(ev_scores, A.values);
      const auto rep = report(A.values, sub.caption_to_image);
      write_json(ev_out, to_json(rep));
      std::cout << to_json(rep).dump() << "\n";
    } else if (*nm) {
      const NormalizationConfig cfg{nm_tau_col, nm_tau_row, parse_norm_order(nm_order)};
      const Mat in = load_csv(nm_in);
      const ScoreMatrix out = normalize_matrix({in, false}, cfg);
      save_csv(nm_out, out.values);
    } else if (*gs) {
      const Checkpoint ck = load_checkpoint(gs_ckpt);
      Dataset sub;
      const ScoreMatrix A = split_scores(ck, gs_data, gs_split, sub);
      const auto best = grid_search_temperatures(A, sub.caption_to_image, parse_grid(gs_grid), parse_orders(gs_orders));
      nlohmann::json j = to_json(best.config);
      j["rsum"] = best.rsum;
      write_json(gs_out, j);
      std::cout << j.dump() << "\n";
    } else if (*gc) {
      const auto rep = gradient_check_suite(gc_seed, gc_trials, gc_seeds);
      for (const auto &c : rep.cases) {
        std::printf("%-10s %-8s seed %-8llu checked %zu  max rel err %.3e\n", std::string(to_string(c.loss)).c_str(),
                    std::string(to_string(c.pooling)).c_str(), static_cast<unsigned long long>(c.seed), c.checked,
                    c.max_rel_error);
      }
      std::printf("max relative error %.3e (tolerance %.1e): %s\n", rep.max_rel_error, gc_tol,
                  rep.passed(gc_tol) ? "PASS" : "FAIL");
      return rep.passed(gc_tol) ? kOk : kNumeric;
    }
  } catch (const DataError &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
