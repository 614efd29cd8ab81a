// SPDX-License-Identifier: Apache-2.0
/**
 * @file   acceptance.cpp
 * @brief  Acceptance suite: one PASS/FAIL line per criterion, measured values
 *         printed alongside. Exit status is non-zero when any criterion fails.
 */
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "oracles.hpp"
#include "uamvse/uamvse.hpp"

using namespace uamvse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char *f, auto... args) {
  char buf[4096];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::size_t> identity_mapping(std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), 0);
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = gradient_check_suite(1, 20, 5, 1e-5);
  const double secs = seconds_since(t0);
  std::size_t checked = 0;
  for (const auto &c : rep.cases) checked += c.checked;
  const bool ok = rep.max_rel_error < 1e-4 && secs < 60.0;
  return {ok, fmt("%zu cases, %zu entries, max rel err %.3e (< 1e-4), %.2f s (< 60 s)", rep.cases.size(), checked,
                  rep.max_rel_error, secs)};
}

Outcome weight_algebra() {
  Rng rng(2);
  // (a) equal spreads: weights are exactly K up to 1e-12
  double worst_a = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t K = 1 + rng.below(8), B = 2 + rng.below(8);
    SimilarityTensor S(K, B, B);
    Vec base(B * B);
    for (double &x : base) x = rng.uniform(-1.0, 1.0);
    for (std::size_t k = 0; k < K; ++k) std::copy(base.begin(), base.end(), S.data().begin() + k * B * B);
    const auto W = uncertainty_weights(S);
    for (double w : W.img_to_txt.data()) worst_a = std::max(worst_a, std::abs(w - static_cast<double>(K)));
    for (double w : W.txt_to_img.data()) worst_a = std::max(worst_a, std::abs(w - static_cast<double>(K)));
  }
  // (b) strictly larger spread, strictly smaller weight
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    Vec spread(2 + rng.below(7));
    for (double &s : spread) s = rng.uniform(0.0, 1.0);
    const Vec w = view_weights(spread);
    for (std::size_t a = 0; a < spread.size(); ++a)
      for (std::size_t b = 0; b < spread.size(); ++b)
        if (spread[a] > spread[b] && !(w[a] < w[b])) ++violations;
  }
  // (c) one view: all weights 1
  double worst_c = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t B = 2 + rng.below(10);
    SimilarityTensor S(1, B, B);
    for (double &x : S.data()) x = rng.uniform(-1.0, 1.0);
    const auto W = uncertainty_weights(S);
    for (double w : W.img_to_txt.data()) worst_c = std::max(worst_c, std::abs(w - 1.0));
    for (double w : W.txt_to_img.data()) worst_c = std::max(worst_c, std::abs(w - 1.0));
  }
  const bool ok = worst_a <= 1e-12 && violations == 0 && worst_c == 0.0;
  return {ok, fmt("(a) max |w-K| %.1e, (b) %zu monotonicity violations / 1000 tuples, (c) max |w-1| %.1e", worst_a,
                  violations, worst_c)};
}

Outcome vsepp_reduction() {
  Rng rng(3);
  std::size_t mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    SimilarityTensor S(1, 4, 4);
    for (double &x : S.data()) x = rng.uniform(-1.0, 1.0);
    const double got = weighted_triplet_loss(S, uncertainty_weights(S), {0.2, false}).loss;
    const double want = uamvse::testing::vsepp_oracle(S.slice(0), 0.2);
    if (std::memcmp(&got, &want, sizeof(double)) != 0) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu / 100 random 4x4 matrices differ bitwise from the oracle", mismatches)};
}

Outcome lse_bound() {
  Rng rng(4);
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 2 + rng.below(30);
    Vec row(m);
    for (double &x : row) x = rng.uniform(-1.0, 1.0);
    const std::size_t pos = rng.below(m);
    Vec negs;
    for (std::size_t j = 0; j < m; ++j)
      if (j != pos) negs.push_back(row[j]);
    const double mx = *std::max_element(negs.begin(), negs.end());
    const double lse = logsumexp(negs);
    const double slack = std::log(static_cast<double>(m - 1));
    if (!(mx <= lse && lse <= mx + slack + 1e-12)) ++violations;
    const auto h = lse_hinge_equivalence_check(row, pos, 0.2);
    if (!(h.triplet <= h.lse_form && h.lse_form <= h.triplet + slack + 1e-12)) ++violations;
  }
  std::size_t single_mismatch = 0;
  for (int t = 0; t < 100; ++t) {
    const Vec row{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const auto h = lse_hinge_equivalence_check(row, t % 2, 0.2);
    if (h.triplet != h.lse_form) ++single_mismatch;
  }
  return {violations == 0 && single_mismatch == 0,
          fmt("%zu bound violations over 1000 rows, %zu single-negative mismatches", violations, single_mismatch)};
}

Outcome normalization_contracts() {
  Rng rng(5);
  double worst_sum = 0.0;
  std::size_t order_violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t r = 2 + rng.below(10), c = 2 + rng.below(10);
    Mat a(r, c);
    for (double &x : a.data()) x = rng.uniform(-1.0, 1.0);
    const double tau = std::exp(rng.uniform(std::log(0.05), std::log(200.0)));
    const Mat col = normalize_matrix({a, false}, {tau, 1.0, NormOrder::ColOnly}).values;
    const Mat row = normalize_matrix({a, false}, {1.0, tau, NormOrder::RowOnly}).values;
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) {
        s += col(i, j);
        for (std::size_t k = 0; k < r; ++k)
          if (a(i, j) > a(k, j) && col(i, j) < col(k, j)) ++order_violations;
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        s += row(i, j);
        for (std::size_t k = 0; k < c; ++k)
          if (a(i, j) > a(i, k) && row(i, j) < row(i, k)) ++order_violations;
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  const Mat hub = uamvse::testing::hub_matrix();
  const Mat fixed = normalize_matrix({hub, false}, {0.1, 1.0, NormOrder::ColOnly}).values;
  const std::size_t before = uamvse::testing::rank_in_row(hub, 0, 0);
  const std::size_t after = uamvse::testing::rank_in_row(fixed, 0, 0);
  const bool ok = worst_sum <= 1e-12 && order_violations == 0 && after < before;
  return {ok, fmt("max |sum-1| %.1e, %zu order violations / 1000 matrices, hub positive rank %zu -> %zu", worst_sum,
                  order_violations, before, after)};
}

Outcome metric_oracle() {
  Rng rng(6);
  std::size_t mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n_img = 1 + rng.below(20);
    const std::size_t n_cap = n_img + rng.below(100 - n_img + 1);
    Mat A(n_img, n_cap);
    std::vector<std::size_t> c2i(n_cap);
    for (std::size_t c = 0; c < n_cap; ++c) c2i[c] = c < n_img ? c : rng.below(n_img);
    rng.shuffle(c2i);
    for (double &x : A.data()) x = t % 2 ? std::round(rng.uniform(0.0, 4.0)) : rng.uniform(-1.0, 1.0);
    if (!(report(A, c2i) == uamvse::testing::oracle_report(A, c2i))) ++mismatches;
  }
  Mat perfect(20, 20, 0.0);
  for (std::size_t i = 0; i < 20; ++i) perfect(i, i) = 1.0;
  const double rsum = report(perfect, identity_mapping(20)).rsum;
  return {mismatches == 0 && rsum == 600.0,
          fmt("%zu / 100 random matrices differ from the sort oracle, perfect rsum %.1f", mismatches, rsum)};
}

// ---------------------------------------------------------------------------
// Desk-scale training runs shared by the learnability and ablation criteria.

SynthConfig desk_data(std::uint64_t seed) {
  SynthConfig sc;
  sc.num_images = 200;
  sc.captions_per_image = 5;
  sc.latent_dim = 16;
  sc.d1 = 32;
  sc.d2 = 24;
  sc.noise_sigma = 0.1;
  sc.seed = seed;
  return sc;
}

ModelConfig desk_model() {
  ModelConfig mc;
  mc.d1 = 32;
  mc.d2 = 24;
  mc.d_emb = 32;
  mc.K = 4;
  return mc;
}

TrainConfig desk_train(std::uint64_t seed, bool weighting) {
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 64;
  tc.seed = seed;
  tc.weighting = weighting;
  return tc;
}

struct DeskRun {
  RetrievalReport raw;
  RetrievalReport normalized;
  NormalizationConfig norm;
  std::size_t test_images = 0, test_captions = 0;
};

DeskRun desk_run(std::uint64_t seed, bool weighting, bool with_norm) {
  const Dataset ds = generate_synthetic(desk_data(seed));
  const ModelConfig mc = desk_model();
  const auto res = train(ds, mc, desk_train(seed, weighting));
  const Dataset test = ds.subset(ds.splits.test);
  const ScoreMatrix A = aggregate_scores(score_dataset(test, res.params, mc));
  DeskRun out;
  out.test_images = test.images.size();
  out.test_captions = test.captions.size();
  out.raw = report(A.values, test.caption_to_image);
  if (with_norm) {
    const Dataset val = ds.subset(ds.splits.val);
    const ScoreMatrix V = aggregate_scores(score_dataset(val, res.params, mc));
    out.norm = grid_search_temperatures(V, val.caption_to_image, default_temperature_grid()).config;
    out.normalized = report(normalize_matrix(A, out.norm).values, test.caption_to_image);
  }
  return out;
}

Outcome learnability() {
  const auto t0 = std::chrono::steady_clock::now();
  double i2t = 0.0, t2i = 0.0;
  std::size_t n_img = 0, n_cap = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const DeskRun r = desk_run(seed, true, false);
    i2t += r.raw.i2t_r1 / 3.0;
    t2i += r.raw.t2i_r1 / 3.0;
    n_img = r.test_images;
    n_cap = r.test_captions;
    per_seed += fmt(" seed %llu: i2t %.1f t2i %.1f;", static_cast<unsigned long long>(seed), r.raw.i2t_r1, r.raw.t2i_r1);
  }
  const double secs = seconds_since(t0);
  const double i2t_need = 20.0 * 100.0 / static_cast<double>(n_cap);
  const double t2i_need = 20.0 * 100.0 / static_cast<double>(n_img);
  const bool ok = i2t >= i2t_need && t2i >= t2i_need && secs < 600.0;
  return {ok, fmt("mean R@1 i2t %.2f (need >= %.1f over %zu captions), t2i %.2f (need >= %.1f over %zu images), "
                  "%.1f s;%s",
                  i2t, i2t_need, n_cap, t2i, t2i_need, n_img, secs, per_seed.c_str())};
}

Outcome ablation_trends() {
  double full_raw = 0.0, full_norm = 0.0, no_weight = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const DeskRun full = desk_run(seed, true, true);
    const DeskRun plain = desk_run(seed, false, false);
    full_raw += full.raw.rsum / 5.0;
    full_norm += full.normalized.rsum / 5.0;
    no_weight += plain.raw.rsum / 5.0;
    per_seed += fmt(" seed %llu: full %.1f / normalized %.1f (%s, tau_row %g, tau_col %g) / no-weighting %.1f;",
                    static_cast<unsigned long long>(seed), full.raw.rsum, full.normalized.rsum,
                    std::string(to_string(full.norm.order)).c_str(), full.norm.tau_row, full.norm.tau_col,
                    plain.raw.rsum);
  }
  const bool ok = full_raw >= no_weight - 1.0 && full_norm >= full_raw - 1.0;
  return {ok, fmt("mean RSUM full %.2f vs no-weighting %.2f, normalized %.2f vs raw %.2f (tolerance 1.0);%s", full_raw,
                  no_weight, full_norm, full_raw, per_seed.c_str())};
}

// ---------------------------------------------------------------------------

int run(const std::string &cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return rc;
}

std::string read_bytes(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  const fs::path work = fs::current_path() / "acceptance_determinism";
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string cli = UAMVSE_CLI_PATH;
  const std::string sets = " --set epochs=6 --set batch_size=64";
  std::vector<fs::path> runs;
  for (int attempt = 0; attempt < 2; ++attempt) {
    const fs::path dir = work / ("run" + std::to_string(attempt));
    const std::string q = "\"" + dir.string();
    if (run("\"" + cli + "\" gen-data --out " + q + "/data\"" + sets) != 0 ||
        run("\"" + cli + "\" train --data " + q + "/data\" --run " + q + "/run\"" + sets) != 0 ||
        run("\"" + cli + "\" eval --checkpoint " + q + "/run/best.uamp\" --data " + q + "/data\" --split test --out " + q +
            "/report.json\"") != 0) {
      return {false, "CLI pipeline failed in " + dir.string()};
    }
    runs.push_back(dir);
  }
  std::size_t compared = 0, differing = 0;
  std::vector<fs::path> files{"report.json", "run/best.uamp", "run/log.jsonl", "data/images.uamv",
                              "data/captions.uamv"};
  for (const auto &entry : fs::directory_iterator(runs[0] / "run"))
    if (entry.path().extension() == ".uamp" && entry.path().filename() != "best.uamp")
      files.push_back(fs::path("run") / entry.path().filename());
  for (const auto &f : files) {
    const std::string a = read_bytes(runs[0] / f), b = read_bytes(runs[1] / f);
    ++compared;
    if (a.empty() || a != b) ++differing;
  }
  fs::remove_all(work);
  return {differing == 0 && compared >= 11,
          fmt("%zu files compared (checkpoints, log, report, features), %zu differ", compared, differing)};
}

Outcome default_constants() {
  const TrainConfig tc;
  const NormalizationConfig nc;
  const ModelConfig mc;
  const double l0 = lr_at(0, tc), l10 = lr_at(10, tc), l20 = lr_at(20, tc);
  const bool ok = std::abs(l0 - 5e-4) < 1e-15 && std::abs(l10 - 4.5e-4) < 1e-15 && std::abs(l20 - 4.05e-4) < 1e-15 &&
                  nc.tau_col == 20.0 && nc.tau_row == 170.0 && mc.K == 4;
  return {ok, fmt("lr %.3g / %.3g / %.3g, tau_col %g, tau_row %g, K %zu", l0, l10, l20, nc.tau_col, nc.tau_row, mc.K)};
}

}  // namespace

int main() {
  struct Criterion {
    const char *name;
    Outcome (*fn)();
  };
  const Criterion criteria[] = {
      {"gradient correctness", gradient_correctness},
      {"weight algebra", weight_algebra},
      {"single-view triplet reduction", vsepp_reduction},
      {"logsumexp bound", lse_bound},
      {"normalization contracts", normalization_contracts},
      {"retrieval metric oracle", metric_oracle},
      {"end-to-end learnability", learnability},
      {"ablation trends", ablation_trends},
      {"determinism", determinism},
      {"default constants", default_constants},
  };
  int failed = 0;
  int index = 0;
  for (const auto &c : criteria) {
    ++index;
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << index << " (" << c.name << "): " << o.detail
              << std::endl;
    failed += !o.pass;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << "(" << (10 - failed) << "/10 passed)" << std::endl;
  return failed ? 1 : 0;
}
