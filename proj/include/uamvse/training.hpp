// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Hand-derived backward pass for the encoder + weighted objective,
 *         finite-difference gradient checks, Adam, the step-decay schedule
 *         and the deterministic training loop.
 */
#pragma once

#include <functional>

#include "uamvse/inference.hpp"

namespace uamvse {

enum class LossKind : std::uint8_t { Triplet = 0, GlobalNll = 1 };
enum class OptimizerKind : std::uint8_t { Adam = 0, Sgd = 1 };

inline std::string_view to_string(LossKind k) { return k == LossKind::Triplet ? "triplet" : "global-nll"; }
inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "triplet") return LossKind::Triplet;
  if (s == "global-nll") return LossKind::GlobalNll;
  throw Error("unknown loss '" + std::string(s) + "'");
}
inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }
inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw Error("unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr0 = 5e-4;
  std::size_t decay_every = 10;
  double decay_factor = 0.9;
  LossKind loss = LossKind::Triplet;
  bool weighting = true;
  SpreadMode spread = SpreadMode::StdDev;
  double margin = 0.2;
  /// Global L2 gradient-norm clip; 0 disables.
  double clip_norm = 2.0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 2) throw Error("train config: batch_size must be >= 2");
    if (!(lr0 > 0.0)) throw Error("train config: lr0 must be > 0");
    if (decay_every < 1) throw Error("train config: decay_every must be >= 1");
    if (!(margin >= 0.0)) throw Error("train config: margin must be >= 0");
    if (!(clip_norm >= 0.0)) throw Error("train config: clip_norm must be >= 0");
  }
};

inline double lr_at(std::size_t epoch, const TrainConfig &cfg) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Everything a batch forward decided or computed; replaying it through
/// `frozen` evaluates the loss on the same smooth piece.
struct BranchState {
  std::vector<ImageTrace> images;
  std::vector<TextTrace> texts;
  std::vector<Mat> views;
  Mat text_embs;
  SimilarityTensor scores;
  UncertaintyWeights weights;
  TripletActiveSet triplet;
};

inline double batch_loss(const Dataset &ds, const Batch &batch, const ModelParams &p, const ModelConfig &mc,
                         const TrainConfig &tc, BranchState *record = nullptr, const BranchState *frozen = nullptr) {
  const std::size_t B = batch.size();
  if (B < 2) throw Error("batch_loss: batch needs at least 2 pairs");
  BranchState local;
  BranchState &st = record ? *record : local;
  st.images.assign(B, {});
  st.texts.assign(B, {});
  st.views.assign(B, {});
  st.text_embs = Mat(B, mc.d_emb);
  for (std::size_t b = 0; b < B; ++b) {
    st.views[b] = encode_image(ds.images.at(batch[b].image), p, mc, &st.images[b], frozen ? &frozen->images[b] : nullptr);
    const Vec t = encode_text(ds.captions.at(batch[b].caption), p, mc, &st.texts[b], frozen ? &frozen->texts[b] : nullptr);
    std::copy(t.begin(), t.end(), st.text_embs.row(b).begin());
  }
  st.scores = similarity_tensor(st.views, st.text_embs);
  if (frozen) st.weights = frozen->weights;
  else if (tc.weighting) st.weights = uncertainty_weights(st.scores, tc.spread);
  else st.weights = UncertaintyWeights::uniform(B, mc.K);

  if (tc.loss == LossKind::Triplet) {
    auto res = weighted_triplet_loss(st.scores, st.weights, {tc.margin, tc.weighting}, frozen ? &frozen->triplet : nullptr);
    st.triplet = std::move(res.active);
    return res.loss;
  }
  return global_nll_loss(st.scores, st.weights, tc.weighting);
}

struct ForwardBackward {
  double loss = 0.0;
  Gradients grads;
  BranchState branch;
};

/**
 * Loss and its gradient. Uncertainty weights, hardest negatives, hinge
 * activity, ReLU gates and pooling orders are constants of the pass;
 * ReLU and hinge subgradients are 0 at 0.
 */
inline ForwardBackward forward_backward(const Dataset &ds, const Batch &batch, const ModelParams &p,
                                        const ModelConfig &mc, const TrainConfig &tc) {
  ForwardBackward fb;
  fb.loss = batch_loss(ds, batch, p, mc, tc, &fb.branch);
  const BranchState &st = fb.branch;
  const std::size_t B = batch.size();

  const SimilarityTensor dS = tc.loss == LossKind::Triplet
                                  ? weighted_triplet_backward(st.scores, st.weights, {tc.margin, tc.weighting}, st.triplet)
                                  : global_nll_backward(st.scores, st.weights, tc.weighting);
  std::vector<Mat> d_views(B, Mat(mc.K, mc.d_emb));
  Mat d_texts(B, mc.d_emb);
  similarity_tensor_backward(st.views, st.text_embs, dS, d_views, d_texts);

  fb.grads = ModelParams::zeros(mc);
  for (std::size_t b = 0; b < B; ++b) {
    backward_image(ds.images[batch[b].image], st.images[b], d_views[b], p, mc, fb.grads);
    backward_text(ds.captions[batch[b].caption], st.texts[b], d_texts.row(b), mc, fb.grads);
  }
  bool finite = std::isfinite(fb.loss);
  fb.grads.for_each_tensor([&](const Vec &t) { finite = finite && all_finite(t); });
  if (!finite) throw NumericError("forward_backward: non-finite loss or gradient");
  return fb;
}

/// Mean loss and gradient over several batches, summed in list order.
inline ForwardBackward forward_backward_mean(const Dataset &ds, std::span<const Batch> batches, const ModelParams &p,
                                             const ModelConfig &mc, const TrainConfig &tc) {
  if (batches.empty()) throw Error("forward_backward_mean: no batches");
  ForwardBackward acc;
  acc.grads = ModelParams::zeros(mc);
  Vec flat = acc.grads.flatten();
  for (const Batch &b : batches) {
    const auto fb = forward_backward(ds, b, p, mc, tc);
    acc.loss += fb.loss;
    const Vec g = fb.grads.flatten();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += g[i];
  }
  const double inv = 1.0 / static_cast<double>(batches.size());
  acc.loss *= inv;
  for (double &x : flat) x *= inv;
  acc.grads.unflatten(flat);
  return acc;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central difference of f along coordinate index of x.
inline double central_difference(const std::function<double(std::span<const double>)> &f, Vec x,
                                 std::size_t index, double h) {
  if (!(h > 0.0)) throw Error("central_difference: h must be > 0");
  if (index >= x.size()) {
    throw Error("central_difference: index " + std::to_string(index) + " out of range " + std::to_string(x.size()));
  }
  const double x0 = x[index];
  x[index] = x0 + h;
  const double up = f(x);
  x[index] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/**
 * d(loss)/d(theta[param_index]) by central differences with the branch
 * choices of the unperturbed forward held fixed for both evaluations.
 * Pass `frozen` to reuse a branch recorded earlier.
 */
inline double finite_diff_gradient(const Dataset &ds, const Batch &batch, const ModelParams &p, const ModelConfig &mc,
                                   const TrainConfig &tc, std::size_t param_index, double h,
                                   const BranchState *frozen = nullptr) {
  BranchState base;
  if (!frozen) {
    batch_loss(ds, batch, p, mc, tc, &base);
    frozen = &base;
  }
  ModelParams work = p;
  auto f = [&](std::span<const double> theta) {
    work.unflatten(theta);
    return batch_loss(ds, batch, work, mc, tc, nullptr, frozen);
  };
  return central_difference(f, p.flatten(), param_index, h);
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckCase {
  LossKind loss;
  Pooling pooling;
  std::uint64_t seed;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_rel_error = 0.0;
  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

/// Small fixed-shape problem used by the gradient checks.
struct GradCheckProblem {
  Dataset data;
  Batch batch;
  ModelConfig model;
};

inline GradCheckProblem make_grad_check_problem(Pooling pooling, std::uint64_t seed) {
  SynthConfig sc;
  sc.num_images = 4;
  sc.captions_per_image = 2;
  sc.latent_dim = 4;
  sc.d1 = 8;
  sc.d2 = 6;
  sc.regions_per_image = 3;
  sc.tokens_per_caption = 4;
  sc.noise_sigma = 0.5;
  sc.seed = seed;
  GradCheckProblem prob;
  prob.data = generate_synthetic(sc);
  for (std::size_t i = 0; i < 4; ++i) prob.batch.push_back({i, 2 * i + (seed + i) % 2});
  prob.model.d1 = 8;
  prob.model.d2 = 6;
  prob.model.d_emb = 4;
  prob.model.K = 2;
  prob.model.hidden = 8;
  prob.model.pooling = pooling;
  return prob;
}

/**
 * For each loss kind x pooling kind x seed, compares `trials` randomly
 * chosen analytic gradient entries with central differences (step h).
 * Parameters are jittered away from their initialization so that biases
 * and pooling coefficients are not at symmetric points.
 */
inline GradCheckReport gradient_check_suite(std::uint64_t seed, std::size_t trials, std::size_t seeds = 5,
                                            double h = 1e-5) {
  GradCheckReport rep;
  for (LossKind loss : {LossKind::Triplet, LossKind::GlobalNll}) {
    for (Pooling pooling : {Pooling::Mean, Pooling::Max, Pooling::GpoLite}) {
      for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t case_seed = seed * 1000003ULL + s;
        const auto prob = make_grad_check_problem(pooling, case_seed);
        ModelParams p = init_params(prob.model, case_seed);
        Rng jitter = Rng(case_seed).split(77);
        Vec flat = p.flatten();
        for (double &x : flat) x += 0.1 * jitter.normal();
        p.unflatten(flat);

        TrainConfig tc;
        tc.loss = loss;
        tc.clip_norm = 0.0;
        const auto fb = forward_backward(prob.data, prob.batch, p, prob.model, tc);
        const Vec analytic = fb.grads.flatten();
        GradCheckCase c{loss, pooling, case_seed};
        for (std::size_t t = 0; t < trials; ++t) {
          const std::size_t idx = jitter.below(analytic.size());
          const double fd = finite_diff_gradient(prob.data, prob.batch, p, prob.model, tc, idx, h, &fb.branch);
          c.max_rel_error = std::max(c.max_rel_error, relative_error(analytic[idx], fd));
          ++c.checked;
        }
        rep.max_rel_error = std::max(rep.max_rel_error, c.max_rel_error);
        rep.cases.push_back(c);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamState {
  Vec m;
  Vec v;
  std::uint64_t t = 0;
  bool operator==(const AdamState &) const = default;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

inline void adam_step(ModelParams &params, const Gradients &grads, AdamState &state, double lr) {
  if (!params.same_shape(grads)) throw Error("adam_step: gradient shapes do not match parameters");
  Vec theta = params.flatten();
  const Vec g = grads.flatten();
  if (state.m.empty() && state.t == 0) {
    state.m.assign(theta.size(), 0.0);
    state.v.assign(theta.size(), 0.0);
  }
  if (state.m.size() != theta.size() || state.v.size() != theta.size()) {
    throw Error("adam_step: optimizer state does not match parameter count");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g[i];
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    theta[i] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
  params.unflatten(theta);
}

inline void sgd_step(ModelParams &params, const Gradients &grads, double lr) {
  if (!params.same_shape(grads)) throw Error("sgd_step: gradient shapes do not match parameters");
  Vec theta = params.flatten();
  const Vec g = grads.flatten();
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * g[i];
  params.unflatten(theta);
}

/// Rescales grads to global L2 norm max_norm when above it. Returns the norm.
inline double clip_global_norm(Gradients &grads, double max_norm) {
  double ss = 0.0;
  grads.for_each_tensor([&](const Vec &t) { ss += dot(t, t); });
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    grads.for_each_tensor([&](Vec &t) {
      for (double &x : t) x *= s;
    });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_rsum = 0.0;
  bool operator==(const EpochLog &) const = default;
};

inline nlohmann::json to_json(const EpochLog &e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val_rsum", e.val_rsum}};
}

struct TrainResult {
  ModelParams params;       // best validation RSUM
  ModelParams last_params;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

/// Raw (unnormalized) RSUM of the model on one split; 0 for an empty split.
inline double split_rsum(const Dataset &ds, std::string_view split, const ModelParams &p, const ModelConfig &mc) {
  const auto &ids = ds.splits.get(split);
  if (ids.empty()) return 0.0;
  const Dataset sub = ds.subset(ids);
  return report(aggregate_scores(score_dataset(sub, p, mc)).values, sub.caption_to_image).rsum;
}

struct TrainHooks {
  /// When set, receives epoch_NNN.uamp checkpoints, best.uamp and log.jsonl.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const EpochLog &)> on_epoch;
};

/**
 * Epochs of shuffled batches, each a forward_backward, clip and optimizer
 * step. Returns the parameters of the epoch with the best validation RSUM
 * (earliest on ties) alongside the final ones.
 */
inline TrainResult train(const Dataset &ds, const ModelConfig &mc, const TrainConfig &tc, const TrainHooks &hooks = {}) {
  mc.validate();
  tc.validate();
  if (ds.splits.train.empty()) throw DataError("train: train split is empty");
  if (ds.region_dim() != mc.d1 || ds.token_dim() != mc.d2) {
    throw DataError("train: dataset dims (" + std::to_string(ds.region_dim()) + ", " + std::to_string(ds.token_dim()) +
                    ") do not match model d1/d2 (" + std::to_string(mc.d1) + ", " + std::to_string(mc.d2) + ")");
  }
  TrainResult res;
  res.params = init_params(mc, tc.seed);
  res.last_params = res.params;
  if (tc.epochs == 0) return res;

  std::ofstream log_out;
  if (hooks.run_dir) {
    std::filesystem::create_directories(*hooks.run_dir);
    log_out.open(*hooks.run_dir / "log.jsonl", std::ios::trunc);
    if (!log_out) throw DataError("cannot write " + (*hooks.run_dir / "log.jsonl").string());
  }

  ModelParams params = res.params;
  AdamState adam;
  double best_rsum = -1.0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = lr_at(epoch, tc);
    const auto batches = batch_iter(ds, "train", tc.batch_size, tc.seed, epoch);
    if (batches.empty()) throw DataError("train: train split smaller than one batch");
    double loss_sum = 0.0;
    for (const Batch &b : batches) {
      auto fb = forward_backward(ds, b, params, mc, tc);
      loss_sum += fb.loss;
      clip_global_norm(fb.grads, tc.clip_norm);
      if (tc.optimizer == OptimizerKind::Adam) adam_step(params, fb.grads, adam, lr);
      else sgd_step(params, fb.grads, lr);
    }
    EpochLog e{epoch, lr, loss_sum / static_cast<double>(batches.size()), split_rsum(ds, "val", params, mc)};
    res.log.push_back(e);
    if (e.val_rsum > best_rsum) {
      best_rsum = e.val_rsum;
      res.params = params;
      res.best_epoch = epoch;
    }
    if (hooks.run_dir) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03zu.uamp", epoch);
      save_checkpoint(*hooks.run_dir / name, mc, params);
      log_out << to_json(e).dump() << "\n";
      log_out.flush();
    }
    if (hooks.on_epoch) hooks.on_epoch(e);
  }
  res.last_params = params;
  if (hooks.run_dir) save_checkpoint(*hooks.run_dir / "best.uamp", mc, res.params);
  return res;
}

}  // namespace uamvse
