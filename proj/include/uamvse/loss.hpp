// SPDX-License-Identifier: Apache-2.0
/**
 * @file   loss.hpp
 * @brief  Per-view similarity tensors, uncertainty weights from the spread
 *         of negative-pair similarities, and the weighted bidirectional
 *         objectives (hardest-negative triplet and whole-matrix NLL).
 *
 * Batches are square: image i and text i form the only positive pair in
 * row i and column i.
 */
#pragma once

#include "uamvse/core.hpp"

namespace uamvse {

/// scores(k, i, j) = s(view k of image i, text j).
class SimilarityTensor {
 public:
  SimilarityTensor() = default;
  SimilarityTensor(std::size_t views, std::size_t n_images, std::size_t n_texts, double fill = 0.0)
      : K_(views), n_img_(n_images), n_txt_(n_texts), scores_(views * n_images * n_texts, fill) {}

  std::size_t views() const { return K_; }
  std::size_t n_images() const { return n_img_; }
  std::size_t n_texts() const { return n_txt_; }

  double &operator()(std::size_t k, std::size_t i, std::size_t j) { return scores_[(k * n_img_ + i) * n_txt_ + j]; }
  double operator()(std::size_t k, std::size_t i, std::size_t j) const {
    return scores_[(k * n_img_ + i) * n_txt_ + j];
  }

  Mat slice(std::size_t k) const {
    Mat m(n_img_, n_txt_);
    for (std::size_t i = 0; i < n_img_; ++i)
      for (std::size_t j = 0; j < n_txt_; ++j) m(i, j) = (*this)(k, i, j);
    return m;
  }

  Vec &data() { return scores_; }
  const Vec &data() const { return scores_; }

  bool operator==(const SimilarityTensor &) const = default;

 private:
  std::size_t K_ = 0, n_img_ = 0, n_txt_ = 0;
  Vec scores_;
};

/// view_embs[i] is the K x d view matrix of image i; text_embs row j is text j.
inline SimilarityTensor similarity_tensor(std::span<const Mat> view_embs, const Mat &text_embs) {
  if (view_embs.empty()) throw Error("similarity_tensor: no images");
  const std::size_t K = view_embs.front().rows();
  const std::size_t d = view_embs.front().cols();
  if (text_embs.cols() != d) {
    throw Error("similarity_tensor: view dim " + std::to_string(d) + " != text dim " +
                std::to_string(text_embs.cols()));
  }
  SimilarityTensor S(K, view_embs.size(), text_embs.rows());
  for (std::size_t i = 0; i < view_embs.size(); ++i) {
    if (view_embs[i].rows() != K || view_embs[i].cols() != d) {
      throw Error("similarity_tensor: image " + std::to_string(i) + " has shape " + view_embs[i].shape_str());
    }
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < text_embs.rows(); ++j) S(k, i, j) = dot(view_embs[i].row(k), text_embs.row(j));
  }
  return S;
}

/// Accumulates d(scores) into d(view embeddings) and d(text embeddings).
inline void similarity_tensor_backward(std::span<const Mat> view_embs, const Mat &text_embs,
                                       const SimilarityTensor &dS, std::vector<Mat> &d_views, Mat &d_texts) {
  const std::size_t K = dS.views();
  const std::size_t d = text_embs.cols();
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < dS.n_images(); ++i) {
      for (std::size_t j = 0; j < dS.n_texts(); ++j) {
        const double g = dS(k, i, j);
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          d_views[i](k, c) += g * text_embs(j, c);
          d_texts(j, c) += g * view_embs[i](k, c);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Uncertainty weights

/// Quantity fed to the softmax over views: the standard deviation of the
/// negative similarities (default) or their variance.
enum class SpreadMode : std::uint8_t { StdDev = 0, Variance = 1 };

struct UncertaintyWeights {
  Mat img_to_txt;  // B x K, anchor image i, view k
  Mat txt_to_img;  // B x K, anchor text j, view k

  static UncertaintyWeights uniform(std::size_t B, std::size_t K, double value = 1.0) {
    return {Mat(B, K, value), Mat(B, K, value)};
  }
  bool operator==(const UncertaintyWeights &) const = default;
};

namespace detail {

/// Population variance; a single negative (B = 2) has zero spread.
inline double negative_spread(const Vec &negs, SpreadMode mode) {
  const double var = negs.size() < 2 ? 0.0 : variance(negs);
  return mode == SpreadMode::StdDev ? std::sqrt(var) : var;
}

}  // namespace detail

/// Per-view weights of one anchor: 1 / softmax(spread) over the K views.
inline Vec view_weights(const Vec &spread) {
  Vec w = softmax_scaled(spread, 1.0);
  for (double &x : w) x = 1.0 / x;
  return w;
}

/**
 * For anchor image i and view k the spread is taken over {S(k,i,j) : j != i};
 * per anchor the weights are 1 / softmax_k(spread). The text direction
 * uses column j without its diagonal entry.
 */
inline UncertaintyWeights uncertainty_weights(const SimilarityTensor &S, SpreadMode mode = SpreadMode::StdDev) {
  const std::size_t B = S.n_images();
  const std::size_t K = S.views();
  if (S.n_texts() != B) throw Error("uncertainty_weights: similarity tensor must be square per view");
  if (B < 2) throw Error("uncertainty_weights: need B >= 2, got " + std::to_string(B));
  UncertaintyWeights W = UncertaintyWeights::uniform(B, K);
  Vec negs(B - 1);
  Vec spread_i2t(K), spread_t2i(K);
  for (std::size_t a = 0; a < B; ++a) {
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t n = 0;
      for (std::size_t j = 0; j < B; ++j)
        if (j != a) negs[n++] = S(k, a, j);
      spread_i2t[k] = detail::negative_spread(negs, mode);
      n = 0;
      for (std::size_t i = 0; i < B; ++i)
        if (i != a) negs[n++] = S(k, i, a);
      spread_t2i[k] = detail::negative_spread(negs, mode);
    }
    const Vec wi = view_weights(spread_i2t);
    const Vec wt = view_weights(spread_t2i);
    for (std::size_t k = 0; k < K; ++k) {
      W.img_to_txt(a, k) = wi[k];
      W.txt_to_img(a, k) = wt[k];
    }
  }
  return W;
}

// ---------------------------------------------------------------------------
// Triplet loss

struct TripletConfig {
  double margin = 0.2;
  bool weighting = true;
};

/// Hardest negatives and hinge activity chosen by a forward pass, K x B each.
struct TripletActiveSet {
  std::vector<std::uint32_t> i2t_neg;
  std::vector<std::uint8_t> i2t_on;
  std::vector<std::uint32_t> t2i_neg;
  std::vector<std::uint8_t> t2i_on;
  bool operator==(const TripletActiveSet &) const = default;
};

struct TripletResult {
  double loss = 0.0;
  TripletActiveSet active;
};

namespace detail {

inline void check_square(const SimilarityTensor &S, const UncertaintyWeights &W, const char *who) {
  const std::size_t B = S.n_images();
  if (S.n_texts() != B) throw Error(std::string(who) + ": similarity tensor must be square per view");
  if (B < 2) throw Error(std::string(who) + ": need B >= 2, got " + std::to_string(B));
  if (W.img_to_txt.rows() != B || W.img_to_txt.cols() != S.views() || W.txt_to_img.rows() != B ||
      W.txt_to_img.cols() != S.views()) {
    throw Error(std::string(who) + ": weights shape does not match similarity tensor");
  }
}

}  // namespace detail

/**
 * sum_k sum_i w_{i,k} [margin - S(k,i,i) + max_{j != i} S(k,i,j)]_+ plus the
 * symmetric text-anchor sum, divided by B. Weights are ignored (all 1) when
 * cfg.weighting is off. With `frozen`, the recorded negatives and hinge
 * activity are reused instead of being re-selected.
 */
inline TripletResult weighted_triplet_loss(const SimilarityTensor &S, const UncertaintyWeights &W,
                                           const TripletConfig &cfg, const TripletActiveSet *frozen = nullptr) {
  detail::check_square(S, W, "weighted_triplet_loss");
  if (!(cfg.margin >= 0.0)) throw Error("weighted_triplet_loss: margin must be >= 0");
  const std::size_t B = S.n_images();
  const std::size_t K = S.views();
  TripletResult res;
  auto &act = res.active;
  act.i2t_neg.assign(K * B, 0);
  act.i2t_on.assign(K * B, 0);
  act.t2i_neg.assign(K * B, 0);
  act.t2i_on.assign(K * B, 0);

  double i2t_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t hard = 0;
      if (frozen) {
        hard = frozen->i2t_neg[k * B + i];
      } else {
        hard = i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < B; ++j)
          if (j != i && S(k, i, j) > S(k, i, hard)) hard = j;
      }
      const double h = cfg.margin - S(k, i, i) + S(k, i, hard);
      const bool on = frozen ? frozen->i2t_on[k * B + i] != 0 : h > 0.0;
      act.i2t_neg[k * B + i] = static_cast<std::uint32_t>(hard);
      act.i2t_on[k * B + i] = on;
      if (on) i2t_sum += (cfg.weighting ? W.img_to_txt(i, k) : 1.0) * h;
    }
  }
  double t2i_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < B; ++j) {
      std::size_t hard = 0;
      if (frozen) {
        hard = frozen->t2i_neg[k * B + j];
      } else {
        hard = j == 0 ? 1 : 0;
        for (std::size_t i = 0; i < B; ++i)
          if (i != j && S(k, i, j) > S(k, hard, j)) hard = i;
      }
      const double h = cfg.margin - S(k, j, j) + S(k, hard, j);
      const bool on = frozen ? frozen->t2i_on[k * B + j] != 0 : h > 0.0;
      act.t2i_neg[k * B + j] = static_cast<std::uint32_t>(hard);
      act.t2i_on[k * B + j] = on;
      if (on) t2i_sum += (cfg.weighting ? W.txt_to_img(j, k) : 1.0) * h;
    }
  }
  res.loss = (i2t_sum + t2i_sum) / static_cast<double>(B);
  return res;
}

/// d(loss)/d(scores) on the branch described by `active`, weights held fixed.
inline SimilarityTensor weighted_triplet_backward(const SimilarityTensor &S, const UncertaintyWeights &W,
                                                  const TripletConfig &cfg, const TripletActiveSet &active) {
  const std::size_t B = S.n_images();
  const std::size_t K = S.views();
  SimilarityTensor dS(K, B, B);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t a = 0; a < B; ++a) {
      if (active.i2t_on[k * B + a]) {
        const double c = (cfg.weighting ? W.img_to_txt(a, k) : 1.0) * inv_b;
        dS(k, a, a) -= c;
        dS(k, a, active.i2t_neg[k * B + a]) += c;
      }
      if (active.t2i_on[k * B + a]) {
        const double c = (cfg.weighting ? W.txt_to_img(a, k) : 1.0) * inv_b;
        dS(k, a, a) -= c;
        dS(k, active.t2i_neg[k * B + a], a) += c;
      }
    }
  }
  return dS;
}

// ---------------------------------------------------------------------------
// Whole-matrix negative log-likelihood

/**
 * Per view k and anchor i: -log(exp(S(k,i,i)) / sum_{i',j'} exp(S(k,i',j'))),
 * weighted by w_{i,k} in each direction, summed and divided by B. The
 * partition of the whole B x B matrix is shared by both directions.
 */
inline double global_nll_loss(const SimilarityTensor &S, const UncertaintyWeights &W, bool weighting = true) {
  detail::check_square(S, W, "global_nll_loss");
  const std::size_t B = S.n_images();
  const std::size_t K = S.views();
  const std::size_t BB = B * B;
  double i2t_sum = 0.0;
  double t2i_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double log_z = logsumexp(std::span<const double>(S.data().data() + k * BB, BB));
    for (std::size_t a = 0; a < B; ++a) {
      const double nll = log_z - S(k, a, a);
      i2t_sum += (weighting ? W.img_to_txt(a, k) : 1.0) * nll;
      t2i_sum += (weighting ? W.txt_to_img(a, k) : 1.0) * nll;
    }
  }
  return (i2t_sum + t2i_sum) / static_cast<double>(B);
}

inline SimilarityTensor global_nll_backward(const SimilarityTensor &S, const UncertaintyWeights &W,
                                            bool weighting = true) {
  const std::size_t B = S.n_images();
  const std::size_t K = S.views();
  const std::size_t BB = B * B;
  SimilarityTensor dS(K, B, B);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t k = 0; k < K; ++k) {
    const std::span<const double> slice(S.data().data() + k * BB, BB);
    const Vec prob = softmax_scaled(slice, 1.0);
    double total_w = 0.0;
    for (std::size_t a = 0; a < B; ++a) {
      const double w = weighting ? W.img_to_txt(a, k) + W.txt_to_img(a, k) : 2.0;
      total_w += w;
      dS(k, a, a) -= w * inv_b;
    }
    for (std::size_t e = 0; e < BB; ++e) dS.data()[k * BB + e] += total_w * inv_b * prob[e];
  }
  return dS;
}

// ---------------------------------------------------------------------------

struct HingePair {
  double triplet = 0.0;
  double lse_form = 0.0;
};

/// Hard-max hinge and its LogSumExp relaxation for one anchor row.
inline HingePair lse_hinge_equivalence_check(std::span<const double> row, std::size_t positive, double margin) {
  if (row.size() < 2) throw Error("lse_hinge_equivalence_check: need at least 2 scores");
  if (positive >= row.size()) throw Error("lse_hinge_equivalence_check: positive index out of range");
  Vec negs;
  negs.reserve(row.size() - 1);
  for (std::size_t j = 0; j < row.size(); ++j)
    if (j != positive) negs.push_back(row[j]);
  const double max_neg = *std::max_element(negs.begin(), negs.end());
  return {std::max(0.0, margin - row[positive] + max_neg), std::max(0.0, margin - row[positive] + logsumexp(negs))};
}

}  // namespace uamvse
