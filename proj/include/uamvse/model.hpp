// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Dual-branch encoder. Image regions go through a shared two-layer
 *         MLP whose output is split into K view slices, each pooled over
 *         regions and L2-normalized; caption tokens go through a linear
 *         projection, pooling and L2 normalization.
 *
 * Forward passes can record a trace (intermediates plus the branch choices
 * made by ReLU and sort-based pooling) and can replay the choices of an
 * earlier trace, which keeps finite-difference checks on one smooth piece.
 */
#pragma once

#include <string_view>

#include "uamvse/data.hpp"

namespace uamvse {

enum class Pooling : std::uint8_t { Mean = 0, Max = 1, GpoLite = 2 };

inline std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::Mean: return "mean";
    case Pooling::Max: return "max";
    case Pooling::GpoLite: return "gpo-lite";
  }
  return "?";
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "max") return Pooling::Max;
  if (s == "gpo-lite") return Pooling::GpoLite;
  throw Error("unknown pooling kind '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t d1 = 32;
  std::size_t d2 = 24;
  std::size_t d_emb = 32;
  std::size_t K = 4;
  std::size_t hidden = 64;
  Pooling pooling = Pooling::Mean;
  std::size_t gpo_points = 16;

  void validate() const {
    if (K < 1 || d_emb < 1 || hidden < 1 || d1 < 1 || d2 < 1 || gpo_points < 1) {
      throw Error("model config: K, d_emb, hidden, d1, d2 and gpo_points must be >= 1");
    }
  }
  bool operator==(const ModelConfig &) const = default;
};

/**
 * Learnable weights. Flatten order: W1, b1, W2, b2, Wt, bt, pool_img,
 * pool_txt, each matrix row-major.
 */
struct ModelParams {
  Mat W1;  // hidden x d1
  Vec b1;  // hidden
  Mat W2;  // (K*d_emb) x hidden
  Vec b2;  // K*d_emb
  Mat Wt;  // d_emb x d2
  Vec bt;  // d_emb
  Vec pool_img;
  Vec pool_txt;

  static ModelParams zeros(const ModelConfig &cfg) {
    ModelParams p;
    p.W1 = Mat(cfg.hidden, cfg.d1);
    p.b1.assign(cfg.hidden, 0.0);
    p.W2 = Mat(cfg.K * cfg.d_emb, cfg.hidden);
    p.b2.assign(cfg.K * cfg.d_emb, 0.0);
    p.Wt = Mat(cfg.d_emb, cfg.d2);
    p.bt.assign(cfg.d_emb, 0.0);
    p.pool_img.assign(cfg.gpo_points, 0.0);
    p.pool_txt.assign(cfg.gpo_points, 0.0);
    return p;
  }

  template <typename F>
  void for_each_tensor(F &&f) {
    f(W1.data()); f(b1); f(W2.data()); f(b2); f(Wt.data()); f(bt); f(pool_img); f(pool_txt);
  }
  template <typename F>
  void for_each_tensor(F &&f) const {
    f(W1.data()); f(b1); f(W2.data()); f(b2); f(Wt.data()); f(bt); f(pool_img); f(pool_txt);
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for_each_tensor([&](const Vec &t) { n += t.size(); });
    return n;
  }

  Vec flatten() const {
    Vec out;
    out.reserve(num_values());
    for_each_tensor([&](const Vec &t) { out.insert(out.end(), t.begin(), t.end()); });
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != num_values()) {
      throw Error("unflatten: expected " + std::to_string(num_values()) + " values, got " +
                  std::to_string(flat.size()));
    }
    std::size_t pos = 0;
    for_each_tensor([&](Vec &t) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.begin());
      pos += t.size();
    });
  }

  bool same_shape(const ModelParams &o) const {
    return W1.rows() == o.W1.rows() && W1.cols() == o.W1.cols() && b1.size() == o.b1.size() &&
           W2.rows() == o.W2.rows() && W2.cols() == o.W2.cols() && b2.size() == o.b2.size() &&
           Wt.rows() == o.Wt.rows() && Wt.cols() == o.Wt.cols() && bt.size() == o.bt.size() &&
           pool_img.size() == o.pool_img.size() && pool_txt.size() == o.pool_txt.size();
  }

  bool operator==(const ModelParams &) const = default;
};

/// Same shapes as ModelParams.
using Gradients = ModelParams;

/// Xavier-uniform weights, zero biases, pooling coefficients 1/P.
inline ModelParams init_params(const ModelConfig &cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p = ModelParams::zeros(cfg);
  const Rng root(seed);
  auto xavier = [](Mat &w, Rng rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (double &x : w.data()) x = rng.uniform(-a, a);
  };
  xavier(p.W1, root.split(11));
  xavier(p.W2, root.split(12));
  xavier(p.Wt, root.split(13));
  const double c = 1.0 / static_cast<double>(cfg.gpo_points);
  std::fill(p.pool_img.begin(), p.pool_img.end(), c);
  std::fill(p.pool_txt.begin(), p.pool_txt.end(), c);
  return p;
}

// ---------------------------------------------------------------------------
// Pooling

struct PoolTrace {
  /// Per feature dimension, row indices sorted by descending value (stable).
  std::vector<std::vector<std::uint32_t>> order;
  /// gpo-lite: interpolated coefficients before normalization, and their sum.
  Vec raw_weights;
  double weight_sum = 0.0;
};

namespace detail {

/// Linear interpolation of coeffs onto n sorted positions.
inline Vec interpolate_coeffs(std::span<const double> coeffs, std::size_t n) {
  Vec out(n);
  const std::size_t P = coeffs.size();
  for (std::size_t r = 0; r < n; ++r) {
    const double x = n == 1 ? 0.0 : static_cast<double>(r) * static_cast<double>(P - 1) / static_cast<double>(n - 1);
    std::size_t lo = static_cast<std::size_t>(x);
    if (lo >= P - 1) {
      out[r] = coeffs[P - 1];
      continue;
    }
    const double f = x - static_cast<double>(lo);
    out[r] = (1.0 - f) * coeffs[lo] + f * coeffs[lo + 1];
  }
  return out;
}

/// Scatters a gradient on interpolated coefficients back onto coeffs.
inline void interpolate_coeffs_backward(std::span<const double> d_interp, std::span<double> d_coeffs) {
  const std::size_t n = d_interp.size();
  const std::size_t P = d_coeffs.size();
  for (std::size_t r = 0; r < n; ++r) {
    const double x = n == 1 ? 0.0 : static_cast<double>(r) * static_cast<double>(P - 1) / static_cast<double>(n - 1);
    std::size_t lo = static_cast<std::size_t>(x);
    if (lo >= P - 1) {
      d_coeffs[P - 1] += d_interp[r];
      continue;
    }
    const double f = x - static_cast<double>(lo);
    d_coeffs[lo] += (1.0 - f) * d_interp[r];
    d_coeffs[lo + 1] += f * d_interp[r];
  }
}

inline std::vector<std::uint32_t> descending_order(const Mat &x, std::size_t col) {
  std::vector<std::uint32_t> idx(x.rows());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return x(a, col) > x(b, col); });
  return idx;
}

}  // namespace detail

/**
 * Aggregates n feature rows into one vector.
 *   mean:     column means
 *   max:      column maxima (lowest row index wins ties)
 *   gpo-lite: per column, values sorted descending and combined with the
 *             coefficient vector interpolated to length n, renormalized to
 *             sum to one
 */
inline Vec pool(const Mat &x, Pooling kind, std::span<const double> coeffs,
                PoolTrace *trace = nullptr, const PoolTrace *frozen = nullptr) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n == 0) throw Error("pool: no feature rows");
  Vec out(d, 0.0);
  switch (kind) {
    case Pooling::Mean: {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out[c] += x(r, c);
      for (double &v : out) v /= static_cast<double>(n);
      return out;
    }
    case Pooling::Max:
    case Pooling::GpoLite: {
      PoolTrace local;
      PoolTrace &tr = trace ? *trace : local;
      tr.order.resize(d);
      for (std::size_t c = 0; c < d; ++c) {
        tr.order[c] = frozen ? frozen->order.at(c) : detail::descending_order(x, c);
      }
      if (kind == Pooling::Max) {
        for (std::size_t c = 0; c < d; ++c) out[c] = x(tr.order[c][0], c);
        return out;
      }
      if (coeffs.empty()) throw Error("pool: gpo-lite needs a coefficient vector");
      tr.raw_weights = detail::interpolate_coeffs(coeffs, n);
      tr.weight_sum = std::accumulate(tr.raw_weights.begin(), tr.raw_weights.end(), 0.0);
      if (std::abs(tr.weight_sum) < 1e-12) throw NumericError("pool: gpo-lite coefficients sum to zero");
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < n; ++r) s += tr.raw_weights[r] * x(tr.order[c][r], c);
        out[c] = s / tr.weight_sum;
      }
      return out;
    }
  }
  throw Error("pool: unknown pooling kind");
}

/// Accumulates d(out) into d(x) and, for gpo-lite, into d(coeffs).
inline void pool_backward(const Mat &x, Pooling kind, const PoolTrace &tr, std::span<const double> d_out,
                          Mat &d_x, std::span<double> d_coeffs) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  switch (kind) {
    case Pooling::Mean:
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) d_x(r, c) += d_out[c] / static_cast<double>(n);
      return;
    case Pooling::Max:
      for (std::size_t c = 0; c < d; ++c) d_x(tr.order[c][0], c) += d_out[c];
      return;
    case Pooling::GpoLite: {
      Vec d_raw(n, 0.0);
      for (std::size_t c = 0; c < d; ++c) {
        double out = 0.0;
        for (std::size_t r = 0; r < n; ++r) out += tr.raw_weights[r] * x(tr.order[c][r], c);
        out /= tr.weight_sum;
        for (std::size_t r = 0; r < n; ++r) {
          const double v = x(tr.order[c][r], c);
          d_x(tr.order[c][r], c) += d_out[c] * tr.raw_weights[r] / tr.weight_sum;
          d_raw[r] += d_out[c] * (v - out) / tr.weight_sum;
        }
      }
      detail::interpolate_coeffs_backward(d_raw, d_coeffs);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// L2 normalization

inline constexpr double kNormEps = 1e-12;

inline Vec l2_normalize(std::span<const double> x, double *norm_out = nullptr) {
  const double n = std::max(l2_norm(x), kNormEps);
  if (norm_out) *norm_out = n;
  Vec y(x.begin(), x.end());
  for (double &v : y) v /= n;
  return y;
}

/// Gradient of y = x / max(|x|, eps) given y, the clamped norm and dy.
inline Vec l2_normalize_backward(std::span<const double> y, double norm, std::span<const double> dy) {
  Vec dx(dy.begin(), dy.end());
  if (norm > kNormEps) {
    const double proj = dot(y, dy);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] -= y[i] * proj;
  }
  for (double &v : dx) v /= norm;
  return dx;
}

// ---------------------------------------------------------------------------
// Encoders

struct ImageTrace {
  Mat pre;                           // N x hidden, before ReLU
  Mat hidden;                        // N x hidden, after ReLU
  std::vector<std::uint8_t> relu_on; // N*hidden
  Mat views;                         // N x (K*d_emb), second layer output
  std::vector<PoolTrace> pools;      // K
  Vec norms;                         // K
  Mat out;                           // K x d_emb
};

struct TextTrace {
  Mat proj;  // M x d_emb
  PoolTrace pool;
  double norm = 0.0;
  Vec out;
};

namespace detail {

inline Mat view_slice(const Mat &views, std::size_t k, std::size_t d_emb) {
  Mat s(views.rows(), d_emb);
  for (std::size_t r = 0; r < views.rows(); ++r)
    for (std::size_t c = 0; c < d_emb; ++c) s(r, c) = views(r, k * d_emb + c);
  return s;
}

}  // namespace detail

/// Returns the K x d_emb matrix of unit-norm view embeddings.
inline Mat encode_image(const Mat &regions, const ModelParams &p, const ModelConfig &cfg,
                        ImageTrace *trace = nullptr, const ImageTrace *frozen = nullptr) {
  const std::size_t N = regions.rows();
  if (N == 0) throw Error("encode_image: image has no regions");
  if (regions.cols() != cfg.d1) {
    throw Error("encode_image: region dim " + std::to_string(regions.cols()) + " != d1 " + std::to_string(cfg.d1));
  }
  ImageTrace local;
  ImageTrace &tr = trace ? *trace : local;
  const std::size_t H = cfg.hidden;
  const std::size_t KD = cfg.K * cfg.d_emb;

  tr.pre = Mat(N, H);
  tr.hidden = Mat(N, H);
  tr.relu_on.assign(N * H, 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t h = 0; h < H; ++h) {
      const double a = dot(p.W1.row(h), regions.row(n)) + p.b1[h];
      tr.pre(n, h) = a;
      const bool on = frozen ? frozen->relu_on[n * H + h] != 0 : a > 0.0;
      tr.relu_on[n * H + h] = on;
      tr.hidden(n, h) = on ? a : 0.0;
    }
  }
  tr.views = Mat(N, KD);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < KD; ++o) tr.views(n, o) = dot(p.W2.row(o), tr.hidden.row(n)) + p.b2[o];

  tr.pools.assign(cfg.K, {});
  tr.norms.assign(cfg.K, 0.0);
  tr.out = Mat(cfg.K, cfg.d_emb);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const Mat slice = detail::view_slice(tr.views, k, cfg.d_emb);
    const Vec pooled = pool(slice, cfg.pooling, p.pool_img, &tr.pools[k], frozen ? &frozen->pools[k] : nullptr);
    const Vec y = l2_normalize(pooled, &tr.norms[k]);
    std::copy(y.begin(), y.end(), tr.out.row(k).begin());
  }
  return tr.out;
}

/// Returns the unit-norm caption embedding.
inline Vec encode_text(const Mat &tokens, const ModelParams &p, const ModelConfig &cfg,
                       TextTrace *trace = nullptr, const TextTrace *frozen = nullptr) {
  const std::size_t M = tokens.rows();
  if (M == 0) throw Error("encode_text: caption has no tokens");
  if (tokens.cols() != cfg.d2) {
    throw Error("encode_text: token dim " + std::to_string(tokens.cols()) + " != d2 " + std::to_string(cfg.d2));
  }
  TextTrace local;
  TextTrace &tr = trace ? *trace : local;
  tr.proj = Mat(M, cfg.d_emb);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t o = 0; o < cfg.d_emb; ++o) tr.proj(m, o) = dot(p.Wt.row(o), tokens.row(m)) + p.bt[o];
  const Vec pooled = pool(tr.proj, cfg.pooling, p.pool_txt, &tr.pool, frozen ? &frozen->pool : nullptr);
  tr.out = l2_normalize(pooled, &tr.norm);
  return tr.out;
}

inline void backward_image(const Mat &regions, const ImageTrace &tr, const Mat &d_out, const ModelParams &p,
                           const ModelConfig &cfg, Gradients &g) {
  const std::size_t N = regions.rows();
  const std::size_t H = cfg.hidden;
  const std::size_t D = cfg.d_emb;
  Mat d_views(N, cfg.K * D);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const Vec d_pooled = l2_normalize_backward(tr.out.row(k), tr.norms[k], d_out.row(k));
    const Mat slice = detail::view_slice(tr.views, k, D);
    Mat d_slice(N, D);
    pool_backward(slice, cfg.pooling, tr.pools[k], d_pooled, d_slice, g.pool_img);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < D; ++c) d_views(n, k * D + c) = d_slice(n, c);
  }
  for (std::size_t n = 0; n < N; ++n) {
    Vec d_hidden(H, 0.0);
    for (std::size_t o = 0; o < cfg.K * D; ++o) {
      const double dv = d_views(n, o);
      if (dv == 0.0) continue;
      g.b2[o] += dv;
      for (std::size_t h = 0; h < H; ++h) {
        g.W2(o, h) += dv * tr.hidden(n, h);
        d_hidden[h] += dv * p.W2(o, h);
      }
    }
    for (std::size_t h = 0; h < H; ++h) {
      if (!tr.relu_on[n * H + h]) continue;
      const double dp = d_hidden[h];
      g.b1[h] += dp;
      for (std::size_t c = 0; c < cfg.d1; ++c) g.W1(h, c) += dp * regions(n, c);
    }
  }
}

inline void backward_text(const Mat &tokens, const TextTrace &tr, std::span<const double> d_out,
                          const ModelConfig &cfg, Gradients &g) {
  const std::size_t M = tokens.rows();
  const Vec d_pooled = l2_normalize_backward(tr.out, tr.norm, d_out);
  Mat d_proj(M, cfg.d_emb);
  pool_backward(tr.proj, cfg.pooling, tr.pool, d_pooled, d_proj, g.pool_txt);
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t o = 0; o < cfg.d_emb; ++o) {
      const double dp = d_proj(m, o);
      g.bt[o] += dp;
      for (std::size_t c = 0; c < cfg.d2; ++c) g.Wt(o, c) += dp * tokens(m, c);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "UAMP" | version u32 = 1 | d1 d2 d_emb K hidden u32 | pooling u8 |
// gpo_points u32 | flattened parameters as float64

inline constexpr std::array<char, 4> kCheckpointMagic = {'U', 'A', 'M', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline std::vector<std::uint8_t> encode_checkpoint(const ModelConfig &cfg, const ModelParams &params) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t v : {cfg.d1, cfg.d2, cfg.d_emb, cfg.K, cfg.hidden})
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(cfg.pooling));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.gpo_points));
  if (!params.same_shape(ModelParams::zeros(cfg))) throw Error("encode_checkpoint: params do not match config");
  for (double x : params.flatten()) detail::put_le<double>(out, x);
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string &what = "checkpoint") {
  detail::ByteReader in(bytes, what);
  in.expect_magic(kCheckpointMagic);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config.d1 = in.get<std::uint32_t>("d1");
  ck.config.d2 = in.get<std::uint32_t>("d2");
  ck.config.d_emb = in.get<std::uint32_t>("d_emb");
  ck.config.K = in.get<std::uint32_t>("K");
  ck.config.hidden = in.get<std::uint32_t>("hidden");
  const auto pooling = in.get<std::uint8_t>("pooling");
  if (pooling > 2) in.fail("unknown pooling " + std::to_string(pooling));
  ck.config.pooling = static_cast<Pooling>(pooling);
  ck.config.gpo_points = in.get<std::uint32_t>("gpo_points");
  try {
    ck.config.validate();
  } catch (const Error &e) {
    in.fail(e.what());
  }
  ck.params = ModelParams::zeros(ck.config);
  const std::size_t n = ck.params.num_values();
  if (in.remaining() != n * sizeof(double)) {
    in.fail("expected " + std::to_string(n * sizeof(double)) + " parameter bytes, found " +
            std::to_string(in.remaining()));
  }
  Vec flat(n);
  for (double &x : flat) x = in.get<double>("parameter");
  ck.params.unflatten(flat);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path &path, const ModelConfig &cfg, const ModelParams &params) {
  detail::write_file(path, encode_checkpoint(cfg, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace uamvse
