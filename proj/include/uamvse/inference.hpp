// SPDX-License-Identifier: Apache-2.0
/**
 * @file   inference.hpp
 * @brief  View-score aggregation and temperature-scaled softmax
 *         normalization of the images x captions similarity matrix, with an
 *         exhaustive temperature search on a validation matrix.
 */
#pragma once

#include <charconv>
#include <cstdio>
#include <sstream>

#include "uamvse/eval.hpp"
#include "uamvse/loss.hpp"
#include "uamvse/model.hpp"

namespace uamvse {

enum class NormOrder : std::uint8_t { RowThenCol, ColThenRow, RowOnly, ColOnly, None };

inline std::string_view to_string(NormOrder o) {
  switch (o) {
    case NormOrder::RowThenCol: return "row-then-col";
    case NormOrder::ColThenRow: return "col-then-row";
    case NormOrder::RowOnly: return "row-only";
    case NormOrder::ColOnly: return "col-only";
    case NormOrder::None: return "none";
  }
  return "?";
}

inline NormOrder parse_norm_order(std::string_view s) {
  for (auto o : {NormOrder::RowThenCol, NormOrder::ColThenRow, NormOrder::RowOnly, NormOrder::ColOnly, NormOrder::None})
    if (to_string(o) == s) return o;
  throw Error("unknown normalization order '" + std::string(s) + "'");
}

/// Every order, with "none" first so that it wins ties.
inline std::vector<NormOrder> all_norm_orders() {
  return {NormOrder::None, NormOrder::RowThenCol, NormOrder::ColThenRow, NormOrder::RowOnly, NormOrder::ColOnly};
}

struct NormalizationConfig {
  double tau_col = 20.0;
  double tau_row = 170.0;
  NormOrder order = NormOrder::RowThenCol;

  void validate() const {
    if (!(tau_col > 0.0) || !(tau_row > 0.0)) throw Error("normalization: temperatures must be > 0");
  }
  bool operator==(const NormalizationConfig &) const = default;
};

struct ScoreMatrix {
  Mat values;  // n_images x n_texts
  bool normalized = false;
};

/// Mean over views.
inline ScoreMatrix aggregate_scores(const SimilarityTensor &S) {
  if (S.views() == 0) throw Error("aggregate_scores: no views");
  ScoreMatrix A{Mat(S.n_images(), S.n_texts()), false};
  for (std::size_t k = 0; k < S.views(); ++k)
    for (std::size_t i = 0; i < S.n_images(); ++i)
      for (std::size_t j = 0; j < S.n_texts(); ++j) A.values(i, j) += S(k, i, j);
  const double inv_k = 1.0 / static_cast<double>(S.views());
  for (double &x : A.values.data()) x *= inv_k;
  return A;
}

namespace detail {

inline void softmax_rows(Mat &m, double tau) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const Vec r = softmax_scaled(m.row(i), tau);
    std::copy(r.begin(), r.end(), m.row(i).begin());
  }
}

inline void softmax_cols(Mat &m, double tau) {
  Vec col(m.rows());
  for (std::size_t j = 0; j < m.cols(); ++j) {
    for (std::size_t i = 0; i < m.rows(); ++i) col[i] = m(i, j);
    const Vec c = softmax_scaled(col, tau);
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) = c[i];
  }
}

}  // namespace detail

/// Column step: softmax over images of a(i,j)/tau_col for each text j.
/// Row step: softmax over texts of a(i,j)/tau_row for each image i.
inline ScoreMatrix normalize_matrix(const ScoreMatrix &A, const NormalizationConfig &cfg) {
  cfg.validate();
  if (A.values.rows() == 0 || A.values.cols() == 0) {
    throw Error("normalize_matrix: degenerate " + A.values.shape_str() + " matrix");
  }
  ScoreMatrix out{A.values, A.normalized};
  switch (cfg.order) {
    case NormOrder::RowThenCol:
      detail::softmax_rows(out.values, cfg.tau_row);
      detail::softmax_cols(out.values, cfg.tau_col);
      break;
    case NormOrder::ColThenRow:
      detail::softmax_cols(out.values, cfg.tau_col);
      detail::softmax_rows(out.values, cfg.tau_row);
      break;
    case NormOrder::RowOnly: detail::softmax_rows(out.values, cfg.tau_row); break;
    case NormOrder::ColOnly: detail::softmax_cols(out.values, cfg.tau_col); break;
    case NormOrder::None: return out;
  }
  out.normalized = true;
  return out;
}

/// 0.01 .. 200, log-spaced, plus the defaults 20 and 170.
inline std::vector<double> default_temperature_grid() {
  return {0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 170.0, 200.0};
}

struct GridSearchResult {
  NormalizationConfig config;
  double rsum = 0.0;
};

/**
 * Evaluates every (tau_row, tau_col, order) combination. Ties go to the
 * smaller tau_row, then the smaller tau_col, then the earlier order.
 */
inline GridSearchResult grid_search_temperatures(const ScoreMatrix &A_val, std::span<const std::size_t> caption_to_image,
                                                 std::vector<double> grid,
                                                 const std::vector<NormOrder> &orders = all_norm_orders()) {
  if (grid.empty()) throw Error("grid_search_temperatures: empty temperature grid");
  if (orders.empty()) throw Error("grid_search_temperatures: no normalization orders");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  GridSearchResult best;
  bool have = false;
  for (double tau_row : grid) {
    for (double tau_col : grid) {
      for (NormOrder order : orders) {
        const NormalizationConfig cfg{tau_col, tau_row, order};
        const double rsum = report(normalize_matrix(A_val, cfg).values, caption_to_image).rsum;
        if (!have || rsum > best.rsum) {
          best = {cfg, rsum};
          have = true;
        }
      }
    }
  }
  return best;
}

inline nlohmann::json to_json(const NormalizationConfig &c) {
  return {{"tau_row", c.tau_row}, {"tau_col", c.tau_col}, {"order", std::string(to_string(c.order))}};
}

inline NormalizationConfig normalization_from_json(const nlohmann::json &j) {
  NormalizationConfig c;
  for (const auto &[key, value] : j.items()) {
    if (key == "tau_row") c.tau_row = value.get<double>();
    else if (key == "tau_col") c.tau_col = value.get<double>();
    else if (key == "order") c.order = parse_norm_order(value.get<std::string>());
    else if (key != "rsum") throw Error("normalization config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// CSV score matrices: one row per image, one column per caption.

inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline void write_csv(std::ostream &out, const Mat &m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

inline Mat read_csv(std::istream &in) {
  Vec data;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t n = 0;
    std::size_t start = 0;
    while (true) {
      const std::size_t end = std::min(line.find(',', start), line.size());
      const char *first = line.data() + start;
      const char *last = line.data() + end;
      while (first < last && *first == ' ') ++first;
      while (last > first && last[-1] == ' ') --last;
      double v = 0.0;
      const auto res = std::from_chars(first, last, v);
      if (res.ec != std::errc() || res.ptr != last) {
        throw DataError("csv: bad number on line " + std::to_string(rows + 1) + ", field " + std::to_string(n + 1));
      }
      data.push_back(v);
      ++n;
      if (end == line.size()) break;
      start = end + 1;
    }
    if (rows == 0) cols = n;
    else if (n != cols) throw DataError("csv: line " + std::to_string(rows + 1) + " has " + std::to_string(n) + " fields, expected " + std::to_string(cols));
    ++rows;
  }
  return Mat(rows, cols, std::move(data));
}

inline void save_csv(const std::filesystem::path &path, const Mat &m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out, m);
}

inline Mat load_csv(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_csv(in);
}

// ---------------------------------------------------------------------------

/// Per-view similarities of every image against every caption of ds.
inline SimilarityTensor score_dataset(const Dataset &ds, const ModelParams &params, const ModelConfig &cfg) {
  std::vector<Mat> views;
  views.reserve(ds.images.size());
  for (const Mat &img : ds.images) views.push_back(encode_image(img, params, cfg));
  Mat texts(ds.captions.size(), cfg.d_emb);
  for (std::size_t c = 0; c < ds.captions.size(); ++c) {
    const Vec t = encode_text(ds.captions[c], params, cfg);
    std::copy(t.begin(), t.end(), texts.row(c).begin());
  }
  return similarity_tensor(views, texts);
}

}  // namespace uamvse
