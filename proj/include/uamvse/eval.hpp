// SPDX-License-Identifier: Apache-2.0
/**
 * @file   eval.hpp
 * @brief  Bidirectional retrieval metrics on an images x captions score
 *         matrix: Recall@K, RSUM and median rank.
 *
 * Ranks are 1-based. Equal scores are ordered by ascending candidate index.
 * An image query succeeds at k when any of its captions ranks within k.
 */
#pragma once

#include <json.hpp>

#include "uamvse/core.hpp"

namespace uamvse {

struct RetrievalReport {
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double rsum = 0;
  double i2t_medr = 0, t2i_medr = 0;

  bool operator==(const RetrievalReport &) const = default;
};

namespace detail {

inline void check_mapping(const Mat &A, std::span<const std::size_t> caption_to_image) {
  if (caption_to_image.size() != A.cols()) {
    throw DataError("score matrix has " + std::to_string(A.cols()) + " captions but mapping has " +
                    std::to_string(caption_to_image.size()));
  }
  std::vector<std::uint8_t> has_caption(A.rows(), 0);
  for (std::size_t c = 0; c < caption_to_image.size(); ++c) {
    if (caption_to_image[c] >= A.rows()) {
      throw DataError("caption " + std::to_string(c) + " maps to missing image " +
                      std::to_string(caption_to_image[c]));
    }
    has_caption[caption_to_image[c]] = 1;
  }
  for (std::size_t i = 0; i < A.rows(); ++i) {
    if (!has_caption[i]) throw DataError("image " + std::to_string(i) + " has no caption");
  }
}

inline double recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) return 0.0;
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double median_rank(std::vector<std::size_t> ranks) {
  if (ranks.empty()) return 0.0;
  std::sort(ranks.begin(), ranks.end());
  const std::size_t n = ranks.size();
  const double med = n % 2 ? static_cast<double>(ranks[n / 2])
                           : 0.5 * static_cast<double>(ranks[n / 2 - 1] + ranks[n / 2]);
  return std::floor(med);
}

}  // namespace detail

/// Best rank of each image's own captions within its row.
inline std::vector<std::size_t> i2t_ranks(const Mat &A, std::span<const std::size_t> caption_to_image) {
  detail::check_mapping(A, caption_to_image);
  std::vector<std::size_t> best(A.rows(), std::numeric_limits<std::size_t>::max());
  for (std::size_t c = 0; c < A.cols(); ++c) {
    const std::size_t i = caption_to_image[c];
    const double s = A(i, c);
    std::size_t rank = 1;
    for (std::size_t o = 0; o < A.cols(); ++o)
      if (A(i, o) > s || (A(i, o) == s && o < c)) ++rank;
    best[i] = std::min(best[i], rank);
  }
  return best;
}

/// Rank of each caption's ground-truth image within its column.
inline std::vector<std::size_t> t2i_ranks(const Mat &A, std::span<const std::size_t> caption_to_image) {
  detail::check_mapping(A, caption_to_image);
  std::vector<std::size_t> ranks(A.cols());
  for (std::size_t c = 0; c < A.cols(); ++c) {
    const std::size_t g = caption_to_image[c];
    const double s = A(g, c);
    std::size_t rank = 1;
    for (std::size_t i = 0; i < A.rows(); ++i)
      if (A(i, c) > s || (A(i, c) == s && i < g)) ++rank;
    ranks[c] = rank;
  }
  return ranks;
}

inline double recall_i2t(const Mat &A, std::span<const std::size_t> caption_to_image, std::size_t k) {
  return detail::recall_from_ranks(i2t_ranks(A, caption_to_image), k);
}

inline double recall_t2i(const Mat &A, std::span<const std::size_t> caption_to_image, std::size_t k) {
  return detail::recall_from_ranks(t2i_ranks(A, caption_to_image), k);
}

inline RetrievalReport report(const Mat &A, std::span<const std::size_t> caption_to_image) {
  const auto ri = i2t_ranks(A, caption_to_image);
  const auto rt = t2i_ranks(A, caption_to_image);
  // k beyond the candidate count counts every query as a hit
  auto clamp_i = [&](std::size_t k) { return std::min(k, A.cols()); };
  auto clamp_t = [&](std::size_t k) { return std::min(k, A.rows()); };
  RetrievalReport r;
  r.i2t_r1 = detail::recall_from_ranks(ri, clamp_i(1));
  r.i2t_r5 = detail::recall_from_ranks(ri, clamp_i(5));
  r.i2t_r10 = detail::recall_from_ranks(ri, clamp_i(10));
  r.t2i_r1 = detail::recall_from_ranks(rt, clamp_t(1));
  r.t2i_r5 = detail::recall_from_ranks(rt, clamp_t(5));
  r.t2i_r10 = detail::recall_from_ranks(rt, clamp_t(10));
  r.rsum = r.i2t_r1 + r.i2t_r5 + r.i2t_r10 + r.t2i_r1 + r.t2i_r5 + r.t2i_r10;
  r.i2t_medr = detail::median_rank(ri);
  r.t2i_medr = detail::median_rank(rt);
  return r;
}

/// Averages reports over image folds (MS-COCO 5-fold style); each fold keeps
/// its images and their captions.
inline RetrievalReport report_folds(const Mat &A, std::span<const std::size_t> caption_to_image,
                                    const std::vector<std::vector<std::size_t>> &folds) {
  if (folds.empty()) throw Error("report_folds: no folds");
  RetrievalReport avg;
  for (const auto &fold : folds) {
    std::vector<std::size_t> local(A.rows(), std::numeric_limits<std::size_t>::max());
    for (std::size_t p = 0; p < fold.size(); ++p) local.at(fold[p]) = p;
    std::vector<std::size_t> cols;
    std::vector<std::size_t> mapping;
    for (std::size_t c = 0; c < caption_to_image.size(); ++c) {
      if (local.at(caption_to_image[c]) == std::numeric_limits<std::size_t>::max()) continue;
      cols.push_back(c);
      mapping.push_back(local[caption_to_image[c]]);
    }
    Mat sub(fold.size(), cols.size());
    for (std::size_t p = 0; p < fold.size(); ++p)
      for (std::size_t q = 0; q < cols.size(); ++q) sub(p, q) = A(fold[p], cols[q]);
    const auto r = report(sub, mapping);
    avg.i2t_r1 += r.i2t_r1; avg.i2t_r5 += r.i2t_r5; avg.i2t_r10 += r.i2t_r10;
    avg.t2i_r1 += r.t2i_r1; avg.t2i_r5 += r.t2i_r5; avg.t2i_r10 += r.t2i_r10;
    avg.i2t_medr += r.i2t_medr; avg.t2i_medr += r.t2i_medr;
  }
  const double n = static_cast<double>(folds.size());
  for (double *f : {&avg.i2t_r1, &avg.i2t_r5, &avg.i2t_r10, &avg.t2i_r1, &avg.t2i_r5, &avg.t2i_r10,
                    &avg.i2t_medr, &avg.t2i_medr})
    *f /= n;
  avg.rsum = avg.i2t_r1 + avg.i2t_r5 + avg.i2t_r10 + avg.t2i_r1 + avg.t2i_r5 + avg.t2i_r10;
  return avg;
}

inline nlohmann::json to_json(const RetrievalReport &r) {
  return {
      {"i2t", {{"r1", r.i2t_r1}, {"r5", r.i2t_r5}, {"r10", r.i2t_r10}, {"medr", r.i2t_medr}}},
      {"t2i", {{"r1", r.t2i_r1}, {"r5", r.t2i_r5}, {"r10", r.t2i_r10}, {"medr", r.t2i_medr}}},
      {"rsum", r.rsum},
  };
}

}  // namespace uamvse
