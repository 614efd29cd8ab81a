// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Paired region/token feature datasets: synthetic generation, the
 *         UAMV binary feature format, JSON manifests and batch iteration.
 *
 * Feature file layout (little-endian):
 *
 *   "UAMV" | version u32 = 1 | kind u8 | item_count u64 | feature_dim u32
 *   then per item: n_vectors u32, n_vectors * feature_dim float32
 *
 * kind 0 holds image region features, kind 1 caption token features.
 */
#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string_view>

#include <json.hpp>

#include "uamvse/core.hpp"

namespace uamvse {

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  const std::vector<std::size_t> &get(std::string_view name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error("unknown split '" + std::string(name) + "'");
  }

  bool operator==(const Splits &) const = default;
};

struct Dataset {
  std::vector<Mat> images;    // N_i x d1 region features
  std::vector<Mat> captions;  // M_j x d2 token features
  std::vector<std::size_t> caption_to_image;
  Splits splits;

  bool operator==(const Dataset &) const = default;

  std::size_t region_dim() const { return images.empty() ? 0 : images.front().cols(); }
  std::size_t token_dim() const { return captions.empty() ? 0 : captions.front().cols(); }

  /// Caption indices of every image, ascending.
  std::vector<std::vector<std::size_t>> image_to_captions() const {
    std::vector<std::vector<std::size_t>> out(images.size());
    for (std::size_t c = 0; c < caption_to_image.size(); ++c) out[caption_to_image[c]].push_back(c);
    return out;
  }

  void validate() const {
    if (caption_to_image.size() != captions.size()) {
      throw DataError("dataset: " + std::to_string(captions.size()) + " captions but " +
                      std::to_string(caption_to_image.size()) + " caption_to_image entries");
    }
    for (std::size_t c = 0; c < caption_to_image.size(); ++c) {
      if (caption_to_image[c] >= images.size()) {
        throw DataError("dataset: caption " + std::to_string(c) + " maps to missing image " +
                        std::to_string(caption_to_image[c]));
      }
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].cols() != region_dim()) {
        throw DataError("dataset: image " + std::to_string(i) + " has inconsistent feature dim");
      }
    }
    for (std::size_t c = 0; c < captions.size(); ++c) {
      if (captions[c].cols() != token_dim()) {
        throw DataError("dataset: caption " + std::to_string(c) + " has inconsistent feature dim");
      }
    }
    const auto per_image = image_to_captions();
    for (std::size_t i = 0; i < per_image.size(); ++i) {
      if (per_image[i].empty()) throw DataError("dataset: image " + std::to_string(i) + " has no caption");
    }
    std::set<std::size_t> seen;
    for (const auto *split : {&splits.train, &splits.val, &splits.test}) {
      for (std::size_t i : *split) {
        if (i >= images.size()) throw DataError("dataset: split references missing image " + std::to_string(i));
        if (!seen.insert(i).second) throw DataError("dataset: image " + std::to_string(i) + " is in two splits");
      }
    }
  }

  /// Sub-dataset restricted to the images of one split, re-indexed from 0.
  Dataset subset(const std::vector<std::size_t> &image_ids) const {
    Dataset out;
    std::map<std::size_t, std::size_t> remap;
    for (std::size_t i : image_ids) {
      remap[i] = out.images.size();
      out.images.push_back(images.at(i));
    }
    for (std::size_t c = 0; c < captions.size(); ++c) {
      auto it = remap.find(caption_to_image[c]);
      if (it == remap.end()) continue;
      out.captions.push_back(captions[c]);
      out.caption_to_image.push_back(it->second);
    }
    return out;
  }
};

struct SynthConfig {
  std::size_t num_images = 200;
  std::size_t captions_per_image = 5;
  std::size_t latent_dim = 16;
  std::size_t d1 = 32;
  std::size_t d2 = 24;
  std::size_t regions_per_image = 8;
  std::size_t tokens_per_caption = 6;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  /// Zero a random subset of latent coordinates per caption.
  bool mask_captions = true;
  /// Fewest coordinates a caption mask keeps, as a fraction of latent_dim
  /// (at least one half).
  double min_keep_fraction = 0.5;
  /// Use identity maps instead of random ones; needs latent_dim == d1 == d2.
  bool identity_maps = false;

  void validate() const {
    if (num_images == 0 || captions_per_image == 0 || latent_dim == 0 || d1 == 0 || d2 == 0 ||
        regions_per_image == 0 || tokens_per_caption == 0) {
      throw Error("synth config: all counts and dims must be >= 1");
    }
    if (!(noise_sigma >= 0.0)) throw Error("synth config: noise_sigma must be >= 0");
    if (!(min_keep_fraction >= 0.5 && min_keep_fraction <= 1.0)) {
      throw Error("synth config: min_keep_fraction must lie in [0.5, 1]");
    }
    if (identity_maps && (latent_dim != d1 || latent_dim != d2)) {
      throw Error("synth config: identity_maps requires latent_dim == d1 == d2");
    }
  }
};

namespace detail {

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline Mat random_map(Rng &rng, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double &x : m.data()) x = rng.normal() * scale;
  return m;
}

inline Vec apply(const Mat &m, const Vec &z) {
  Vec out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), z);
  return out;
}

}  // namespace detail

/**
 * Region n of image i is A z_i + noise; every caption keeps a random subset
 * of z_i's coordinates (at least half) and maps it through B plus noise.
 * Values are rounded to float32 so the dataset survives the file format
 * bit-exactly.
 */
inline Dataset generate_synthetic(const SynthConfig &cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  Rng map_rng = root.split(1);
  Rng latent_rng = root.split(2);
  Rng region_rng = root.split(3);
  Rng caption_rng = root.split(4);

  const std::size_t L = cfg.latent_dim;
  Mat A = cfg.identity_maps ? Mat::identity(L) : detail::random_map(map_rng, cfg.d1, L);
  Mat B = cfg.identity_maps ? Mat::identity(L) : detail::random_map(map_rng, cfg.d2, L);

  Dataset ds;
  ds.images.reserve(cfg.num_images);
  const auto min_keep = std::max<std::size_t>(
      (L + 1) / 2, static_cast<std::size_t>(std::ceil(cfg.min_keep_fraction * static_cast<double>(L))));
  for (std::size_t i = 0; i < cfg.num_images; ++i) {
    Vec z(L);
    for (double &x : z) x = latent_rng.normal();

    const Vec clean = detail::apply(A, z);
    Mat regions(cfg.regions_per_image, cfg.d1);
    for (std::size_t n = 0; n < cfg.regions_per_image; ++n)
      for (std::size_t d = 0; d < cfg.d1; ++d)
        regions(n, d) = detail::to_f32(clean[d] + cfg.noise_sigma * region_rng.normal());
    ds.images.push_back(std::move(regions));

    for (std::size_t c = 0; c < cfg.captions_per_image; ++c) {
      Vec masked = z;
      if (cfg.mask_captions) {
        const std::size_t keep = min_keep + caption_rng.below(L - min_keep + 1);
        std::vector<std::size_t> order(L);
        std::iota(order.begin(), order.end(), 0);
        caption_rng.shuffle(order);
        for (std::size_t p = keep; p < L; ++p) masked[order[p]] = 0.0;
      }
      const Vec text_clean = detail::apply(B, masked);
      Mat tokens(cfg.tokens_per_caption, cfg.d2);
      for (std::size_t m = 0; m < cfg.tokens_per_caption; ++m)
        for (std::size_t d = 0; d < cfg.d2; ++d)
          tokens(m, d) = detail::to_f32(text_clean[d] + cfg.noise_sigma * caption_rng.normal());
      ds.captions.push_back(std::move(tokens));
      ds.caption_to_image.push_back(i);
    }
  }

  const std::size_t n_train = cfg.num_images * 8 / 10;
  const std::size_t n_val = cfg.num_images / 10;
  for (std::size_t i = 0; i < cfg.num_images; ++i) {
    if (i < n_train) ds.splits.train.push_back(i);
    else if (i < n_train + n_val) ds.splits.val.push_back(i);
    else ds.splits.test.push_back(i);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Binary feature files

enum class FeatureKind : std::uint8_t { ImageRegions = 0, TextTokens = 1 };

struct FeatureFile {
  FeatureKind kind = FeatureKind::ImageRegions;
  std::uint32_t feature_dim = 0;
  std::vector<Mat> items;
};

inline constexpr std::array<char, 4> kFeatureMagic = {'U', 'A', 'M', 'V'};
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t> &out, T value) {
  std::array<std::uint8_t, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

/// Bounds-checked little-endian reader; errors carry the byte offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get(const char *field) {
    if (bytes_.size() - pos_ < sizeof(T)) {
      fail(std::string("truncated while reading ") + field);
    }
    std::array<std::uint8_t, sizeof(T)> buf;
    std::memcpy(buf.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf.begin(), buf.end());
    T value;
    std::memcpy(&value, buf.data(), sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  void expect_magic(const std::array<char, 4> &magic) {
    if (bytes_.size() < 4 || std::memcmp(bytes_.data(), magic.data(), 4) != 0) fail("bad magic");
    pos_ += 4;
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  [[noreturn]] void fail(const std::string &msg) const {
    throw DataError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path &path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

/// Serializes items; feature_dim is taken from the items when there are any.
inline std::vector<std::uint8_t> encode_features(FeatureKind kind, std::span<const Mat> items,
                                                 std::uint32_t feature_dim = 0) {
  if (!items.empty()) feature_dim = static_cast<std::uint32_t>(items.front().cols());
  std::vector<std::uint8_t> out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_le<std::uint32_t>(out, kFeatureVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(kind));
  detail::put_le<std::uint64_t>(out, items.size());
  detail::put_le<std::uint32_t>(out, feature_dim);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Mat &m = items[i];
    if (m.cols() != feature_dim) {
      throw DataError("encode_features: item " + std::to_string(i) + " has dim " +
                      std::to_string(m.cols()) + ", expected " + std::to_string(feature_dim));
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    for (double x : m.data()) detail::put_le<float>(out, static_cast<float>(x));
  }
  return out;
}

inline FeatureFile decode_features(std::span<const std::uint8_t> bytes,
                                   const std::string &what = "feature file") {
  detail::ByteReader in(bytes, what);
  in.expect_magic(kFeatureMagic);
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFeatureVersion) in.fail("unsupported version " + std::to_string(version));
  FeatureFile file;
  const auto kind = in.get<std::uint8_t>("kind");
  if (kind > 1) in.fail("unknown kind " + std::to_string(kind));
  file.kind = static_cast<FeatureKind>(kind);
  const auto count = in.get<std::uint64_t>("item_count");
  file.feature_dim = in.get<std::uint32_t>("feature_dim");
  // Each item needs at least its 4-byte row count.
  if (count > in.remaining() / 4) in.fail("item_count " + std::to_string(count) + " exceeds file size");
  file.items.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto n = in.get<std::uint32_t>("n_vectors");
    const std::uint64_t values = static_cast<std::uint64_t>(n) * file.feature_dim;
    if (values > in.remaining() / sizeof(float)) in.fail("truncated item " + std::to_string(i));
    Mat m(n, file.feature_dim);
    for (double &x : m.data()) x = static_cast<double>(in.get<float>("value"));
    file.items.push_back(std::move(m));
  }
  if (in.remaining() != 0) in.fail("trailing bytes");
  return file;
}

inline void save_features(const std::filesystem::path &path, FeatureKind kind,
                          std::span<const Mat> items, std::uint32_t feature_dim = 0) {
  detail::write_file(path, encode_features(kind, items, feature_dim));
}

inline FeatureFile load_features(const std::filesystem::path &path) {
  return decode_features(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Manifest

/// Writes images.uamv, captions.uamv and manifest.json into dir.
inline void save_dataset(const std::filesystem::path &dir, const Dataset &ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  save_features(dir / "images.uamv", FeatureKind::ImageRegions, ds.images);
  save_features(dir / "captions.uamv", FeatureKind::TextTokens, ds.captions);
  nlohmann::json manifest = {
      {"images", "images.uamv"},
      {"captions", "captions.uamv"},
      {"caption_to_image", ds.caption_to_image},
      {"splits", {{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}}},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw DataError("cannot write manifest in " + dir.string());
}

/// Accepts a manifest path or a directory containing manifest.json.
/// Feature paths in the manifest are resolved relative to its directory.
inline Dataset load_dataset(const std::filesystem::path &where) {
  const auto manifest_path =
      std::filesystem::is_directory(where) ? where / "manifest.json" : where;
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto base = manifest_path.parent_path();
  Dataset ds;
  try {
    auto images = load_features(base / j.at("images").get<std::string>());
    auto captions = load_features(base / j.at("captions").get<std::string>());
    if (images.kind != FeatureKind::ImageRegions) throw DataError("manifest: images file has text kind");
    if (captions.kind != FeatureKind::TextTokens) throw DataError("manifest: captions file has image kind");
    ds.images = std::move(images.items);
    ds.captions = std::move(captions.items);
    ds.caption_to_image = j.at("caption_to_image").get<std::vector<std::size_t>>();
    const auto &splits = j.at("splits");
    ds.splits.train = splits.value("train", std::vector<std::size_t>{});
    ds.splits.val = splits.value("val", std::vector<std::size_t>{});
    ds.splits.test = splits.value("test", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception &e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

struct Pair {
  std::size_t image;
  std::size_t caption;
  bool operator==(const Pair &) const = default;
};

using Batch = std::vector<Pair>;

/**
 * Shuffles the split's images with a stream keyed on (seed, epoch) and cuts
 * them into batches of batch_size, pairing each image with one of its
 * captions drawn from the same stream. A short final batch is dropped.
 */
inline std::vector<Batch> batch_iter(const Dataset &ds, std::string_view split,
                                     std::size_t batch_size, std::uint64_t seed,
                                     std::uint64_t epoch) {
  if (batch_size < 2) throw Error("batch_iter: batch_size must be >= 2");
  std::vector<std::size_t> order = ds.splits.get(split);
  Rng rng = Rng(seed).split(0xBA7C4000ULL + epoch);
  rng.shuffle(order);
  const auto per_image = ds.image_to_captions();
  std::vector<Batch> batches;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    Batch b;
    b.reserve(batch_size);
    for (std::size_t p = start; p < start + batch_size; ++p) {
      const auto &caps = per_image.at(order[p]);
      b.push_back({order[p], caps[rng.below(caps.size())]});
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace uamvse
