// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Flat JSON run configuration shared by every CLI command. Unknown
 *         keys are rejected; key=value overrides are applied after the file.
 */
#pragma once

#include <functional>
#include <sstream>

#include "uamvse/training.hpp"

namespace uamvse {

struct RunConfig {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  NormalizationConfig norm;
  std::string data_manifest;
  std::string run_dir;
};

struct ConfigField {
  std::string name;
  std::string help;
  std::function<void(RunConfig &, const nlohmann::json &)> set;
  std::function<nlohmann::json(const RunConfig &)> get;
};

namespace detail {

template <typename T>
ConfigField field(std::string name, std::string help, T RunConfig::*section, auto member) {
  return {std::move(name), std::move(help),
          [section, member](RunConfig &c, const nlohmann::json &v) {
            (c.*section).*member = v.get<std::remove_reference_t<decltype((c.*section).*member)>>();
          },
          [section, member](const RunConfig &c) { return nlohmann::json((c.*section).*member); }};
}

template <typename T>
ConfigField enum_field(std::string name, std::string help, T RunConfig::*section, auto member, auto parse) {
  return {std::move(name), std::move(help),
          [section, member, parse](RunConfig &c, const nlohmann::json &v) {
            (c.*section).*member = parse(v.get<std::string>());
          },
          [section, member](const RunConfig &c) { return nlohmann::json(std::string(to_string((c.*section).*member))); }};
}

inline SpreadMode parse_spread(std::string_view s) {
  if (s == "std") return SpreadMode::StdDev;
  if (s == "variance") return SpreadMode::Variance;
  throw Error("unknown spread mode '" + std::string(s) + "'");
}

}  // namespace detail

inline std::string_view to_string(SpreadMode m) { return m == SpreadMode::StdDev ? "std" : "variance"; }

/// Every accepted key, in help order.
inline const std::vector<ConfigField> &config_fields() {
  using detail::enum_field;
  using detail::field;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back(field("num_images", "synthetic images", &RunConfig::synth, &SynthConfig::num_images));
    f.push_back(field("captions_per_image", "synthetic captions per image", &RunConfig::synth, &SynthConfig::captions_per_image));
    f.push_back(field("latent_dim", "synthetic latent dimension", &RunConfig::synth, &SynthConfig::latent_dim));
    f.push_back(field("regions_per_image", "synthetic regions per image", &RunConfig::synth, &SynthConfig::regions_per_image));
    f.push_back(field("tokens_per_caption", "synthetic tokens per caption", &RunConfig::synth, &SynthConfig::tokens_per_caption));
    f.push_back(field("noise_sigma", "synthetic feature noise std", &RunConfig::synth, &SynthConfig::noise_sigma));
    f.push_back(field("data_seed", "synthetic data seed", &RunConfig::synth, &SynthConfig::seed));
    f.push_back(field("mask_captions", "mask latent coordinates per caption", &RunConfig::synth, &SynthConfig::mask_captions));
    f.push_back(field("min_keep_fraction", "fewest latent coordinates a mask keeps (fraction)", &RunConfig::synth, &SynthConfig::min_keep_fraction));
    f.push_back(field("identity_maps", "identity feature maps (latent_dim == d1 == d2)", &RunConfig::synth, &SynthConfig::identity_maps));
    // d1/d2 are shared by the generator and the model
    f.push_back({"d1", "region feature dim",
                 [](RunConfig &c, const nlohmann::json &v) { c.synth.d1 = c.model.d1 = v.get<std::size_t>(); },
                 [](const RunConfig &c) { return nlohmann::json(c.synth.d1); }});
    f.push_back({"d2", "token feature dim",
                 [](RunConfig &c, const nlohmann::json &v) { c.synth.d2 = c.model.d2 = v.get<std::size_t>(); },
                 [](const RunConfig &c) { return nlohmann::json(c.synth.d2); }});
    f.push_back(field("d_emb", "embedding dim", &RunConfig::model, &ModelConfig::d_emb));
    f.push_back(field("K", "number of image views", &RunConfig::model, &ModelConfig::K));
    f.push_back(field("hidden", "image MLP hidden width", &RunConfig::model, &ModelConfig::hidden));
    f.push_back(enum_field("pooling", "mean | max | gpo-lite", &RunConfig::model, &ModelConfig::pooling, parse_pooling));
    f.push_back(field("gpo_points", "gpo-lite coefficient count", &RunConfig::model, &ModelConfig::gpo_points));
    f.push_back(field("epochs", "training epochs", &RunConfig::train, &TrainConfig::epochs));
    f.push_back(field("batch_size", "pairs per batch", &RunConfig::train, &TrainConfig::batch_size));
    f.push_back(field("lr0", "initial learning rate", &RunConfig::train, &TrainConfig::lr0));
    f.push_back(field("decay_every", "epochs between learning-rate decays", &RunConfig::train, &TrainConfig::decay_every));
    f.push_back(field("decay_factor", "learning-rate multiplier per decay", &RunConfig::train, &TrainConfig::decay_factor));
    f.push_back(enum_field("loss", "triplet | global-nll", &RunConfig::train, &TrainConfig::loss, parse_loss_kind));
    f.push_back(field("weighting", "uncertainty weighting of view losses", &RunConfig::train, &TrainConfig::weighting));
    f.push_back(enum_field("spread", "std | variance fed to the view softmax", &RunConfig::train, &TrainConfig::spread, detail::parse_spread));
    f.push_back(field("margin", "triplet margin", &RunConfig::train, &TrainConfig::margin));
    f.push_back(field("clip_norm", "global gradient-norm clip (0 disables)", &RunConfig::train, &TrainConfig::clip_norm));
    f.push_back(enum_field("optimizer", "adam | sgd", &RunConfig::train, &TrainConfig::optimizer, parse_optimizer));
    f.push_back(field("seed", "training seed (init + batching)", &RunConfig::train, &TrainConfig::seed));
    f.push_back(field("tau_col", "column softmax temperature", &RunConfig::norm, &NormalizationConfig::tau_col));
    f.push_back(field("tau_row", "row softmax temperature", &RunConfig::norm, &NormalizationConfig::tau_row));
    f.push_back(enum_field("order", "row-then-col | col-then-row | row-only | col-only | none", &RunConfig::norm,
                           &NormalizationConfig::order, parse_norm_order));
    f.push_back({"data_manifest", "dataset manifest path",
                 [](RunConfig &c, const nlohmann::json &v) { c.data_manifest = v.get<std::string>(); },
                 [](const RunConfig &c) { return nlohmann::json(c.data_manifest); }});
    f.push_back({"run_dir", "training output directory",
                 [](RunConfig &c, const nlohmann::json &v) { c.run_dir = v.get<std::string>(); },
                 [](const RunConfig &c) { return nlohmann::json(c.run_dir); }});
    return f;
  }();
  return fields;
}

inline void set_config_value(RunConfig &cfg, const std::string &key, const nlohmann::json &value) {
  for (const auto &f : config_fields()) {
    if (f.name != key) continue;
    try {
      f.set(cfg, value);
    } catch (const nlohmann::json::exception &e) {
      throw Error("config key '" + key + "': " + e.what());
    }
    return;
  }
  throw Error("unknown config key '" + key + "'");
}

inline void apply_config_json(RunConfig &cfg, const nlohmann::json &j) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  for (const auto &[key, value] : j.items()) set_config_value(cfg, key, value);
}

/// "key=value"; value is parsed as JSON when possible, else taken as a string.
inline void apply_override(RunConfig &cfg, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  set_config_value(cfg, key, value);
}

inline RunConfig load_run_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error("config " + path.string() + " is not valid JSON");
  RunConfig cfg;
  apply_config_json(cfg, j);
  return cfg;
}

inline nlohmann::json to_json(const RunConfig &cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto &f : config_fields()) j[f.name] = f.get(cfg);
  return j;
}

/// One line per key with its default, for --help.
inline std::string config_help() {
  const RunConfig defaults;
  std::ostringstream out;
  out << "Config keys (JSON object; defaults shown):\n";
  for (const auto &f : config_fields()) {
    out << "  " << f.name << " = " << f.get(defaults).dump() << "  (" << f.help << ")\n";
  }
  return out.str();
}

}  // namespace uamvse
