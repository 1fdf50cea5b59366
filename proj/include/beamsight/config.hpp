#pragma once

// Experiment configuration shared by every subcommand. Stored as JSON with an
// explicit schema version; unknown keys are rejected so typos surface early.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "beamsight/dataset.hpp"
#include "beamsight/error.hpp"
#include "beamsight/resnet.hpp"
#include "beamsight/synth.hpp"
#include "beamsight/trainer.hpp"

namespace beamsight {

inline constexpr int kConfigSchemaVersion = 1;

struct PathsConfig {
  std::string corpus;      // image corpus root (hazard/, nonhazard/, masks/)
  std::string out;         // output root
  std::string checkpoint;  // model to evaluate or attribute
  std::string beam_map;    // stats input
  std::string manifest;    // preprocess without pixels
};

struct GenerateConfig {
  std::size_t n_hazard = 100;
  std::size_t n_safe = 150;
};

struct SourceTaskConfig {
  std::size_t per_class = 150;
  HParams hparams{16, 6, 0.01, 0.9, 0, true};
};

struct AttributionConfig {
  std::size_t steps = 64;
  double tolerance = 0.01;   // completeness, as a fraction of |F(x) - F(baseline)|
  std::size_t dilation = 2;  // beam mask dilation, pixels
  int target = -1;           // class to explain; -1 explains the predicted class
  std::size_t limit = 0;     // 0 attributes every validation tile
};

struct StatsConfig {
  double radius = 9.0;
  bool paired = false;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 uses every hardware thread
  bool deterministic = false;
  PathsConfig paths;
  GenerateConfig generate;
  SynthConfig synth;
  SplitSpec split;
  ModelConfig model;
  HParams hparams;
  SourceTaskConfig source;
  AttributionConfig attribution;
  StatsConfig stats;

  /// Propagates the master seed and the worker policy into every stage.
  void resolve() {
    synth.seed = seed;
    split.seed = seed;
    hparams.seed = seed;
    source.hparams.seed = seed;
    if (deterministic) workers = 1;
    if (workers == 1) deterministic = true;
  }

  void validate() const {
    if (schema_version != kConfigSchemaVersion)
      fail(ErrorKind::InvalidConfig, "unsupported config schema_version " + std::to_string(schema_version));
    synth.validate();
    model.validate();
    hparams.validate();
    source.hparams.validate();
    if (!(split.val_fraction > 0.0 && split.val_fraction < 1.0))
      fail(ErrorKind::InvalidConfig, "split.val_fraction must lie in (0, 1)");
    if (attribution.steps < 1) fail(ErrorKind::InvalidConfig, "attribution.steps must be >= 1");
    if (!(attribution.tolerance > 0.0)) fail(ErrorKind::InvalidConfig, "attribution.tolerance must be positive");
    if (attribution.target >= static_cast<int>(model.num_classes))
      fail(ErrorKind::InvalidConfig, "attribution.target exceeds num_classes");
    if (!(stats.radius > 0.0)) fail(ErrorKind::InvalidConfig, "stats.radius must be positive");
    if (source.per_class < 1) fail(ErrorKind::InvalidConfig, "source.per_class must be positive");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::InvalidConfig, where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) fail(ErrorKind::InvalidConfig, "unknown config key " + where + it.key());
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = {{"val_fraction", s.val_fraction}, {"stratify_by_label", s.stratify_by_label},
       {"group_by_source", s.group_by_source}};
}

inline void from_json(const nlohmann::json& j, SplitSpec& s) {
  detail::reject_unknown(j, {"val_fraction", "stratify_by_label", "group_by_source", "seed"}, "split.");
  s.val_fraction = j.value("val_fraction", s.val_fraction);
  s.stratify_by_label = j.value("stratify_by_label", s.stratify_by_label);
  s.group_by_source = j.value("group_by_source", s.group_by_source);
}

inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json synth = c.synth;
  synth.erase("seed");
  nlohmann::json hp = c.hparams;
  hp.erase("seed");
  nlohmann::json src_hp = c.source.hparams;
  src_hp.erase("seed");
  return {
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"workers", c.workers},
      {"deterministic", c.deterministic},
      {"paths",
       {{"corpus", c.paths.corpus},
        {"out", c.paths.out},
        {"checkpoint", c.paths.checkpoint},
        {"beam_map", c.paths.beam_map},
        {"manifest", c.paths.manifest}}},
      {"generate", {{"n_hazard", c.generate.n_hazard}, {"n_safe", c.generate.n_safe}}},
      {"synth", synth},
      {"split", c.split},
      {"model", c.model},
      {"hparams", hp},
      {"source", {{"per_class", c.source.per_class}, {"hparams", src_hp}}},
      {"attribution",
       {{"steps", c.attribution.steps},
        {"tolerance", c.attribution.tolerance},
        {"dilation", c.attribution.dilation},
        {"target", c.attribution.target},
        {"limit", c.attribution.limit}}},
      {"stats", {{"radius", c.stats.radius}, {"paired", c.stats.paired}}},
  };
}

/// Missing keys keep their defaults.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::reject_unknown;
  RunConfig c;
  try {
    reject_unknown(j, {"schema_version", "seed", "workers", "deterministic", "paths", "generate", "synth", "split",
                       "model", "hparams", "source", "attribution", "stats"},
                   "");
    c.schema_version = j.value("schema_version", c.schema_version);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.deterministic = j.value("deterministic", c.deterministic);
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      reject_unknown(p, {"corpus", "out", "checkpoint", "beam_map", "manifest"}, "paths.");
      c.paths.corpus = p.value("corpus", c.paths.corpus);
      c.paths.out = p.value("out", c.paths.out);
      c.paths.checkpoint = p.value("checkpoint", c.paths.checkpoint);
      c.paths.beam_map = p.value("beam_map", c.paths.beam_map);
      c.paths.manifest = p.value("manifest", c.paths.manifest);
    }
    if (j.contains("generate")) {
      const auto& g = j["generate"];
      reject_unknown(g, {"n_hazard", "n_safe"}, "generate.");
      c.generate.n_hazard = g.value("n_hazard", c.generate.n_hazard);
      c.generate.n_safe = g.value("n_safe", c.generate.n_safe);
    }
    if (j.contains("synth")) {
      reject_unknown(j["synth"],
                     {"image_size", "beam_count_mean", "depth_range", "principal_orientation_deg", "orientation_sd_deg",
                      "noise_amplitude", "noise_correlation", "seed"},
                     "synth.");
      c.synth = j["synth"].get<SynthConfig>();
    }
    if (j.contains("split")) c.split = j["split"].get<SplitSpec>();
    if (j.contains("model")) {
      reject_unknown(j["model"],
                     {"input_channels", "input_size", "stem_channels", "blocks_per_stage", "num_classes", "dropout_p"},
                     "model.");
      c.model = j["model"].get<ModelConfig>();
    }
    const std::set<std::string> hp_keys{"batch_size", "epochs", "learning_rate", "momentum", "seed", "augment"};
    if (j.contains("hparams")) {
      reject_unknown(j["hparams"], hp_keys, "hparams.");
      c.hparams = j["hparams"].get<HParams>();
    }
    if (j.contains("source")) {
      const auto& s = j["source"];
      reject_unknown(s, {"per_class", "hparams"}, "source.");
      c.source.per_class = s.value("per_class", c.source.per_class);
      if (s.contains("hparams")) {
        reject_unknown(s["hparams"], hp_keys, "source.hparams.");
        HParams h = c.source.hparams;
        from_json(s["hparams"], h);
        c.source.hparams = h;
      }
    }
    if (j.contains("attribution")) {
      const auto& a = j["attribution"];
      reject_unknown(a, {"steps", "tolerance", "dilation", "target", "limit"}, "attribution.");
      c.attribution.steps = a.value("steps", c.attribution.steps);
      c.attribution.tolerance = a.value("tolerance", c.attribution.tolerance);
      c.attribution.dilation = a.value("dilation", c.attribution.dilation);
      c.attribution.target = a.value("target", c.attribution.target);
      c.attribution.limit = a.value("limit", c.attribution.limit);
    }
    if (j.contains("stats")) {
      const auto& s = j["stats"];
      reject_unknown(s, {"radius", "paired"}, "stats.");
      c.stats.radius = s.value("radius", c.stats.radius);
      c.stats.paired = s.value("paired", c.stats.paired);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IOError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot write " + path.string());
  out << config_json(c).dump(2) << '\n';
}

}  // namespace beamsight
