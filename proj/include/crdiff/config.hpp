#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "crdiff/anneal.hpp"
#include "crdiff/evaluate.hpp"

namespace crdiff {

/// Thrown for malformed or inconsistent run configuration (CLI exit code 2).
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

struct RunConfig {
  struct Model {
    int width = 16;
    int train_h = 16;
    int train_w = 16;
    std::uint64_t seed = 1;
  } model;
  struct Schedule {
    int T = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
  } schedule;
  struct Train {
    int epochs = 30;
    int batch = 32;
    double lr = 0.5;
    double grad_clip = 1.0;
    int n_per_class = 512;
    double jitter = 0.25;
    std::uint64_t data_seed = 7;
    std::uint64_t seed = 3;
  } train;
  struct Prune {
    RatioConfig ratios{0.397, 0.434, 0.387};
    std::optional<double> uniform;
    RankingScope scope = RankingScope::per_tensor;
    RatioConfig effective() const { return uniform ? uniform_config(*uniform) : ratios; }
  } prune;
  struct Search {
    SAParams params;
    std::optional<std::string> class_filter;
    GridSize size{24, 24};
    int n_per_class = 1;
    std::string objective = "pattern";  // or "synthetic"
  } sa;
  PoaConfig poa;
  struct Eval {
    std::vector<GridSize> sizes{{12, 12}, {16, 16}, {20, 20}, {24, 24}};
    std::vector<std::string> classes{"checkerboard", "stripes", "radial-blob", "ring"};
    int n = 16;
    int ref_n = 256;
    std::uint64_t seed = 11;
    std::vector<double> sweep_grid{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5};
    GridSize sweep_size{24, 24};
  } eval;
  struct Paths {
    std::string checkpoint = "runs/default/model.ckpt";
    std::string mask = "runs/default/mask.bin";
    std::string reports = "runs/default";
  } paths;
};

namespace detail {

// Reads keys from one JSON object and remembers them so leftovers can be reported.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }
  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline GridSize size_from(const nlohmann::json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + ": sizes are strings like \"24x24\"");
  try {
    return parse_size(v.get<std::string>());
  } catch (const InputError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.model.width >= 8 && c.model.width % 4 == 0, "model.width must be a multiple of 4 and at least 8");
  try {
    unet::check_extents(c.model.train_h, c.model.train_w);
    validate(c.sa.params);
    validate(c.poa);
    validate(c.prune.effective());
    for (double r : c.eval.sweep_grid) validate_ratio(r, "eval.sweep_grid entry");
    for (const auto& name : c.eval.classes) parse_pattern(name);
    if (c.sa.class_filter) parse_pattern(*c.sa.class_filter);
  } catch (const ConfigError&) {
    throw;
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  need(c.schedule.T >= 2, "schedule.T must be >= 2");
  need(c.schedule.beta_start > 0 && c.schedule.beta_end < 1 && c.schedule.beta_start <= c.schedule.beta_end,
       "schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  need(c.train.epochs >= 0, "train.epochs must be >= 0");
  need(c.train.batch >= 1, "train.batch must be >= 1");
  need(c.train.lr >= 0, "train.lr must be >= 0");
  need(c.train.grad_clip >= 0, "train.grad_clip must be >= 0");
  need(c.train.n_per_class >= 1, "train.n_per_class must be >= 1");
  need(c.train.jitter >= 0 && c.train.jitter <= 0.5, "train.jitter must lie in [0, 0.5]");
  need(c.sa.n_per_class >= 1, "sa.n_per_class must be >= 1");
  need(c.sa.objective == "pattern" || c.sa.objective == "synthetic", "sa.objective must be pattern or synthetic");
  need(!c.eval.sizes.empty(), "eval.sizes must not be empty");
  need(!c.eval.classes.empty(), "eval.classes must not be empty");
  need(c.eval.n >= 16, "eval.n must be >= 16 (images per size and class)");
  need(c.eval.ref_n >= 16, "eval.ref_n must be >= 16");
  need(!c.eval.sweep_grid.empty(), "eval.sweep_grid must not be empty");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Section top(j, "<root>");
  if (top.has("model")) {
    detail::Section s(top.raw("model"), "model");
    s.get("width", c.model.width);
    s.get("train_h", c.model.train_h);
    s.get("train_w", c.model.train_w);
    s.get("seed", c.model.seed);
    s.finish();
  }
  if (top.has("schedule")) {
    detail::Section s(top.raw("schedule"), "schedule");
    s.get("T", c.schedule.T);
    s.get("beta_start", c.schedule.beta_start);
    s.get("beta_end", c.schedule.beta_end);
    s.finish();
  }
  if (top.has("train")) {
    detail::Section s(top.raw("train"), "train");
    s.get("epochs", c.train.epochs);
    s.get("batch", c.train.batch);
    s.get("lr", c.train.lr);
    s.get("grad_clip", c.train.grad_clip);
    s.get("n_per_class", c.train.n_per_class);
    s.get("jitter", c.train.jitter);
    s.get("data_seed", c.train.data_seed);
    s.get("seed", c.train.seed);
    s.finish();
  }
  if (top.has("prune")) {
    detail::Section s(top.raw("prune"), "prune");
    s.get("r_down", c.prune.ratios.r_down);
    s.get("r_mid", c.prune.ratios.r_mid);
    s.get("r_up", c.prune.ratios.r_up);
    if (s.has("uniform")) {
      if (s.has("r_down") || s.has("r_mid") || s.has("r_up"))
        throw ConfigError("prune: give either uniform or r_down/r_mid/r_up, not both");
      double u = 0;
      s.get("uniform", u);
      c.prune.uniform = u;
    }
    std::string scope = std::string(to_string(c.prune.scope));
    s.get("scope", scope);
    try {
      c.prune.scope = parse_ranking_scope(scope);
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
    s.finish();
  }
  if (top.has("sa")) {
    detail::Section s(top.raw("sa"), "sa");
    auto& p = c.sa.params;
    s.get("T_init", p.T_init);
    s.get("alpha", p.alpha);
    s.get("n_iter", p.n_iter);
    s.get("t_min", p.T_min);
    s.get("r_max", p.R_max);
    s.get("seed", p.seed);
    s.get("normalize", p.normalize);
    if (s.has("seeds")) {
      p.seeds.clear();
      const auto& list = s.raw("seeds");
      if (!list.is_array()) throw ConfigError("sa.seeds must be an array of ratio objects");
      for (const auto& e : list) {
        try {
          p.seeds.push_back(e.get<RatioConfig>());
        } catch (const std::exception& ex) {
          throw ConfigError(std::string("sa.seeds: ") + ex.what());
        }
      }
    }
    if (s.has("class_filter")) {
      const auto& v = s.raw("class_filter");
      if (!v.is_null()) {
        if (!v.is_string()) throw ConfigError("sa.class_filter must be a class name or null");
        c.sa.class_filter = v.get<std::string>();
      }
    }
    if (s.has("size")) c.sa.size = detail::size_from(s.raw("size"), "sa.size");
    s.get("n_per_class", c.sa.n_per_class);
    s.get("objective", c.sa.objective);
    s.finish();
  }
  if (top.has("poa")) {
    detail::Section s(top.raw("poa"), "poa");
    s.get("k", c.poa.k);
    std::string target = std::string(to_string(c.poa.target));
    s.get("target", target);
    try {
      c.poa.target = parse_poa_target(target);
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
    s.finish();
  }
  if (top.has("eval")) {
    detail::Section s(top.raw("eval"), "eval");
    if (s.has("sizes")) {
      const auto& v = s.raw("sizes");
      if (!v.is_array()) throw ConfigError("eval.sizes must be an array");
      c.eval.sizes.clear();
      for (const auto& e : v) c.eval.sizes.push_back(detail::size_from(e, "eval.sizes"));
    }
    s.get("classes", c.eval.classes);
    s.get("n", c.eval.n);
    s.get("ref_n", c.eval.ref_n);
    s.get("seed", c.eval.seed);
    s.get("sweep_grid", c.eval.sweep_grid);
    if (s.has("sweep_size")) c.eval.sweep_size = detail::size_from(s.raw("sweep_size"), "eval.sweep_size");
    s.finish();
  }
  if (top.has("paths")) {
    detail::Section s(top.raw("paths"), "paths");
    s.get("checkpoint", c.paths.checkpoint);
    s.get("mask", c.paths.mask);
    s.get("reports", c.paths.reports);
    s.finish();
  }
  top.finish();
  validate(c);
  return c;
}

/// Fully resolved document (every key present) with a fixed key order.
inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = {{"width", c.model.width}, {"train_h", c.model.train_h}, {"train_w", c.model.train_w},
                {"seed", c.model.seed}};
  j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["train"] = {{"epochs", c.train.epochs},       {"batch", c.train.batch},           {"lr", c.train.lr},
                {"grad_clip", c.train.grad_clip}, {"n_per_class", c.train.n_per_class}, {"jitter", c.train.jitter},
                {"data_seed", c.train.data_seed}, {"seed", c.train.seed}};
  nlohmann::ordered_json prune;
  if (c.prune.uniform) {
    prune["uniform"] = *c.prune.uniform;
  } else {
    prune["r_down"] = c.prune.ratios.r_down;
    prune["r_mid"] = c.prune.ratios.r_mid;
    prune["r_up"] = c.prune.ratios.r_up;
  }
  prune["scope"] = std::string(to_string(c.prune.scope));
  j["prune"] = prune;
  const auto& p = c.sa.params;
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (const auto& s : p.seeds) seeds.push_back({{"r_down", s.r_down}, {"r_mid", s.r_mid}, {"r_up", s.r_up}});
  j["sa"] = {{"T_init", p.T_init},
             {"alpha", p.alpha},
             {"n_iter", p.n_iter},
             {"t_min", p.T_min},
             {"r_max", p.R_max},
             {"seed", p.seed},
             {"normalize", p.normalize},
             {"seeds", seeds},
             {"class_filter", c.sa.class_filter ? nlohmann::ordered_json(*c.sa.class_filter) : nlohmann::ordered_json()},
             {"size", to_string(c.sa.size)},
             {"n_per_class", c.sa.n_per_class},
             {"objective", c.sa.objective}};
  j["poa"] = {{"k", c.poa.k}, {"target", std::string(to_string(c.poa.target))}};
  nlohmann::ordered_json sizes = nlohmann::ordered_json::array();
  for (auto s : c.eval.sizes) sizes.push_back(to_string(s));
  j["eval"] = {{"sizes", sizes},
               {"classes", c.eval.classes},
               {"n", c.eval.n},
               {"ref_n", c.eval.ref_n},
               {"seed", c.eval.seed},
               {"sweep_grid", c.eval.sweep_grid},
               {"sweep_size", to_string(c.eval.sweep_size)}};
  j["paths"] = {{"checkpoint", c.paths.checkpoint}, {"mask", c.paths.mask}, {"reports", c.paths.reports}};
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Lower-case hex SHA-256 of a string.
inline std::string sha256_hex(const std::string& s) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(s.data(), s.size(), md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 failed");
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

/// Hash of the resolved config; identical settings give identical hashes regardless of input formatting.
inline std::string config_hash(const RunConfig& c) { return sha256_hex(config_to_json(c).dump()); }

inline std::vector<PatternClass> eval_classes(const RunConfig& c) {
  std::vector<PatternClass> out;
  for (const auto& n : c.eval.classes) out.push_back(PatternClass::standard(parse_pattern(n)));
  return out;
}

}  // namespace crdiff
