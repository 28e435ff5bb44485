#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crdiff/parameters.hpp"
#include "crdiff/tensor.hpp"

namespace crdiff {

inline constexpr double kMaxPruneRatio = 0.9;

/// Block-wise pruning ratios for the down, mid and up stages.
struct RatioConfig {
  double r_down = 0;
  double r_mid = 0;
  double r_up = 0;

  double for_group(BlockTag g) const {
    switch (g) {
      case BlockTag::down: return r_down;
      case BlockTag::mid: return r_mid;
      case BlockTag::up: return r_up;
      default: return 0;
    }
  }
  std::array<double, 3> as_array() const { return {r_down, r_mid, r_up}; }
  static RatioConfig from_array(const std::array<double, 3>& a) { return {a[0], a[1], a[2]}; }

  friend bool operator==(const RatioConfig&, const RatioConfig&) = default;
};

inline void validate_ratio(double r, const char* what) {
  if (!(r >= 0.0 && r <= kMaxPruneRatio))
    throw InputError(std::string(what) + " must lie in [0, 0.9], got " + std::to_string(r));
}

inline void validate(const RatioConfig& r) {
  validate_ratio(r.r_down, "r_down");
  validate_ratio(r.r_mid, "r_mid");
  validate_ratio(r.r_up, "r_up");
}

inline RatioConfig uniform_config(double ratio) {
  validate_ratio(ratio, "uniform ratio");
  return {ratio, ratio, ratio};
}

inline void to_json(nlohmann::json& j, const RatioConfig& r) {
  j = nlohmann::json{{"r_down", r.r_down}, {"r_mid", r.r_mid}, {"r_up", r.r_up}};
}

inline void from_json(const nlohmann::json& j, RatioConfig& r) {
  for (const auto& [k, v] : j.items())
    if (k != "r_down" && k != "r_mid" && k != "r_up") throw InputError("unknown RatioConfig key '" + k + "'");
  r.r_down = j.at("r_down").get<double>();
  r.r_mid = j.at("r_mid").get<double>();
  r.r_up = j.at("r_up").get<double>();
  validate(r);
}

/// How magnitudes are ranked when choosing which weights to zero.
enum class RankingScope { per_tensor, per_group };

inline std::string_view to_string(RankingScope s) { return s == RankingScope::per_tensor ? "per_tensor" : "per_group"; }

inline RankingScope parse_ranking_scope(std::string_view s) {
  if (s == "per_tensor") return RankingScope::per_tensor;
  if (s == "per_group") return RankingScope::per_group;
  throw InputError("unknown ranking scope '" + std::string(s) + "'");
}

inline std::size_t prune_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
}

/**
 * Keep-mask for one tensor: the floor(ratio * n) entries with the smallest
 * magnitude get 0, everything else 1. Equal magnitudes are pruned in flat
 * index order, which makes masks nested as the ratio grows.
 */
template <typename T>
std::vector<std::uint8_t> mask_tensor(std::span<const T> w, double ratio) {
  validate_ratio(ratio, "pruning ratio");
  const std::size_t n = w.size();
  const std::size_t k = prune_count(ratio, n);
  std::vector<std::uint8_t> keep(n, 1);
  if (k == 0) return keep;
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  auto less = [&](std::uint32_t a, std::uint32_t b) {
    const double ma = std::fabs(static_cast<double>(w[a])), mb = std::fabs(static_cast<double>(w[b]));
    return ma < mb || (ma == mb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), less);
  for (std::size_t i = 0; i < k; ++i) keep[idx[i]] = 0;
  return keep;
}

template <typename T>
BasicTensor<T> mask_tensor(const BasicTensor<T>& w, double ratio) {
  auto keep = mask_tensor(w.data(), ratio);
  return BasicTensor<T>(w.shape(), std::vector<T>(keep.begin(), keep.end()));
}

struct MaskEntry {
  std::string name;
  Shape shape;
  BlockTag group = BlockTag::excluded;
  std::vector<std::uint8_t> keep;  // 1 = kept, 0 = pruned
  std::size_t zeros = 0;

  template <typename T>
  BasicTensor<T> as_tensor() const {
    return BasicTensor<T>(shape, std::vector<T>(keep.begin(), keep.end()));
  }
};

/// Binary keep-masks over the prunable parameters of one store.
struct PruneMask {
  RatioConfig config;
  RankingScope scope = RankingScope::per_tensor;
  std::vector<MaskEntry> entries;  // store order

  const MaskEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  /// Achieved zero fraction per group (down, mid, up).
  std::array<double, 3> achieved_sparsity() const {
    std::array<double, 3> zeros{}, total{};
    for (const auto& e : entries) {
      const auto g = static_cast<std::size_t>(e.group);
      if (g > 2) continue;
      zeros[g] += static_cast<double>(e.zeros);
      total[g] += static_cast<double>(e.keep.size());
    }
    std::array<double, 3> out{};
    for (std::size_t g = 0; g < 3; ++g) out[g] = total[g] > 0 ? zeros[g] / total[g] : 0.0;
    return out;
  }
};

/// Elementwise w * m. Applying a mask twice is the same as applying it once.
template <typename T>
BasicTensor<T> apply_mask(const BasicTensor<T>& w, const MaskEntry& m) {
  if (w.shape() != m.shape) throw InputError("mask shape " + shape_str(m.shape) + " does not match parameter " +
                                             m.name + " " + shape_str(w.shape()));
  BasicTensor<T> out = w;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.keep[i] ? out[i] : T(0);
  return out;
}

/// Checks that a mask covers exactly the prunable tensors of a store with matching shapes.
template <typename T>
void check_mask_matches(const BasicParameterStore<T>& store, const PruneMask& mask) {
  std::size_t prunable = 0;
  for (const auto& e : store.entries()) {
    if (e.tag == BlockTag::excluded) continue;
    ++prunable;
    const MaskEntry* m = mask.find(e.name);
    if (!m) throw InputError("mask has no entry for prunable parameter '" + e.name + "'");
    if (m->shape != e.value.shape())
      throw InputError("mask/parameter shape mismatch for '" + e.name + "': " + shape_str(m->shape) + " vs " +
                       shape_str(e.value.shape()));
  }
  if (prunable != mask.entries.size()) throw InputError("mask has entries for non-prunable or unknown parameters");
}

template <typename T>
PruneMask build_mask(const BasicParameterStore<T>& store, const RatioConfig& r,
                     RankingScope scope = RankingScope::per_tensor) {
  validate(r);
  for (BlockTag g : kPrunableGroups)
    if (store.count(g) == 0) throw InputError("prunable group '" + std::string(to_string(g)) + "' is empty");
  PruneMask mask;
  mask.config = r;
  mask.scope = scope;
  for (const auto& e : store.entries()) {
    if (e.tag == BlockTag::excluded) continue;
    MaskEntry m{e.name, e.value.shape(), e.tag, {}, 0};
    if (scope == RankingScope::per_tensor) m.keep = mask_tensor(e.value.data(), r.for_group(e.tag));
    mask.entries.push_back(std::move(m));
  }
  if (scope == RankingScope::per_group) {
    for (BlockTag g : kPrunableGroups) {
      std::vector<double> pooled;
      std::vector<std::pair<std::size_t, std::size_t>> where;  // (entry, flat index)
      for (std::size_t k = 0; k < mask.entries.size(); ++k) {
        if (mask.entries[k].group != g) continue;
        const auto& w = store.at(mask.entries[k].name);
        mask.entries[k].keep.assign(w.size(), 1);
        for (std::size_t i = 0; i < w.size(); ++i) {
          pooled.push_back(static_cast<double>(w[i]));
          where.emplace_back(k, i);
        }
      }
      auto keep = mask_tensor(std::span<const double>(pooled), r.for_group(g));
      for (std::size_t i = 0; i < keep.size(); ++i)
        if (!keep[i]) mask.entries[where[i].first].keep[where[i].second] = 0;
    }
  }
  for (auto& m : mask.entries) m.zeros = static_cast<std::size_t>(std::count(m.keep.begin(), m.keep.end(), 0));
  return mask;
}

/// Mask with every prunable entry kept.
template <typename T>
PruneMask identity_mask(const BasicParameterStore<T>& store) {
  return build_mask(store, RatioConfig{});
}

// ---------------------------------------------------------------------------
// Mask file: one JSON header line, then each tensor's keep bits packed
// LSB-first, padded to a byte, in header order.

inline void write_mask(const std::filesystem::path& path, const PruneMask& mask) {
  nlohmann::json header;
  header["format"] = "crdiff-mask";
  header["version"] = 1;
  header["config"] = mask.config;
  header["scope"] = std::string(to_string(mask.scope));
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& e : mask.entries)
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"group", std::string(to_string(e.group))},
                       {"zeros", e.zeros}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write mask file " + path.string());
  out << header.dump() << '\n';
  for (const auto& e : mask.entries) {
    std::vector<std::uint8_t> bytes((e.keep.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < e.keep.size(); ++i)
      if (e.keep[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw std::runtime_error("failed writing mask file " + path.string());
}

inline PruneMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open mask file " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("mask file " + path.string() + ": bad header: " + e.what());
  }
  if (header.value("format", "") != "crdiff-mask") throw InputError("not a mask file: " + path.string());
  PruneMask mask;
  mask.config = header.at("config").get<RatioConfig>();
  mask.scope = parse_ranking_scope(header.at("scope").get<std::string>());
  for (const auto& t : header.at("tensors")) {
    MaskEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    e.group = parse_block_tag(t.at("group").get<std::string>());
    const std::size_t n = shape_numel(e.shape);
    std::vector<std::uint8_t> bytes((n + 7) / 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw InputError("mask file " + path.string() + ": truncated payload");
    e.keep.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.keep[i] = (bytes[i / 8] >> (i % 8)) & 1u;
    e.zeros = static_cast<std::size_t>(std::count(e.keep.begin(), e.keep.end(), 0));
    if (e.zeros != t.at("zeros").get<std::size_t>())
      throw InputError("mask file " + path.string() + ": zero count mismatch for " + e.name);
    mask.entries.push_back(std::move(e));
  }
  return mask;
}

}  // namespace crdiff
