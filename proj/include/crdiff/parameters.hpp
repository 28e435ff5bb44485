#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "crdiff/tensor.hpp"

namespace crdiff {

enum class BlockTag { down, mid, up, excluded };

inline constexpr BlockTag kPrunableGroups[] = {BlockTag::down, BlockTag::mid, BlockTag::up};

inline std::string_view to_string(BlockTag t) {
  switch (t) {
    case BlockTag::down: return "down";
    case BlockTag::mid: return "mid";
    case BlockTag::up: return "up";
    case BlockTag::excluded: return "excluded";
  }
  return "excluded";
}

inline BlockTag parse_block_tag(std::string_view s) {
  if (s == "down") return BlockTag::down;
  if (s == "mid") return BlockTag::mid;
  if (s == "up") return BlockTag::up;
  if (s == "excluded") return BlockTag::excluded;
  throw InputError("unknown block tag '" + std::string(s) + "'");
}

/// Shape of the denoiser. Everything forward() needs besides the weights.
struct ArchDescriptor {
  int width = 32;
  int groups = 4;        // group-norm group count
  int num_classes = 4;
  int emb_dim = 64;      // timestep/class embedding width
  int train_h = 16;
  int train_w = 16;
  int pos_h = 4;         // learned positional map extents = train extents / 4
  int pos_w = 4;

  friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

template <typename T>
struct ParamEntry {
  std::string name;
  BasicTensor<T> value;
  BlockTag tag = BlockTag::excluded;
};

/// Ordered name -> (tensor, block tag) map. Iteration order is insertion order.
template <typename T>
class BasicParameterStore {
 public:
  BasicParameterStore() = default;
  explicit BasicParameterStore(ArchDescriptor arch) : arch_(arch) {}

  const ArchDescriptor& arch() const { return arch_; }

  void add(std::string name, BasicTensor<T> value, BlockTag tag) {
    if (index_.count(name)) throw InputError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(ParamEntry<T>{std::move(name), std::move(value), tag});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ParamEntry<T>& entry(const std::string& name) const { return entries_[lookup(name)]; }
  ParamEntry<T>& entry(const std::string& name) { return entries_[lookup(name)]; }
  const BasicTensor<T>& at(const std::string& name) const { return entry(name).value; }
  BasicTensor<T>& at(const std::string& name) { return entry(name).value; }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count(BlockTag tag) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.tag == tag) n += e.value.size();
    return n;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Training progress carried through checkpoints so runs can resume.
  int epochs_done = 0;

  template <typename U>
  BasicParameterStore<U> cast() const {
    BasicParameterStore<U> out(arch_);
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.tag);
    out.epochs_done = epochs_done;
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }

  ArchDescriptor arch_;
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

using ParameterStore = BasicParameterStore<float>;

}  // namespace crdiff
