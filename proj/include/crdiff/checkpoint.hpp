#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "crdiff/parameters.hpp"

namespace crdiff {

// Checkpoint layout: one line of JSON (architecture, training progress, and
// the ordered tensor list {name, shape, tag}), a newline, then every tensor's
// values as little-endian float32 in header order.

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline nlohmann::json arch_to_json(const ArchDescriptor& a) {
  return {{"width", a.width},     {"groups", a.groups}, {"num_classes", a.num_classes}, {"emb_dim", a.emb_dim},
          {"train_h", a.train_h}, {"train_w", a.train_w}, {"pos_h", a.pos_h},           {"pos_w", a.pos_w}};
}

inline ArchDescriptor arch_from_json(const nlohmann::json& j) {
  ArchDescriptor a;
  a.width = j.at("width").get<int>();
  a.groups = j.at("groups").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  a.emb_dim = j.at("emb_dim").get<int>();
  a.train_h = j.at("train_h").get<int>();
  a.train_w = j.at("train_w").get<int>();
  a.pos_h = j.at("pos_h").get<int>();
  a.pos_w = j.at("pos_w").get<int>();
  return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store) {
  nlohmann::json header;
  header["format"] = "crdiff-checkpoint";
  header["version"] = 1;
  header["arch"] = arch_to_json(store.arch());
  header["epochs_done"] = store.epochs_done;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& e : store.entries())
    list.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"tag", std::string(to_string(e.tag))}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const auto& e : store.entries())
    out.write(reinterpret_cast<const char*>(e.value.ptr()), static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint " + path.string() + ": bad header: " + e.what());
  }
  if (header.value("format", "") != "crdiff-checkpoint") throw InputError("not a checkpoint: " + path.string());
  ParameterStore store(arch_from_json(header.at("arch")));
  store.epochs_done = header.value("epochs_done", 0);
  for (const auto& t : header.at("tensors")) {
    Tensor v(t.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(v.ptr()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!in) throw InputError("checkpoint " + path.string() + ": truncated payload");
    store.add(t.at("name").get<std::string>(), std::move(v), parse_block_tag(t.at("tag").get<std::string>()));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("checkpoint " + path.string() + ": trailing bytes");
  return store;
}

}  // namespace crdiff
