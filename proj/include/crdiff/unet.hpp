#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crdiff/autograd.hpp"
#include "crdiff/parameters.hpp"
#include "crdiff/prune.hpp"

namespace crdiff {

/**
 * Three-stage convolutional UNet used as the noise predictor.
 *
 *   down: stem conv, res block @H, avg-pool, res block @H/2 (2C), avg-pool
 *   mid:  res block @H/4, self-attention with a learned positional map of
 *         the training extents (bilinearly resized at other extents)
 *   up:   nearest upsample + skip concat, res block @H/2, same again @H,
 *         group norm, SiLU, zero-initialised 3x3 conv to one channel
 *
 * Timestep (sinusoidal features -> 2-layer MLP) and class (learned table)
 * embeddings are summed and added to every res block as a per-channel bias.
 * Conv and linear weights inside the stages carry their stage tag; biases,
 * norm affines, embeddings and the positional map are excluded from pruning.
 */
namespace unet {

struct ResBlockSpec {
  std::string prefix;
  int cin;
  int cout;
  BlockTag tag;
};

inline std::vector<ResBlockSpec> res_blocks(int c) {
  return {
      {"down.res0", c, c, BlockTag::down},
      {"down.res1", c, 2 * c, BlockTag::down},
      {"mid.res", 2 * c, 2 * c, BlockTag::mid},
      {"up.res0", 4 * c, 2 * c, BlockTag::up},
      {"up.res1", 3 * c, c, BlockTag::up},
  };
}

inline void check_extents(int h, int w) {
  if (h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0)
    throw InputError("spatial extents must be >= 8 and divisible by 4, got " + std::to_string(h) + "x" +
                     std::to_string(w));
}

}  // namespace unet

/// Builds and initialises a denoiser for the given width and training extents.
template <typename T = float>
BasicParameterStore<T> build_unet(int width, std::uint64_t seed, int train_h, int train_w, int num_classes = 4) {
  ArchDescriptor arch;
  arch.width = width;
  arch.groups = 4;
  if (width < 8 || width % arch.groups != 0)
    throw InputError("width must be >= 8 and divisible by " + std::to_string(arch.groups));
  if (train_h % 4 != 0 || train_w % 4 != 0)
    throw InputError("training extents must be divisible by 4, got " + std::to_string(train_h) + "x" +
                     std::to_string(train_w));
  unet::check_extents(train_h, train_w);
  if (num_classes < 1) throw InputError("num_classes must be positive");
  arch.num_classes = num_classes;
  arch.emb_dim = 2 * width;
  arch.train_h = train_h;
  arch.train_w = train_w;
  arch.pos_h = train_h / 4;
  arch.pos_w = train_w / 4;

  BasicParameterStore<T> store(arch);
  std::mt19937_64 rng(seed);
  auto normal = [&](Shape shape, double stddev) {
    BasicTensor<T> t(std::move(shape));
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<T>(nd(rng));
    return t;
  };
  auto kaiming = [&](Shape shape) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
    return normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
  };
  const int C = width, E = arch.emb_dim;
  const auto X = BlockTag::excluded;

  store.add("time.fc1.weight", kaiming({E, C}), X);
  store.add("time.fc1.bias", BasicTensor<T>({E}), X);
  store.add("time.fc2.weight", kaiming({E, E}), X);
  store.add("time.fc2.bias", BasicTensor<T>({E}), X);
  store.add("class.table", normal({num_classes, E}, 1.0), X);

  store.add("down.stem.weight", kaiming({C, 1, 3, 3}), BlockTag::down);
  store.add("down.stem.bias", BasicTensor<T>({C}), X);

  auto add_res = [&](const unet::ResBlockSpec& b) {
    const std::string& p = b.prefix;
    store.add(p + ".norm1.gamma", BasicTensor<T>({b.cin}, T(1)), X);
    store.add(p + ".norm1.beta", BasicTensor<T>({b.cin}), X);
    store.add(p + ".conv1.weight", kaiming({b.cout, b.cin, 3, 3}), b.tag);
    store.add(p + ".conv1.bias", BasicTensor<T>({b.cout}), X);
    store.add(p + ".emb.weight", normal({b.cout, E}, std::sqrt(1.0 / E)), b.tag);
    store.add(p + ".emb.bias", BasicTensor<T>({b.cout}), X);
    store.add(p + ".norm2.gamma", BasicTensor<T>({b.cout}, T(1)), X);
    store.add(p + ".norm2.beta", BasicTensor<T>({b.cout}), X);
    store.add(p + ".conv2.weight", kaiming({b.cout, b.cout, 3, 3}), b.tag);
    store.add(p + ".conv2.bias", BasicTensor<T>({b.cout}), X);
    if (b.cin != b.cout) {
      store.add(p + ".skip.weight", kaiming({b.cout, b.cin, 1, 1}), b.tag);
      store.add(p + ".skip.bias", BasicTensor<T>({b.cout}), X);
    }
  };
  const auto blocks = unet::res_blocks(C);
  add_res(blocks[0]);
  add_res(blocks[1]);
  add_res(blocks[2]);
  const double attn_std = std::sqrt(1.0 / (2 * C));
  for (const char* w : {"wq", "wk", "wv", "wo"})
    store.add(std::string("mid.attn.") + w, normal({2 * C, 2 * C}, attn_std), BlockTag::mid);
  store.add("mid.attn.pos", normal({2 * C, arch.pos_h, arch.pos_w}, 0.5), X);
  add_res(blocks[3]);
  add_res(blocks[4]);
  store.add("up.out_norm.gamma", BasicTensor<T>({C}, T(1)), X);
  store.add("up.out_norm.beta", BasicTensor<T>({C}), X);
  store.add("up.out_conv.weight", BasicTensor<T>({1, C, 3, 3}), BlockTag::up);
  store.add("up.out_conv.bias", BasicTensor<T>({1}), X);
  return store;
}

/// Sinusoidal timestep features, shape (N, dim).
template <typename T>
BasicTensor<T> timestep_features(std::span<const int> t, int dim) {
  BasicTensor<T> out({static_cast<int>(t.size()), dim});
  const int half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = static_cast<T>(std::sin(t[n] * freq));
      out[n * dim + half + i] = static_cast<T>(std::cos(t[n] * freq));
    }
  return out;
}

/**
 * Registers store parameters on a tape on first use. With a mask, every
 * masked parameter enters the graph as (w * m); the stored tensor is never
 * modified.
 */
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const BasicParameterStore<T>& store, const PruneMask* mask)
      : tape_(tape), store_(store), mask_(mask) {}

  Var<T> operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const auto& e = store_.entry(name);
    Var<T> v = tape_.param(name, e.value);
    if (mask_ != nullptr) {
      if (const MaskEntry* m = mask_->find(name)) v = ops::mul_const(v, m->template as_tensor<T>());
    }
    cache_.emplace(name, v);
    return v;
  }

 private:
  Tape<T>& tape_;
  const BasicParameterStore<T>& store_;
  const PruneMask* mask_;
  std::map<std::string, Var<T>> cache_;
};

/// Records the denoiser graph for x_t on the tape and returns the predicted noise.
template <typename T>
Var<T> unet_graph(Tape<T>& tape, const BasicParameterStore<T>& store, const PruneMask* mask, Var<T> x,
                  std::span<const int> t, std::span<const int> c) {
  const ArchDescriptor& a = store.arch();
  const auto& xv = tape.value(x);
  if (xv.rank() != 4 || xv.dim(1) != 1) throw InputError("unet input must be (N,1,H,W), got " + shape_str(xv.shape()));
  unet::check_extents(xv.dim(2), xv.dim(3));
  const int N = xv.dim(0);
  if (t.size() != static_cast<std::size_t>(N) || c.size() != static_cast<std::size_t>(N))
    throw InputError("timestep and class vectors must have one entry per sample");
  for (int ci : c)
    if (ci < 0 || ci >= a.num_classes) throw InputError("class id " + std::to_string(ci) + " out of range");
  for (int ti : t)
    if (ti < 0) throw InputError("negative timestep");
  if (mask != nullptr) check_mask_matches(store, *mask);

  ParamBinder<T> P(tape, store, mask);
  const int G = a.groups;

  Var<T> temb = tape.constant(timestep_features<T>(t, a.width));
  Var<T> e = ops::linear(temb, P("time.fc1.weight"), P("time.fc1.bias"));
  e = ops::linear(ops::silu(e), P("time.fc2.weight"), P("time.fc2.bias"));
  e = ops::add(e, ops::embedding(P("class.table"), std::vector<int>(c.begin(), c.end())));
  Var<T> ea = ops::silu(e);

  auto res = [&](const unet::ResBlockSpec& b, Var<T> in) {
    const std::string& p = b.prefix;
    Var<T> h = ops::silu(ops::group_norm(in, G, P(p + ".norm1.gamma"), P(p + ".norm1.beta")));
    h = ops::conv2d(h, P(p + ".conv1.weight"), P(p + ".conv1.bias"), 1, 1);
    h = ops::add_channel_bias(h, ops::linear(ea, P(p + ".emb.weight"), P(p + ".emb.bias")));
    h = ops::silu(ops::group_norm(h, G, P(p + ".norm2.gamma"), P(p + ".norm2.beta")));
    h = ops::conv2d(h, P(p + ".conv2.weight"), P(p + ".conv2.bias"), 1, 1);
    Var<T> skip = b.cin == b.cout ? in : ops::conv2d(in, P(p + ".skip.weight"), P(p + ".skip.bias"), 1, 0);
    return ops::add(skip, h);
  };

  const auto blocks = unet::res_blocks(a.width);
  Var<T> h = ops::conv2d(x, P("down.stem.weight"), P("down.stem.bias"), 1, 1);
  Var<T> d0 = res(blocks[0], h);
  Var<T> d1 = res(blocks[1], ops::avg_pool2(d0));
  Var<T> m = res(blocks[2], ops::avg_pool2(d1));
  m = ops::attention2d(m, P("mid.attn.wq"), P("mid.attn.wk"), P("mid.attn.wv"), P("mid.attn.wo"), P("mid.attn.pos"));
  Var<T> u = res(blocks[3], ops::concat_channels(ops::upsample2(m), d1));
  u = res(blocks[4], ops::concat_channels(ops::upsample2(u), d0));
  u = ops::silu(ops::group_norm(u, G, P("up.out_norm.gamma"), P("up.out_norm.beta")));
  return ops::conv2d(u, P("up.out_conv.weight"), P("up.out_conv.bias"), 1, 1);
}

/// Noise prediction without recording gradients. Throws NumericalError on NaN/Inf.
template <typename T>
BasicTensor<T> unet_forward(const BasicParameterStore<T>& store, const BasicTensor<T>& x_t, std::span<const int> t,
                            std::span<const int> c, const PruneMask* mask = nullptr) {
  Tape<T> tape(false);
  Var<T> x = tape.constant(x_t);
  Var<T> y = unet_graph(tape, store, mask, x, t, c);
  BasicTensor<T> out = tape.value(y);
  require_finite(out, "unet forward");
  return out;
}

}  // namespace crdiff
