#pragma once

#include <deque>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "crdiff/kernels.hpp"
#include "crdiff/tensor.hpp"

namespace crdiff {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  const Tape<T>* tape = nullptr;
  int id = -1;
};

template <typename T>
using GradMap = std::map<std::string, BasicTensor<T>>;

/**
 * Op-level reverse-mode tape.
 *
 * Each recorded op stores its output value and a closure that maps the output
 * gradient onto input gradients. With gradients disabled the tape only keeps
 * values, which is what sampling uses.
 */
template <typename T>
class Tape {
 public:
  using Grads = std::vector<BasicTensor<T>*>;
  using BackwardFn = std::function<void(const BasicTensor<T>& gout, Grads& gin)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> param(std::string name, BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.name = std::move(name);
    n.requires_grad = grad_enabled_;
    return push(std::move(n));
  }

  Var<T> constant(BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  const BasicTensor<T>& value(Var<T> v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id)].value;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }

  /// Records an op. The closure is kept only if some input requires grad.
  Var<T> record(BasicTensor<T> value, std::vector<Var<T>> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (const Var<T>& in : inputs) {
      check_owned(in);
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
    }
    if (n.requires_grad) {
      n.inputs.reserve(inputs.size());
      for (const Var<T>& in : inputs) n.inputs.push_back(in.id);
      n.backward = std::move(fn);
    }
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }

  /**
   * Replays the tape in reverse from a scalar loss. Returns d(loss)/d(param)
   * for every named parameter on the tape; parameters the loss does not reach
   * get zeros. A loss that reaches no parameter at all is an error.
   */
  GradMap<T> backward(Var<T> loss, int* ops_visited = nullptr) {
    check_owned(loss);
    if (!grad_enabled_) throw InputError("backward: tape was recorded with gradients disabled");
    Node& root = nodes_[static_cast<std::size_t>(loss.id)];
    if (root.value.size() != 1) throw InputError("backward: loss must be a scalar, got " + shape_str(root.value.shape()));
    if (!root.requires_grad)
      throw InputError("backward: loss is detached from every parameter on the tape");
    std::vector<BasicTensor<T>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id)] = BasicTensor<T>(root.value.shape(), T(1));
    int visited = 0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      auto& g = grads[static_cast<std::size_t>(i)];
      if (!n.backward || g.empty()) continue;
      Grads gin(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto in = static_cast<std::size_t>(n.inputs[k]);
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = BasicTensor<T>(nodes_[in].value.shape());
        gin[k] = &grads[in];
      }
      n.backward(g, gin);
      ++visited;
    }
    if (ops_visited) *ops_visited = visited;
    GradMap<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].name.empty()) continue;
      auto& slot = out[nodes_[i].name];
      BasicTensor<T> g = grads[i].empty() ? BasicTensor<T>(nodes_[i].value.shape()) : std::move(grads[i]);
      if (slot.empty()) {
        slot = std::move(g);
      } else {
        for (std::size_t k = 0; k < slot.size(); ++k) slot[k] += g[k];
      }
    }
    return out;
  }

 private:
  struct Node {
    BasicTensor<T> value;
    std::string name;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  void check_owned(Var<T> v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw InputError("detached tensor: value was not recorded on this tape");
  }

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque keeps recorded values at stable addresses
};

/// Taped versions of the kernels. Names mirror the kernel names.
namespace ops {

template <typename T>
Tape<T>& tape_of(Var<T> v) {
  if (v.tape == nullptr) throw InputError("detached tensor: variable has no tape");
  return const_cast<Tape<T>&>(*v.tape);
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw InputError("detached tensor: operands recorded on different tapes");
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  same_tape(x, w);
  same_tape(x, b);
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  auto y = kernels::conv2d(xv, wv, tp.value(b), stride, pad);
  return tp.record(std::move(y), {x, w, b}, [&xv, &wv, stride, pad](const BasicTensor<T>& g, auto& gin) {
    kernels::conv2d_backward(xv, wv, g, stride, pad, gin[0], gin[1], gin[2]);
  });
}

template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, double eps = 1e-5) {
  same_tape(x, gamma);
  same_tape(x, beta);
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& gv = tp.value(gamma);
  auto stats = std::make_shared<kernels::GroupNormStats>();
  auto y = kernels::group_norm(xv, groups, gv, tp.value(beta), eps, stats.get());
  return tp.record(std::move(y), {x, gamma, beta}, [&xv, &gv, groups, stats](const BasicTensor<T>& g, auto& gin) {
    kernels::group_norm_backward(xv, groups, gv, *stats, g, gin[0], gin[1], gin[2]);
  });
}

template <typename T>
Var<T> silu(Var<T> x) {
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  return tp.record(kernels::silu(xv), {x}, [&xv](const BasicTensor<T>& g, auto& gin) {
    if (gin[0]) kernels::silu_backward(xv, g, *gin[0]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  same_tape(a, b);
  Tape<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  kernels::require(av.shape() == bv.shape(), "add: shape mismatch " + shape_str(av.shape()) + " vs " +
                                                 shape_str(bv.shape()));
  BasicTensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return tp.record(std::move(y), {a, b}, [](const BasicTensor<T>& g, auto& gin) {
    for (auto* d : gin)
      if (d)
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

/// x (N,C,H,W) + bias (N,C) broadcast over the spatial grid.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  same_tape(x, bias);
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& bv = tp.value(bias);
  kernels::require(xv.rank() == 4 && bv.rank() == 2 && bv.dim(0) == xv.dim(0) && bv.dim(1) == xv.dim(1),
                   "add_channel_bias: expected (N,C) bias for " + shape_str(xv.shape()) + ", got " +
                       shape_str(bv.shape()));
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  BasicTensor<T> y = xv;
  for (std::size_t nc = 0; nc < bv.size(); ++nc)
    for (std::size_t i = 0; i < hw; ++i) y[nc * hw + i] += bv[nc];
  return tp.record(std::move(y), {x, bias}, [hw](const BasicTensor<T>& g, auto& gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1])
      for (std::size_t nc = 0; nc < gin[1]->size(); ++nc) {
        double s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += g[nc * hw + i];
        (*gin[1])[nc] += static_cast<T>(s);
      }
  });
}

/// Elementwise product with a constant tensor (used for pruning masks).
template <typename T>
Var<T> mul_const(Var<T> x, const BasicTensor<T>& c) {
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  kernels::require(xv.shape() == c.shape(), "mul_const: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                                shape_str(c.shape()));
  BasicTensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * c[i];
  auto cc = std::make_shared<BasicTensor<T>>(c);
  return tp.record(std::move(y), {x}, [cc](const BasicTensor<T>& g, auto& gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*cc)[i];
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  BasicTensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * s;
  return tp.record(std::move(y), {x}, [s](const BasicTensor<T>& g, auto& gin) {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * s;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  same_tape(a, b);
  Tape<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  kernels::require(av.shape() == bv.shape(), "mul: shape mismatch");
  BasicTensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return tp.record(std::move(y), {a, b}, [&av, &bv](const BasicTensor<T>& g, auto& gin) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * bv[i];
      if (gin[1]) (*gin[1])[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  double s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return tp.record(BasicTensor<T>::scalar(static_cast<T>(s)), {x}, [](const BasicTensor<T>& g, auto& gin) {
    if (gin[0])
      for (std::size_t i = 0; i < gin[0]->size(); ++i) (*gin[0])[i] += g[0];
  });
}

/// Mean squared difference, accumulated in double.
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
  same_tape(pred, target);
  Tape<T>& tp = tape_of(pred);
  const auto& pv = tp.value(pred);
  const auto& tv = tp.value(target);
  kernels::require(pv.shape() == tv.shape(), "mse: shape mismatch " + shape_str(pv.shape()) + " vs " +
                                                 shape_str(tv.shape()));
  kernels::require(pv.size() > 0, "mse: empty input");
  double s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(pv[i]) - tv[i];
    s += d * d;
  }
  const double n = static_cast<double>(pv.size());
  return tp.record(BasicTensor<T>::scalar(static_cast<T>(s / n)), {pred, target},
                   [&pv, &tv, n](const BasicTensor<T>& g, auto& gin) {
                     for (std::size_t i = 0; i < pv.size(); ++i) {
                       const T d = static_cast<T>(2.0 * (static_cast<double>(pv[i]) - tv[i]) / n) * g[0];
                       if (gin[0]) (*gin[0])[i] += d;
                       if (gin[1]) (*gin[1])[i] -= d;
                     }
                   });
}

template <typename T>
Var<T> avg_pool2(Var<T> x) {
  Tape<T>& tp = tape_of(x);
  return tp.record(kernels::avg_pool2(tp.value(x)), {x}, [](const BasicTensor<T>& g, auto& gin) {
    if (gin[0]) kernels::avg_pool2_backward(g, *gin[0]);
  });
}

template <typename T>
Var<T> upsample2(Var<T> x) {
  Tape<T>& tp = tape_of(x);
  return tp.record(kernels::upsample2(tp.value(x)), {x}, [](const BasicTensor<T>& g, auto& gin) {
    if (gin[0]) kernels::upsample2_backward(g, *gin[0]);
  });
}

/// Concatenates along the channel axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  same_tape(a, b);
  Tape<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  kernels::require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
                       av.dim(3) == bv.dim(3),
                   "concat_channels: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  const int N = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  BasicTensor<T> y({N, ca + cb, av.dim(2), av.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(av.ptr() + n * ca * hw, ca * hw, y.ptr() + n * (ca + cb) * hw);
    std::copy_n(bv.ptr() + n * cb * hw, cb * hw, y.ptr() + (n * (ca + cb) + ca) * hw);
  }
  return tp.record(std::move(y), {a, b}, [N, ca, cb, hw](const BasicTensor<T>& g, auto& gin) {
    for (int n = 0; n < N; ++n) {
      if (gin[0])
        for (std::size_t i = 0; i < ca * hw; ++i) (*gin[0])[n * ca * hw + i] += g[n * (ca + cb) * hw + i];
      if (gin[1])
        for (std::size_t i = 0; i < cb * hw; ++i) (*gin[1])[n * cb * hw + i] += g[(n * (ca + cb) + ca) * hw + i];
    }
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  same_tape(x, w);
  same_tape(x, b);
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  return tp.record(kernels::linear(xv, wv, tp.value(b)), {x, w, b},
                   [&xv, &wv](const BasicTensor<T>& g, auto& gin) {
                     kernels::linear_backward(xv, wv, g, gin[0], gin[1], gin[2]);
                   });
}

/// Rows of a (rows, dim) table selected by ids.
template <typename T>
Var<T> embedding(Var<T> table, std::vector<int> ids) {
  Tape<T>& tp = tape_of(table);
  const auto& tv = tp.value(table);
  kernels::require(tv.rank() == 2, "embedding: table must be rank 2");
  const int rows = tv.dim(0), dim = tv.dim(1);
  BasicTensor<T> y({static_cast<int>(ids.size()), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    kernels::require(ids[i] >= 0 && ids[i] < rows, "embedding: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * dim, dim, y.ptr() + i * dim);
  }
  return tp.record(std::move(y), {table}, [ids = std::move(ids), dim](const BasicTensor<T>& g, auto& gin) {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int d = 0; d < dim; ++d) (*gin[0])[static_cast<std::size_t>(ids[i]) * dim + d] += g[i * dim + d];
  });
}

template <typename T>
Var<T> attention2d(Var<T> x, Var<T> wq, Var<T> wk, Var<T> wv, Var<T> wo, Var<T> pos) {
  for (Var<T> v : {wq, wk, wv, wo, pos}) same_tape(x, v);
  Tape<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& q = tp.value(wq);
  const auto& k = tp.value(wk);
  const auto& v = tp.value(wv);
  const auto& o = tp.value(wo);
  const auto& p = tp.value(pos);
  auto saved = tp.grad_enabled() ? std::make_shared<kernels::AttentionSaved<T>>() : nullptr;
  auto y = kernels::attention2d(xv, q, k, v, o, p, saved.get());
  return tp.record(std::move(y), {x, wq, wk, wv, wo, pos},
                   [&xv, &q, &k, &v, &o, &p, saved](const BasicTensor<T>& g, auto& gin) {
                     kernels::attention2d_backward(xv, q, k, v, o, p, *saved, g, gin[0], gin[1], gin[2], gin[3],
                                                   gin[4], gin[5]);
                   });
}

}  // namespace ops

/// w <- w - lr * g for every parameter with a gradient. Missing keys are skipped with a warning.
template <typename Store, typename T>
void sgd_update(Store& params, const GradMap<T>& grads, double lr, std::ostream* warn = &std::cerr) {
  if (!(lr >= 0)) throw InputError("sgd_update: learning rate must be non-negative");
  for (auto& entry : params.entries()) {
    auto it = grads.find(entry.name);
    if (it == grads.end()) {
      if (warn) *warn << "warning: sgd_update: no gradient for " << entry.name << "\n";
      continue;
    }
    if (it->second.shape() != entry.value.shape())
      throw InputError("sgd_update: gradient shape mismatch for " + entry.name);
    auto& w = entry.value;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - lr * it->second[i]);
  }
}

}  // namespace crdiff
