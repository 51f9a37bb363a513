#include "ushl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ushl::ad {

namespace {

template <typename S>
void require_same_tape(const Var<S>& a, const Var<S>& b, std::string_view op) {
  if (a.tape() != b.tape() || a.tape() == nullptr) {
    throw ContractViolation(std::string(op) + ": operands live on different tapes");
  }
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ContractViolation(std::string(op) + ": shape mismatch " + to_string(a) +
                          " vs " + to_string(b));
}

[[noreturn]] void bad_shape(std::string_view op, const Shape& a, std::string_view want) {
  throw ContractViolation(std::string(op) + ": got shape " + to_string(a) +
                          ", expected " + std::string(want));
}

// [outer, axis, inner] view of a shape.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename S>
Var<S> Tape<S>::variable(Tensor<S> value, std::string_view name) {
  nodes_.push_back(Node{std::string(name), std::move(value), {}, {}, true});
  return Var<S>(this, nodes_.size() - 1);
}

template <typename S>
Var<S> Tape<S>::constant(Tensor<S> value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, false});
  return Var<S>(this, nodes_.size() - 1);
}

template <typename S>
Var<S> Tape<S>::record(std::string_view op, Tensor<S> value, std::vector<NodeId> inputs,
                       Adjoint adjoint) {
  for (const S v : value.values()) {
    if (!std::isfinite(v)) {
      throw NumericFault(std::string(op) + ": non-finite output");
    }
  }
  bool needs = false;
  for (NodeId in : inputs) needs = needs || nodes_.at(in).needs_grad;
  nodes_.push_back(Node{std::string(op), std::move(value), std::move(inputs),
                        needs ? std::move(adjoint) : Adjoint{}, needs});
  return Var<S>(this, nodes_.size() - 1);
}

template <typename S>
Gradients<S> Tape<S>::backward(const Var<S>& root) const {
  if (root.tape() != this) throw ContractViolation("backward: root is not on this tape");
  if (root.value().size() != 1) {
    throw ContractViolation("backward: root must be scalar, got shape " +
                            to_string(root.shape()));
  }
  std::vector<Tensor<S>> grads(nodes_.size());
  grads[root.id()] = Tensor<S>(root.shape(), S(1));
  std::vector<Tensor<S>*> in_grads;
  for (std::size_t k = root.id() + 1; k-- > 0;) {
    const Node& node = nodes_[k];
    if (!node.adjoint || grads[k].empty()) continue;
    in_grads.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const NodeId in = node.inputs[i];
      if (!nodes_[in].needs_grad) continue;
      if (grads[in].empty()) grads[in] = Tensor<S>(nodes_[in].value.shape());
      in_grads[i] = &grads[in];
    }
    node.adjoint(grads[k], in_grads);
  }
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    if (nodes_[k].needs_grad && nodes_[k].inputs.empty() && grads[k].empty()) {
      grads[k] = Tensor<S>(nodes_[k].value.shape());
    }
  }
  return Gradients<S>(std::move(grads));
}

template <typename S>
void Tape<S>::note_kinks(std::span<const S> distance_to_kink) {
  for (const S d : distance_to_kink) {
    kinks_.push_back(d > S(0) ? 1 : (d < S(0) ? -1 : 0));
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require_same_tape(a, b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    shape_mismatch("matmul", A.shape(), B.shape());
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor<S> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    S* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = A[i * k + p];
      const S* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
    }
  }
  Tape<S>* t = a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return t->record("matmul", std::move(out), {ia, ib},
                   [t, ia, ib, m, k, n](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& A = t->value(ia);
                     const auto& B = t->value(ib);
                     if (gi[0]) {  // dA = g B^T
                       S* da = gi[0]->data();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           S acc = 0;
                           for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
                           da[i * k + p] += acc;
                         }
                     }
                     if (gi[1]) {  // dB = A^T g
                       S* db = gi[1]->data();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           const S av = A[i * k + p];
                           for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g[i * n + j];
                         }
                     }
                   });
}

template <typename S>
Var<S> bias_add(const Var<S>& x, const Var<S>& b) {
  require_same_tape(x, b, "bias_add");
  const auto& X = x.value();
  const auto& B = b.value();
  if (B.rank() != 1 || X.rank() == 0 || X.shape().back() != B.dim(0)) {
    shape_mismatch("bias_add", X.shape(), B.shape());
  }
  const std::size_t n = B.dim(0);
  Tensor<S> out = X;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % n];
  return x.tape()->record("bias_add", std::move(out), {x.id(), b.id()},
                          [n](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            if (gi[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                            if (gi[1])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % n] += g[i];
                          });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  return bias_add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// conv3d

template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Conv3dOptions& opt) {
  require_same_tape(x, w, "conv3d");
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 5) bad_shape("conv3d", X.shape(), "rank-5 [N, C, T, H, W]");
  if (W.rank() != 5 || W.dim(1) != X.dim(1)) shape_mismatch("conv3d", X.shape(), W.shape());
  const std::size_t N = X.dim(0), Ci = X.dim(1);
  const std::array<std::size_t, 3> in{X.dim(2), X.dim(3), X.dim(4)};
  const std::size_t Co = W.dim(0);
  const std::array<std::size_t, 3> ks{W.dim(2), W.dim(3), W.dim(4)};
  std::array<std::size_t, 3> out_ext{};
  for (int d = 0; d < 3; ++d) {
    if (opt.stride[d] == 0) throw ContractViolation("conv3d: zero stride");
    if (in[d] + 2 * opt.pad[d] < ks[d]) shape_mismatch("conv3d", X.shape(), W.shape());
    out_ext[d] = (in[d] + 2 * opt.pad[d] - ks[d]) / opt.stride[d] + 1;
  }
  const std::size_t To = out_ext[0], Ho = out_ext[1], Wo = out_ext[2];
  const std::size_t Ti = in[0], Hi = in[1], Wi = in[2];

  // Input index for output position o and kernel offset k along one dim;
  // returns -1 when the tap lands in zero padding.
  auto tap = [&opt, in](int d, std::size_t o, std::size_t k) -> long {
    const long pos = static_cast<long>(o * opt.stride[d] + k) - static_cast<long>(opt.pad[d]);
    const long len = static_cast<long>(in[d]);
    if (pos >= 0 && pos < len) return pos;
    if (d == 0 && opt.circular_time) return ((pos % len) + len) % len;
    return -1;
  };

  // Precomputed tap tables: taps[d][o * k_d + k] -> input index or -1.
  std::array<std::vector<long>, 3> taps;
  for (int d = 0; d < 3; ++d) {
    taps[d].resize(out_ext[d] * ks[d]);
    for (std::size_t o = 0; o < out_ext[d]; ++o)
      for (std::size_t k = 0; k < ks[d]; ++k) taps[d][o * ks[d] + k] = tap(d, o, k);
  }

  // im2col: one row of Ci * kvol taps per output position, so forward and
  // both adjoints become dense loops over contiguous rows.
  const std::size_t in_vol = Ti * Hi * Wi, out_vol = To * Ho * Wo;
  const std::size_t kvol = ks[0] * ks[1] * ks[2];
  const std::size_t K = Ci * kvol, P = N * out_vol;
  std::vector<S> col(P * K, S(0));
  std::vector<long> src(P * K, -1);  // flat input index per column entry
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ot = 0; ot < To; ++ot)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const std::size_t p = ((n * To + ot) * Ho + oh) * Wo + ow;
          long* row = src.data() + p * K;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t kt = 0; kt < ks[0]; ++kt) {
              const long it = taps[0][ot * ks[0] + kt];
              for (std::size_t kh = 0; kh < ks[1]; ++kh) {
                const long ih = taps[1][oh * ks[1] + kh];
                for (std::size_t kw = 0; kw < ks[2]; ++kw) {
                  const long iw = taps[2][ow * ks[2] + kw];
                  if (it < 0 || ih < 0 || iw < 0) continue;
                  row[((ci * ks[0] + kt) * ks[1] + kh) * ks[2] + kw] =
                      static_cast<long>((n * Ci + ci) * in_vol) + (it * long(Hi) + ih) * long(Wi) + iw;
                }
              }
            }
        }
  for (std::size_t i = 0; i < P * K; ++i)
    if (src[i] >= 0) col[i] = X[static_cast<std::size_t>(src[i])];

  Tensor<S> out({N, Co, To, Ho, Wo});
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t n = p / out_vol, q = p % out_vol;
    const S* c = col.data() + p * K;
    for (std::size_t co = 0; co < Co; ++co) {
      const S* wk = W.data() + co * K;
      S acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += wk[k] * c[k];
      out[(n * Co + co) * out_vol + q] = acc;
    }
  }

  Tape<S>* t = x.tape();
  const NodeId ix = x.id(), iw = w.id();
  return t->record(
      "conv3d", std::move(out), {ix, iw},
      [=, col = std::move(col), src = std::move(src)](const Tensor<S>& g,
                                                      std::span<Tensor<S>* const> gi) {
        const auto& W = t->value(iw);
        S* dx = gi[0] ? gi[0]->data() : nullptr;
        S* dw = gi[1] ? gi[1]->data() : nullptr;
        std::vector<S> dcol(dx ? K : 0);
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t n = p / out_vol, q = p % out_vol;
          const S* c = col.data() + p * K;
          if (dx) std::fill(dcol.begin(), dcol.end(), S(0));
          for (std::size_t co = 0; co < Co; ++co) {
            const S go = g[(n * Co + co) * out_vol + q];
            if (go == S(0)) continue;
            if (dw) {
              S* dwk = dw + co * K;
              for (std::size_t k = 0; k < K; ++k) dwk[k] += go * c[k];
            }
            if (dx) {
              const S* wk = W.data() + co * K;
              for (std::size_t k = 0; k < K; ++k) dcol[k] += go * wk[k];
            }
          }
          if (dx) {
            const long* row = src.data() + p * K;
            for (std::size_t k = 0; k < K; ++k)
              if (row[k] >= 0) dx[row[k]] += dcol[k];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batchnorm3d

template <typename S>
Var<S> batchnorm3d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, NormMode mode,
                   const BatchStats<S>& running, S eps, BatchStats<S>* observed) {
  require_same_tape(x, gamma, "batchnorm3d");
  require_same_tape(x, beta, "batchnorm3d");
  const auto& X = x.value();
  if (X.rank() != 5) bad_shape("batchnorm3d", X.shape(), "rank-5 [N, C, T, H, W]");
  const std::size_t N = X.dim(0), C = X.dim(1);
  const std::size_t vol = X.dim(2) * X.dim(3) * X.dim(4);
  const std::size_t m = N * vol;
  if (gamma.value().shape() != Shape{C}) shape_mismatch("batchnorm3d", X.shape(), gamma.shape());
  if (beta.value().shape() != Shape{C}) shape_mismatch("batchnorm3d", X.shape(), beta.shape());
  if (m == 0) throw ContractViolation("batchnorm3d: empty input");

  Tensor<S> mean({C}), inv_std({C});
  if (mode == NormMode::kTrain) {
    Tensor<S> var({C});
    for (std::size_t c = 0; c < C; ++c) {
      S acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const S* p = X.data() + (n * C + c) * vol;
        for (std::size_t i = 0; i < vol; ++i) acc += p[i];
      }
      mean[c] = acc / S(m);
      S sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const S* p = X.data() + (n * C + c) * vol;
        for (std::size_t i = 0; i < vol; ++i) sq += (p[i] - mean[c]) * (p[i] - mean[c]);
      }
      var[c] = sq / S(m);
      inv_std[c] = S(1) / std::sqrt(var[c] + eps);
    }
    if (observed) {
      observed->mean = mean;
      observed->var = var;
      if (m > 1)
        for (auto& v : observed->var.values()) v *= S(m) / S(m - 1);
    }
  } else {
    if (running.mean.shape() != Shape{C} || running.var.shape() != Shape{C}) {
      shape_mismatch("batchnorm3d", X.shape(), running.mean.shape());
    }
    mean = running.mean;
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = S(1) / std::sqrt(running.var[c] + eps);
  }

  const auto& G = gamma.value();
  const auto& B = beta.value();
  Tensor<S> xhat(X.shape());
  Tensor<S> out(X.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * vol;
      for (std::size_t i = 0; i < vol; ++i) {
        xhat[off + i] = (X[off + i] - mean[c]) * inv_std[c];
        out[off + i] = G[c] * xhat[off + i] + B[c];
      }
    }

  Tape<S>* t = x.tape();
  const NodeId ig = gamma.id();
  const bool train = mode == NormMode::kTrain;
  return t->record(
      "batchnorm3d", std::move(out), {x.id(), gamma.id(), beta.id()},
      [=, xhat = std::move(xhat)](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
        const auto& G = t->value(ig);
        for (std::size_t c = 0; c < C; ++c) {
          S sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * vol;
            for (std::size_t i = 0; i < vol; ++i) {
              sum_g += g[off + i];
              sum_gx += g[off + i] * xhat[off + i];
            }
          }
          if (gi[1]) (*gi[1])[c] += sum_gx;
          if (gi[2]) (*gi[2])[c] += sum_g;
          if (!gi[0]) continue;
          S* dx = gi[0]->data();
          const S k = G[c] * inv_std[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * vol;
            for (std::size_t i = 0; i < vol; ++i) {
              if (train) {
                dx[off + i] += k * (g[off + i] - sum_g / S(m) - xhat[off + i] * sum_gx / S(m));
              } else {
                dx[off + i] += k * g[off + i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> relu(const Var<S>& x) {
  const auto& X = x.value();
  x.tape()->note_kinks(X.values());
  Tensor<S> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) out[i] = X[i] > S(0) ? X[i] : S(0);
  Tape<S>* t = x.tape();
  const NodeId ix = x.id();
  return t->record("relu", std::move(out), {ix},
                   [t, ix](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& X = t->value(ix);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (X[i] > S(0)) (*gi[0])[i] += g[i];
                   });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  const auto& X = x.value();
  Tensor<S> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    // Branches keep exp() from overflowing for large |x|.
    if (X[i] >= S(0)) {
      out[i] = S(1) / (S(1) + std::exp(-X[i]));
    } else {
      const S e = std::exp(X[i]);
      out[i] = e / (S(1) + e);
    }
  }
  Tensor<S> saved = out;
  return x.tape()->record("sigmoid", std::move(out), {x.id()},
                          [saved = std::move(saved)](const Tensor<S>& g,
                                                     std::span<Tensor<S>* const> gi) {
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gi[0])[i] += g[i] * saved[i] * (S(1) - saved[i]);
                          });
}

template <typename S>
Var<S> log(const Var<S>& x) {
  const auto& X = x.value();
  Tensor<S> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (!(X[i] > S(0))) throw NumericFault("log: non-positive input");
    out[i] = std::log(X[i]);
  }
  Tape<S>* t = x.tape();
  const NodeId ix = x.id();
  return t->record("log", std::move(out), {ix},
                   [t, ix](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& X = t->value(ix);
                     for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / X[i];
                   });
}

template <typename S>
Var<S> clamp(const Var<S>& x, S lo, S hi) {
  if (!(lo < hi)) throw ContractViolation("clamp: empty range");
  const auto& X = x.value();
  std::vector<S> dist(X.size());
  Tensor<S> out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    out[i] = std::clamp(X[i], lo, hi);
    dist[i] = std::min(X[i] - lo, hi - X[i]);
  }
  x.tape()->note_kinks(dist);
  Tape<S>* t = x.tape();
  const NodeId ix = x.id();
  return t->record("clamp", std::move(out), {ix},
                   [t, ix, lo, hi](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& X = t->value(ix);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (X[i] > lo && X[i] < hi) (*gi[0])[i] += g[i];
                   });
}

template <typename S>
Var<S> softmax(const Var<S>& x, std::size_t axis) {
  const auto& X = x.value();
  if (axis >= X.rank()) bad_shape("softmax", X.shape(), "axis within rank");
  const AxisView v = axis_view(X.shape(), axis);
  Tensor<S> out(X.shape());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < v.len; ++k) mx = std::max(mx, X[base + k * v.inner]);
      S total = 0;
      for (std::size_t k = 0; k < v.len; ++k) {
        const S e = std::exp(X[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < v.len; ++k) out[base + k * v.inner] /= total;
    }
  Tape<S>* t = x.tape();
  Tensor<S> saved = out;
  return t->record("softmax", std::move(out), {x.id()},
                   [v, saved = std::move(saved)](const Tensor<S>& g,
                                                 std::span<Tensor<S>* const> gi) {
                     for (std::size_t o = 0; o < v.outer; ++o)
                       for (std::size_t in = 0; in < v.inner; ++in) {
                         const std::size_t base = o * v.len * v.inner + in;
                         S dot = 0;
                         for (std::size_t k = 0; k < v.len; ++k) {
                           const std::size_t i = base + k * v.inner;
                           dot += g[i] * saved[i];
                         }
                         for (std::size_t k = 0; k < v.len; ++k) {
                           const std::size_t i = base + k * v.inner;
                           (*gi[0])[i] += saved[i] * (g[i] - dot);
                         }
                       }
                   });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  Tensor<S> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return a.tape()->record("add", std::move(out), {a.id(), b.id()},
                          [](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (int k = 0; k < 2; ++k)
                              if (gi[k])
                                for (std::size_t i = 0; i < g.size(); ++i) (*gi[k])[i] += g[i];
                          });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_tape(a, b, "sub");
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  Tensor<S> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return a.tape()->record("sub", std::move(out), {a.id(), b.id()},
                          [](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            if (gi[0])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                            if (gi[1])
                              for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                          });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor<S> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  Tape<S>* t = a.tape();
  const NodeId ia = a.id(), ib = b.id();
  return t->record("mul", std::move(out), {ia, ib},
                   [t, ia, ib](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& A = t->value(ia);
                     const auto& B = t->value(ib);
                     if (gi[0])
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * B[i];
                     if (gi[1])
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * A[i];
                   });
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
  Tensor<S> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return x.tape()->record("scale", std::move(out), {x.id()},
                          [factor](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*gi[0])[i] += g[i] * factor;
                          });
}

template <typename S>
Var<S> add_scalar(const Var<S>& x, S offset) {
  Tensor<S> out = x.value();
  for (auto& v : out.values()) v += offset;
  return x.tape()->record("add_scalar", std::move(out), {x.id()},
                          [](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                          });
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
Var<S> concat(std::span<const Var<S>> xs, std::size_t axis) {
  if (xs.empty()) throw ContractViolation("concat: no inputs");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) bad_shape("concat", first, "axis within rank");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<AxisView> views;
  std::vector<NodeId> ids;
  for (const auto& x : xs) {
    require_same_tape(xs[0], x, "concat");
    Shape probe = x.shape();
    if (probe.size() != first.size()) shape_mismatch("concat", first, probe);
    probe[axis] = first[axis];
    if (probe != first) shape_mismatch("concat", first, x.shape());
    out_shape[axis] += x.shape()[axis];
    views.push_back(axis_view(x.shape(), axis));
    ids.push_back(x.id());
  }
  const AxisView ov = axis_view(out_shape, axis);
  Tensor<S> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& X = xs[k].value();
    const AxisView& v = views[k];
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(X.data() + o * v.len * v.inner, v.len * v.inner,
                  out.data() + o * ov.len * ov.inner + offset * ov.inner);
    offset += v.len;
  }
  return xs[0].tape()->record(
      "concat", std::move(out), std::move(ids),
      [views, ov](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < views.size(); ++k) {
          const AxisView& v = views[k];
          if (gi[k]) {
            for (std::size_t o = 0; o < v.outer; ++o) {
              const S* src = g.data() + o * ov.len * ov.inner + offset * ov.inner;
              S* dst = gi[k]->data() + o * v.len * v.inner;
              for (std::size_t i = 0; i < v.len * v.inner; ++i) dst[i] += src[i];
            }
          }
          offset += v.len;
        }
      });
}

template <typename S>
Var<S> slice(const Var<S>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape in_shape = x.shape();
  if (axis >= in_shape.size() || begin > end || end > in_shape[axis]) {
    bad_shape("slice", in_shape, "0 <= begin <= end <= extent along axis");
  }
  Shape out_shape = in_shape;
  out_shape[axis] = end - begin;
  const AxisView iv = axis_view(in_shape, axis);
  const std::size_t run = (end - begin) * iv.inner;
  Tensor<S> out(out_shape);
  const auto& X = x.value();
  for (std::size_t o = 0; o < iv.outer; ++o)
    std::copy_n(X.data() + (o * iv.len + begin) * iv.inner, run, out.data() + o * run);
  return x.tape()->record("slice", std::move(out), {x.id()},
                          [iv, begin, run](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t o = 0; o < iv.outer; ++o) {
                              const S* src = g.data() + o * run;
                              S* dst = gi[0]->data() + (o * iv.len + begin) * iv.inner;
                              for (std::size_t i = 0; i < run; ++i) dst[i] += src[i];
                            }
                          });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  S acc = 0;
  for (const S v : x.value().values()) acc += v;
  return x.tape()->record("sum", Tensor<S>::scalar(acc), {x.id()},
                          [](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (auto& v : gi[0]->values()) v += g[0];
                          });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractViolation("mean: empty input");
  S acc = 0;
  for (const S v : x.value().values()) acc += v;
  return x.tape()->record("mean", Tensor<S>::scalar(acc / S(n)), {x.id()},
                          [n](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            const S share = g[0] / S(n);
                            for (auto& v : gi[0]->values()) v += share;
                          });
}

template <typename S>
Var<S> mean_axis(const Var<S>& x, std::size_t axis) {
  const auto& X = x.value();
  if (axis >= X.rank()) bad_shape("mean_axis", X.shape(), "axis within rank");
  const AxisView v = axis_view(X.shape(), axis);
  if (v.len == 0) throw ContractViolation("mean_axis: empty axis");
  Shape out_shape = X.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<S> out(out_shape);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.len; ++k)
      for (std::size_t in = 0; in < v.inner; ++in)
        out[o * v.inner + in] += X[(o * v.len + k) * v.inner + in];
  for (auto& e : out.values()) e /= S(v.len);
  return x.tape()->record("mean_axis", std::move(out), {x.id()},
                          [v](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t o = 0; o < v.outer; ++o)
                              for (std::size_t k = 0; k < v.len; ++k)
                                for (std::size_t in = 0; in < v.inner; ++in)
                                  (*gi[0])[(o * v.len + k) * v.inner + in] +=
                                      g[o * v.inner + in] / S(v.len);
                          });
}

template <typename S>
Var<S> masked_select(const Var<S>& x, std::span<const std::uint8_t> mask) {
  const auto& X = x.value();
  if (X.rank() != 1 || X.size() != mask.size()) {
    shape_mismatch("masked_select", X.shape(), Shape{mask.size()});
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) keep.push_back(i);
  Tensor<S> out({keep.size()});
  for (std::size_t j = 0; j < keep.size(); ++j) out[j] = X[keep[j]];
  return x.tape()->record("masked_select", std::move(out), {x.id()},
                          [keep](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t j = 0; j < keep.size(); ++j)
                              (*gi[0])[keep[j]] += g[j];
                          });
}

template <typename S>
Var<S> graph_conv(const Var<S>& x, const Tensor<S>& adjacency, const Var<S>& w) {
  require_same_tape(x, w, "graph_conv");
  const Shape ws = w.shape();
  if (ws.size() != 2 || x.shape().size() != 3 || ws[0] != x.shape()[2]) {
    shape_mismatch("graph_conv", x.shape(), ws);
  }
  Var<S> ax = graph_pool(x, adjacency);
  const std::size_t M = ax.shape()[0], G = ax.shape()[1], C = ax.shape()[2];
  Var<S> flat = reshape(ax, Shape{M * G, C});
  return reshape(matmul(flat, w), Shape{M, G, ws[1]});
}

template <typename S>
Var<S> graph_pool(const Var<S>& x, const Tensor<S>& adjacency) {
  const auto& X = x.value();
  if (X.rank() != 3) bad_shape("graph_conv", X.shape(), "rank-3 [M, K, C]");
  if (adjacency.rank() != 2 || adjacency.dim(1) != X.dim(1)) {
    shape_mismatch("graph_conv", X.shape(), adjacency.shape());
  }
  const std::size_t M = X.dim(0), K = X.dim(1), C = X.dim(2), G = adjacency.dim(0);
  Tensor<S> out({M, G, C});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t gi = 0; gi < G; ++gi) {
      S* o = out.data() + (m * G + gi) * C;
      for (std::size_t k = 0; k < K; ++k) {
        const S a = adjacency[gi * K + k];
        if (a == S(0)) continue;
        const S* xr = X.data() + (m * K + k) * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += a * xr[c];
      }
    }
  return x.tape()->record(
      "graph_conv", std::move(out), {x.id()},
      [adjacency, M, K, C, G](const Tensor<S>& g, std::span<Tensor<S>* const> gin) {
        S* dx = gin[0]->data();
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t gi = 0; gi < G; ++gi) {
            const S* go = g.data() + (m * G + gi) * C;
            for (std::size_t k = 0; k < K; ++k) {
              const S a = adjacency[gi * K + k];
              if (a == S(0)) continue;
              S* d = dx + (m * K + k) * C;
              for (std::size_t c = 0; c < C; ++c) d[c] += a * go[c];
            }
          }
      });
}

template <typename S>
Var<S> weighted_sum(const Var<S>& c, const Var<S>& x) {
  require_same_tape(c, x, "weighted_sum");
  const auto& Cw = c.value();
  const auto& X = x.value();
  if (Cw.rank() != 2 || X.rank() != 3 || Cw.dim(0) != X.dim(0) || Cw.dim(1) != X.dim(1)) {
    shape_mismatch("weighted_sum", Cw.shape(), X.shape());
  }
  const std::size_t B = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<S> out({B, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const S w = Cw[b * n + i];
      const S* xr = X.data() + (b * n + i) * d;
      S* o = out.data() + b * d;
      for (std::size_t k = 0; k < d; ++k) o[k] += w * xr[k];
    }
  Tape<S>* t = c.tape();
  const NodeId ic = c.id(), ix = x.id();
  return t->record("weighted_sum", std::move(out), {ic, ix},
                   [t, ic, ix, B, n, d](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& Cw = t->value(ic);
                     const auto& X = t->value(ix);
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t i = 0; i < n; ++i) {
                         const S* xr = X.data() + (b * n + i) * d;
                         const S* go = g.data() + b * d;
                         if (gi[0]) {
                           S acc = 0;
                           for (std::size_t k = 0; k < d; ++k) acc += go[k] * xr[k];
                           (*gi[0])[b * n + i] += acc;
                         }
                         if (gi[1]) {
                           const S w = Cw[b * n + i];
                           S* dx = gi[1]->data() + (b * n + i) * d;
                           for (std::size_t k = 0; k < d; ++k) dx[k] += w * go[k];
                         }
                       }
                   });
}

template <typename S>
Var<S> scale_rows(const Var<S>& x, const Var<S>& w) {
  require_same_tape(x, w, "scale_rows");
  const auto& X = x.value();
  const auto& Wt = w.value();
  if (X.rank() != 2 || Wt.rank() != 1 || Wt.dim(0) != X.dim(0)) {
    shape_mismatch("scale_rows", X.shape(), Wt.shape());
  }
  const std::size_t n = X.dim(0), d = X.dim(1);
  Tensor<S> out(X.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = X[i * d + k] * Wt[i];
  Tape<S>* t = x.tape();
  const NodeId ix = x.id(), iw = w.id();
  return t->record("scale_rows", std::move(out), {ix, iw},
                   [t, ix, iw, n, d](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                     const auto& X = t->value(ix);
                     const auto& Wt = t->value(iw);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t k = 0; k < d; ++k) {
                         if (gi[0]) (*gi[0])[i * d + k] += g[i * d + k] * Wt[i];
                         if (gi[1]) (*gi[1])[i] += g[i * d + k] * X[i * d + k];
                       }
                   });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  if (numel(shape) != x.value().size()) shape_mismatch("reshape", x.shape(), shape);
  return x.tape()->record("reshape", x.value().reshaped(std::move(shape)), {x.id()},
                          [](const Tensor<S>& g, std::span<Tensor<S>* const> gi) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                          });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// For each output element, the flat index of the source element.
std::vector<std::size_t> permute_index(const Shape& in, std::span<const std::size_t> perm) {
  const auto in_st = strides_of(in);
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = in[perm[i]];
  std::vector<std::size_t> src(numel(in));
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) s += idx[d] * in_st[perm[d]];
    src[flat] = s;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return src;
}

void check_perm(const Shape& in, std::span<const std::size_t> perm) {
  std::vector<bool> seen(in.size(), false);
  if (perm.size() != in.size()) bad_shape("permute", in, "permutation of matching rank");
  for (std::size_t p : perm) {
    if (p >= in.size() || seen[p]) bad_shape("permute", in, "valid permutation");
    seen[p] = true;
  }
}

}  // namespace

template <typename S>
Tensor<S> permuted(const Tensor<S>& x, std::span<const std::size_t> perm) {
  check_perm(x.shape(), perm);
  Shape out_shape(x.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  const auto src = permute_index(x.shape(), perm);
  Tensor<S> out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
  return out;
}

template <typename S>
Var<S> permute(const Var<S>& x, std::span<const std::size_t> perm) {
  const auto& X = x.value();
  check_perm(X.shape(), perm);
  Shape out_shape(X.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = X.dim(perm[i]);
  auto src = permute_index(X.shape(), perm);
  Tensor<S> out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = X[src[i]];
  return x.tape()->record("permute", std::move(out), {x.id()},
                          [src = std::move(src)](const Tensor<S>& g,
                                                 std::span<Tensor<S>* const> gi) {
                            for (std::size_t i = 0; i < src.size(); ++i)
                              (*gi[0])[src[i]] += g[i];
                          });
}

// ---------------------------------------------------------------------------

#define USHL_INSTANTIATE(S)                                                                  \
  template class Tape<S>;                                                                    \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                      \
  template Var<S> bias_add(const Var<S>&, const Var<S>&);                                    \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                       \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, const Conv3dOptions&);                \
  template Var<S> batchnorm3d(const Var<S>&, const Var<S>&, const Var<S>&, NormMode,         \
                              const BatchStats<S>&, S, BatchStats<S>*);                      \
  template Var<S> relu(const Var<S>&);                                                       \
  template Var<S> sigmoid(const Var<S>&);                                                    \
  template Var<S> log(const Var<S>&);                                                        \
  template Var<S> clamp(const Var<S>&, S, S);                                                \
  template Var<S> softmax(const Var<S>&, std::size_t);                                       \
  template Var<S> add(const Var<S>&, const Var<S>&);                                         \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                         \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                         \
  template Var<S> scale(const Var<S>&, S);                                                   \
  template Var<S> add_scalar(const Var<S>&, S);                                              \
  template Var<S> concat(std::span<const Var<S>>, std::size_t);                              \
  template Var<S> slice(const Var<S>&, std::size_t, std::size_t, std::size_t);               \
  template Var<S> sum(const Var<S>&);                                                        \
  template Var<S> mean(const Var<S>&);                                                       \
  template Var<S> mean_axis(const Var<S>&, std::size_t);                                     \
  template Var<S> masked_select(const Var<S>&, std::span<const std::uint8_t>);               \
  template Var<S> graph_conv(const Var<S>&, const Tensor<S>&, const Var<S>&);                \
  template Var<S> graph_pool(const Var<S>&, const Tensor<S>&);                               \
  template Var<S> weighted_sum(const Var<S>&, const Var<S>&);                                \
  template Var<S> scale_rows(const Var<S>&, const Var<S>&);                                  \
  template Var<S> reshape(const Var<S>&, Shape);                                             \
  template Var<S> permute(const Var<S>&, std::span<const std::size_t>);                      \
  template Tensor<S> permuted(const Tensor<S>&, std::span<const std::size_t>);

USHL_INSTANTIATE(float)
USHL_INSTANTIATE(double)

#undef USHL_INSTANTIATE

}  // namespace ushl::ad
