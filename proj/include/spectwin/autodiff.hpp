#pragma once

// Reverse-mode differentiation on dense 64-bit tensors. The op set is
// exactly what a small 1-D conv encoder, an MLP head and a scalar loss
// need; a Tape records one forward pass (define-by-run) and is consumed
// by a single backward() call.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace spectwin {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

// Shared handle to a tensor. Copies alias the same storage, which is what
// lets the optimizer update the same buffers the model reads.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}

  Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : d_(std::make_shared<TensorData>()) {
    check_shape(shape);
    d_->shape = std::move(shape);
    d_->values.assign(shape_numel(d_->shape), fill);
    d_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : d_(std::make_shared<TensorData>()) {
    check_shape(shape);
    if (values.size() != shape_numel(shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " +
                                  shape_str(shape));
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  const Shape& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->values.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  double value() const {
    if (numel() != 1)
      throw std::logic_error("tensor: value() on non-scalar shape " +
                             shape_str(d_->shape));
    return d_->values[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad() {
    if (d_->grad.empty())
      throw std::logic_error("tensor: gradient not populated; run backward()");
    return d_->grad;
  }
  const std::vector<double>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }
  void clear_grad() { d_->grad.clear(); }

  Tensor clone() const {
    Tensor t(d_->shape, d_->values, d_->requires_grad);
    t.d_->grad = d_->grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty())
      throw std::invalid_argument("tensor: empty shape");
    for (std::size_t d : shape)
      if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension");
  }

  std::shared_ptr<TensorData> d_;
  friend class Tape;
};

// One recorded forward pass. Ops append steps in execution order, so the
// reverse sweep is already topologically sorted. backward() may run once;
// the recording is consumed afterwards.
class Tape {
 public:
  int node_of(const Tensor& t) const {
    auto it = ids_.find(t.d_.get());
    return it == ids_.end() ? -1 : it->second;
  }

  // Registers a tensor as a leaf of the recording (no-op if already known).
  int touch(const Tensor& t) {
    auto it = ids_.find(t.d_.get());
    if (it != ids_.end()) return it->second;
    int id = next_id_++;
    ids_.emplace(t.d_.get(), id);
    tensors_.push_back(t);
    return id;
  }

  int record(const std::vector<Tensor>& inputs, const Tensor& output,
             std::function<void()> backward_fn) {
    if (consumed_)
      throw std::runtime_error("recording already consumed by backward()");
    for (const Tensor& in : inputs) touch(in);
    if (ids_.count(output.d_.get()))
      throw std::logic_error("op output tensor was already recorded");
    int out_id = touch(output);
    steps_.push_back(Step{output, std::move(backward_fn)});
    outputs_.insert(output.d_.get());
    return out_id;
  }

  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  void backward(const Tensor& loss) {
    if (consumed_)
      throw std::runtime_error("backward: no active recording (consumed)");
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss.shape()));
    if (!outputs_.count(loss.d_.get()))
      throw std::runtime_error(
          "backward: loss was not produced under this recording");
    for (Tensor& t : tensors_) t.d_->grad.assign(t.numel(), 0.0);
    loss.d_->grad[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
    consumed_ = true;
    steps_.clear();
    outputs_.clear();
  }

 private:
  struct Step {
    Tensor output;
    std::function<void()> fn;
  };
  std::vector<Step> steps_;
  std::vector<Tensor> tensors_;  // keep-alive, in node-id order
  std::unordered_map<const TensorData*, int> ids_;
  std::unordered_set<const TensorData*> outputs_;
  int next_id_ = 0;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Forward computes values eagerly; the backward closure reads the
// output gradient and accumulates into the input gradients.
// ---------------------------------------------------------------------------

// input [B,Cin,L] (*) weight [Cout,Cin,K] + bias [Cout] -> [B,Cout,Lout],
// cross-correlation form, Lout = floor((L + 2*padding - K)/stride) + 1.
inline Tensor conv1d(Tape& tape, const Tensor& input, const Tensor& weight,
                     const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (input.shape().size() != 3)
    throw std::invalid_argument("conv1d: input must be [B,Cin,L], got " +
                                shape_str(input.shape()));
  if (weight.shape().size() != 3)
    throw std::invalid_argument("conv1d: weight must be [Cout,Cin,K], got " +
                                shape_str(weight.shape()));
  if (stride == 0) throw std::invalid_argument("conv1d: stride must be >= 1");
  const std::size_t B = input.dim(0), Cin = input.dim(1), L = input.dim(2);
  const std::size_t Cout = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != Cin)
    throw std::invalid_argument(
        "conv1d: channel mismatch: input " + shape_str(input.shape()) +
        " has " + std::to_string(Cin) + " channels, weight " +
        shape_str(weight.shape()) + " expects " +
        std::to_string(weight.dim(1)));
  if (bias.shape() != Shape{Cout})
    throw std::invalid_argument("conv1d: bias must be [" +
                                std::to_string(Cout) + "], got " +
                                shape_str(bias.shape()));
  const std::size_t Lp = L + 2 * padding;
  if (Lp < K)
    throw std::invalid_argument(
        "conv1d: kernel " + std::to_string(K) + " longer than padded input " +
        std::to_string(Lp));
  const std::size_t Lout = (Lp - K) / stride + 1;

  Tensor out(Shape{B, Cout, Lout});
  const double* in = input.values().data();
  const double* w = weight.values().data();
  const double* bs = bias.values().data();
  double* o = out.values().data();
  std::vector<double> pad(Cin * Lp);
  for (std::size_t b = 0; b < B; ++b) {
    pad.assign(Cin * Lp, 0.0);
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t l = 0; l < L; ++l)
        pad[ci * Lp + padding + l] = in[(b * Cin + ci) * L + l];
    for (std::size_t co = 0; co < Cout; ++co) {
      double* orow = o + (b * Cout + co) * Lout;
      for (std::size_t lo = 0; lo < Lout; ++lo) orow[lo] = bs[co];
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const double* prow = pad.data() + ci * Lp;
        const double* wrow = w + (co * Cin + ci) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double wv = wrow[k];
          for (std::size_t lo = 0; lo < Lout; ++lo)
            orow[lo] += wv * prow[lo * stride + k];
        }
      }
    }
  }

  Tensor in_t = input, w_t = weight, b_t = bias;
  tape.record({input, weight, bias}, out, [in_t, w_t, b_t, out, stride,
                                           padding, B, Cin, Cout, L, K, Lp,
                                           Lout]() mutable {
    const double* go = out.grad().data();
    const double* in = in_t.values().data();
    const double* w = w_t.values().data();
    double* gi = in_t.grad().data();
    double* gw = w_t.grad().data();
    double* gb = b_t.grad().data();
    std::vector<double> pad(Cin * Lp), gpad(Cin * Lp);
    for (std::size_t b = 0; b < B; ++b) {
      pad.assign(Cin * Lp, 0.0);
      gpad.assign(Cin * Lp, 0.0);
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t l = 0; l < L; ++l)
          pad[ci * Lp + padding + l] = in[(b * Cin + ci) * L + l];
      for (std::size_t co = 0; co < Cout; ++co) {
        const double* grow = go + (b * Cout + co) * Lout;
        for (std::size_t lo = 0; lo < Lout; ++lo) gb[co] += grow[lo];
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          double* gprow = gpad.data() + ci * Lp;
          const double* prow = pad.data() + ci * Lp;
          const double* wrow = w + (co * Cin + ci) * K;
          double* gwrow = gw + (co * Cin + ci) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double wv = wrow[k];
            double acc = 0.0;
            for (std::size_t lo = 0; lo < Lout; ++lo) {
              const double g = grow[lo];
              acc += g * prow[lo * stride + k];
              gprow[lo * stride + k] += g * wv;
            }
            gwrow[k] += acc;
          }
        }
      }
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t l = 0; l < L; ++l)
          gi[(b * Cin + ci) * L + l] += gpad[ci * Lp + padding + l];
    }
  });
  return out;
}

// input [B,Din] * W^T [Din,Dout] + b -> [B,Dout]
inline Tensor affine(Tape& tape, const Tensor& input, const Tensor& W,
                     const Tensor& b) {
  if (input.shape().size() != 2)
    throw std::invalid_argument("affine: input must be [B,Din], got " +
                                shape_str(input.shape()));
  if (W.shape().size() != 2)
    throw std::invalid_argument("affine: W must be [Dout,Din], got " +
                                shape_str(W.shape()));
  const std::size_t B = input.dim(0), Din = input.dim(1), Dout = W.dim(0);
  if (W.dim(1) != Din)
    throw std::invalid_argument("affine: input " + shape_str(input.shape()) +
                                " incompatible with W " +
                                shape_str(W.shape()));
  if (b.shape() != Shape{Dout})
    throw std::invalid_argument("affine: bias must be [" +
                                std::to_string(Dout) + "], got " +
                                shape_str(b.shape()));

  Tensor out(Shape{B, Dout});
  const double* in = input.values().data();
  const double* w = W.values().data();
  const double* bv = b.values().data();
  double* o = out.values().data();
  for (std::size_t r = 0; r < B; ++r) {
    const double* irow = in + r * Din;
    double* orow = o + r * Dout;
    for (std::size_t k = 0; k < Dout; ++k) {
      const double* wrow = w + k * Din;
      double acc = bv[k];
      for (std::size_t i = 0; i < Din; ++i) acc += irow[i] * wrow[i];
      orow[k] = acc;
    }
  }

  Tensor in_t = input, w_t = W, b_t = b;
  tape.record({input, W, b}, out, [in_t, w_t, b_t, out, B, Din, Dout]() mutable {
    const double* go = out.grad().data();
    const double* in = in_t.values().data();
    const double* w = w_t.values().data();
    double* gi = in_t.grad().data();
    double* gw = w_t.grad().data();
    double* gb = b_t.grad().data();
    for (std::size_t r = 0; r < B; ++r) {
      const double* grow = go + r * Dout;
      const double* irow = in + r * Din;
      double* girow = gi + r * Din;
      for (std::size_t k = 0; k < Dout; ++k) {
        const double g = grow[k];
        gb[k] += g;
        const double* wrow = w + k * Din;
        double* gwrow = gw + k * Din;
        for (std::size_t i = 0; i < Din; ++i) {
          girow[i] += g * wrow[i];
          gwrow[i] += g * irow[i];
        }
      }
    }
  });
  return out;
}

// Elementwise max(0, x); subgradient at 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.numel();
  const double* xv = x.values().data();
  double* o = out.values().data();
  for (std::size_t i = 0; i < n; ++i) o[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor x_t = x;
  tape.record({x}, out, [x_t, out, n]() mutable {
    const double* go = out.grad().data();
    const double* xv = x_t.values().data();
    double* gx = x_t.grad().data();
    for (std::size_t i = 0; i < n; ++i)
      if (xv[i] > 0.0) gx[i] += go[i];
  });
  return out;
}

// [B,C,L] -> [B,C], mean over the last axis.
inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.shape().size() != 3)
    throw std::invalid_argument("global_avg_pool: input must be [B,C,L], got " +
                                shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor out(Shape{B, C});
  const double* xv = x.values().data();
  double* o = out.values().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) acc += xv[bc * L + l];
    o[bc] = acc / static_cast<double>(L);
  }
  Tensor x_t = x;
  tape.record({x}, out, [x_t, out, B, C, L]() mutable {
    const double* go = out.grad().data();
    double* gx = x_t.grad().data();
    const double inv = 1.0 / static_cast<double>(L);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const double g = go[bc] * inv;
      for (std::size_t l = 0; l < L; ++l) gx[bc * L + l] += g;
    }
  });
  return out;
}

inline void check_same_shape(const char* op, const Tensor& a,
                             const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] + b.values()[i];
  Tensor a_t = a, b_t = b;
  tape.record({a, b}, out, [a_t, b_t, out, n]() mutable {
    const double* go = out.grad().data();
    double* ga = a_t.grad().data();
    double* gb = b_t.grad().data();
    for (std::size_t i = 0; i < n; ++i) {
      ga[i] += go[i];
      gb[i] += go[i];
    }
  });
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  Tensor a_t = a, b_t = b;
  tape.record({a, b}, out, [a_t, b_t, out, n]() mutable {
    const double* go = out.grad().data();
    double* ga = a_t.grad().data();
    double* gb = b_t.grad().data();
    for (std::size_t i = 0; i < n; ++i) {
      ga[i] += go[i] * b_t.values()[i];
      gb[i] += go[i] * a_t.values()[i];
    }
  });
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, double alpha) {
  Tensor out(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = alpha * x.values()[i];
  Tensor x_t = x;
  tape.record({x}, out, [x_t, out, alpha, n]() mutable {
    const double* go = out.grad().data();
    double* gx = x_t.grad().data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += alpha * go[i];
  });
  return out;
}

// Reduce to a scalar [1].
inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  Tensor x_t = x;
  const std::size_t n = x.numel();
  tape.record({x}, out, [x_t, out, n]() mutable {
    const double g = out.grad()[0];
    double* gx = x_t.grad().data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;  // per parameter, zero at t = 0
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p].numel(), 0.0);
      state.v[p].assign(params[p].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state tracks " +
                                std::to_string(state.m.size()) +
                                " parameters, got " +
                                std::to_string(params.size()));
  for (std::size_t p = 0; p < params.size(); ++p)
    if (!params[p].has_grad())
      throw std::runtime_error("adam_step: parameter " + std::to_string(p) +
                               " has no gradient");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    double* w = params[p].values().data();
    const double* g = params[p].grad().data();
    double* m = state.m[p].data();
    double* v = state.v[p].data();
    const std::size_t n = params[p].numel();
    if (state.m[p].size() != n)
      throw std::invalid_argument("adam_step: parameter " + std::to_string(p) +
                                  " changed size");
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Central finite differences, (f(x+h e_i) - f(x-h e_i)) / 2h. Test oracle;
// f must not mutate its argument's storage.
inline Tensor finite_difference_gradient(
    const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (h <= 0.0)
    throw std::invalid_argument("finite_difference_gradient: h must be > 0");
  Tensor probe = x.clone();
  Tensor g(x.shape());
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe.values()[i];
    probe.values()[i] = orig + h;
    const double fp = f(probe);
    probe.values()[i] = orig - h;
    const double fm = f(probe);
    probe.values()[i] = orig;
    g.values()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace spectwin
