#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bip/errors.hpp"
#include "bip/linalg.hpp"
#include "bip/rng.hpp"

namespace bip::nn {

enum class Activation { Linear, Tanh, Elu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Tanh: return "tanh";
    case Activation::Elu: return "elu";
  }
  return "linear";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "linear") return Activation::Linear;
  if (s == "tanh") return Activation::Tanh;
  if (s == "elu") return Activation::Elu;
  throw ConfigError("unknown activation tag: " + s);
}

inline double act_eval(Activation a, double z) {
  switch (a) {
    case Activation::Linear: return z;
    case Activation::Tanh: return std::tanh(z);
    case Activation::Elu: return z >= 0.0 ? z : std::expm1(z);
  }
  return z;
}

inline double act_deriv(Activation a, double z) {
  switch (a) {
    case Activation::Linear: return 1.0;
    case Activation::Tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::Elu: return z >= 0.0 ? 1.0 : std::exp(z);
  }
  return 1.0;
}

inline double act_deriv2(Activation a, double z) {
  switch (a) {
    case Activation::Linear: return 0.0;
    case Activation::Tanh: {
      const double t = std::tanh(z);
      return -2.0 * t * (1.0 - t * t);
    }
    case Activation::Elu: return z >= 0.0 ? 0.0 : std::exp(z);
  }
  return 0.0;
}

/// One fully connected layer: out = act(W in + b), W is out x in.
struct Layer {
  std::string name;
  Mat w;
  Vec b;
  Activation act = Activation::Linear;

  std::size_t in_dim() const { return w.cols(); }
  std::size_t out_dim() const { return w.rows(); }
};

/// Named stack of layers; the parameter tree for one network.
struct Mlp {
  std::vector<Layer> layers;

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.w.data().size() + l.b.size();
    return n;
  }

  bool finite() const {
    for (const auto& l : layers)
      if (!all_finite(l.w.data()) || !all_finite(l.b)) return false;
    return true;
  }

  void check_chained() const {
    for (std::size_t i = 1; i < layers.size(); ++i)
      if (layers[i].in_dim() != layers[i - 1].out_dim())
        throw ShapeError("Mlp: layer dimensions do not chain at layer " + layers[i].name);
  }
};

/// Per-parameter partials, shape-identical to an Mlp.
struct LayerGrad {
  Mat w;
  Vec b;
};

struct Grad {
  std::vector<LayerGrad> layers;

  static Grad zeros_like(const Mlp& net) {
    Grad g;
    g.layers.reserve(net.layers.size());
    for (const auto& l : net.layers)
      g.layers.push_back({Mat(l.out_dim(), l.in_dim()), Vec(l.out_dim(), 0.0)});
    return g;
  }

  void add(const Grad& o, double scale = 1.0) {
    if (o.layers.size() != layers.size()) throw ShapeError("Grad::add: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      axpy(scale, o.layers[i].w.data(), layers[i].w.data());
      axpy(scale, o.layers[i].b, layers[i].b);
    }
  }

  void scale(double s) {
    for (auto& l : layers) {
      for (auto& v : l.w.data()) v *= s;
      for (auto& v : l.b) v *= s;
    }
  }

  bool finite() const {
    for (const auto& l : layers)
      if (!all_finite(l.w.data()) || !all_finite(l.b)) return false;
    return true;
  }
};

/// Activation cache from one forward pass. pre[l] holds z_l, post[l]
/// holds act(z_l); input is kept for the first layer's weight grads.
struct Tape {
  Vec input;
  std::vector<Vec> pre;
  std::vector<Vec> post;
};

inline std::pair<Vec, Tape> forward(const Mlp& net, const Vec& input) {
  if (net.layers.empty()) throw ShapeError("forward: empty network");
  if (input.size() != net.in_dim())
    throw ShapeError("forward: input length " + std::to_string(input.size()) +
                     " != " + std::to_string(net.in_dim()));
  Tape tape;
  tape.input = input;
  tape.pre.reserve(net.layers.size());
  tape.post.reserve(net.layers.size());
  const Vec* cur = &input;
  for (const auto& l : net.layers) {
    Vec z = matvec(l.w, *cur);
    axpy(1.0, l.b, z);
    Vec a(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) a[i] = act_eval(l.act, z[i]);
    tape.pre.push_back(std::move(z));
    tape.post.push_back(std::move(a));
    cur = &tape.post.back();
  }
  return {tape.post.back(), tape};
}

inline Vec forward_only(const Mlp& net, const Vec& input) {
  return forward(net, input).first;
}

/// Reverse-mode gradients of a scalar loss whose gradient at the network
/// output is out_grad. Returns the parameter gradients and dL/d(input).
inline std::pair<Grad, Vec> backward(const Mlp& net, const Tape& tape, const Vec& out_grad) {
  const std::size_t nl = net.layers.size();
  if (tape.pre.size() != nl) throw ShapeError("backward: tape/params mismatch");
  if (out_grad.size() != net.out_dim()) throw ShapeError("backward: out_grad dimension");
  Grad g = Grad::zeros_like(net);
  // delta = dL/dz for the current layer.
  Vec delta(out_grad.size());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = out_grad[i] * act_deriv(net.layers[nl - 1].act, tape.pre[nl - 1][i]);
  for (std::size_t li = nl; li-- > 0;) {
    const Layer& l = net.layers[li];
    const Vec& in = (li == 0) ? tape.input : tape.post[li - 1];
    LayerGrad& lg = g.layers[li];
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      const double d = delta[r];
      lg.b[r] = d;
      for (std::size_t c = 0; c < l.in_dim(); ++c) lg.w(r, c) = d * in[c];
    }
    Vec da = matvec_t(l.w, delta);  // dL/d(input of this layer)
    if (li == 0) return {std::move(g), std::move(da)};
    delta.assign(da.size(), 0.0);
    for (std::size_t i = 0; i < da.size(); ++i)
      delta[i] = da[i] * act_deriv(net.layers[li - 1].act, tape.pre[li - 1][i]);
  }
  throw ShapeError("backward: unreachable");
}

/// Same reverse sweep as backward, but accumulates scale * gradient into an
/// existing Grad without allocating one per call. Used by batched training
/// loops where per-sample Grad allocation dominates the runtime.
inline Vec backward_acc(const Mlp& net, const Tape& tape, const Vec& out_grad, Grad& acc,
                        double scale = 1.0) {
  const std::size_t nl = net.layers.size();
  if (tape.pre.size() != nl) throw ShapeError("backward_acc: tape/params mismatch");
  if (out_grad.size() != net.out_dim()) throw ShapeError("backward_acc: out_grad dimension");
  if (acc.layers.size() != nl) throw ShapeError("backward_acc: grad/params mismatch");
  Vec delta(out_grad.size());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = out_grad[i] * act_deriv(net.layers[nl - 1].act, tape.pre[nl - 1][i]);
  for (std::size_t li = nl; li-- > 0;) {
    const Layer& l = net.layers[li];
    const Vec& in = (li == 0) ? tape.input : tape.post[li - 1];
    LayerGrad& lg = acc.layers[li];
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      const double d = scale * delta[r];
      lg.b[r] += d;
      double* wrow = &lg.w(r, 0);
      for (std::size_t c = 0; c < l.in_dim(); ++c) wrow[c] += d * in[c];
    }
    Vec da = matvec_t(l.w, delta);
    if (li == 0) {
      if (scale != 1.0)
        for (auto& v : da) v *= scale;
      return da;
    }
    delta.assign(da.size(), 0.0);
    for (std::size_t i = 0; i < da.size(); ++i)
      delta[i] = da[i] * act_deriv(net.layers[li - 1].act, tape.pre[li - 1][i]);
  }
  throw ShapeError("backward_acc: unreachable");
}

// Batched forward/backward: rows of the input matrix are samples. The
// batched path exists purely for speed; it computes the same values as the
// per-sample forward/backward above.

struct BatchTape {
  Mat input;
  std::vector<Mat> pre;
  std::vector<Mat> post;
};

inline std::pair<Mat, BatchTape> forward_batch(const Mlp& net, const Mat& x) {
  if (net.layers.empty()) throw ShapeError("forward_batch: empty network");
  if (x.cols() != net.in_dim()) throw ShapeError("forward_batch: input dimension");
  BatchTape tape;
  tape.input = x;
  const std::size_t nb = x.rows();
  const Mat* cur = &tape.input;
  for (const auto& l : net.layers) {
    const std::size_t no = l.out_dim(), ni = l.in_dim();
    Mat z(nb, no);
    for (std::size_t s = 0; s < nb; ++s) {
      const double* __restrict__ xr = cur->row(s);
      double* __restrict__ zr = z.row(s);
      // four output rows at a time to reuse each input load
      std::size_t o = 0;
      for (; o + 4 <= no; o += 4) {
        const double* __restrict__ w0 = l.w.row(o);
        const double* __restrict__ w1 = l.w.row(o + 1);
        const double* __restrict__ w2 = l.w.row(o + 2);
        const double* __restrict__ w3 = l.w.row(o + 3);
        double a0 = l.b[o], a1 = l.b[o + 1], a2 = l.b[o + 2], a3 = l.b[o + 3];
        for (std::size_t c = 0; c < ni; ++c) {
          const double xv = xr[c];
          a0 += w0[c] * xv;
          a1 += w1[c] * xv;
          a2 += w2[c] * xv;
          a3 += w3[c] * xv;
        }
        zr[o] = a0;
        zr[o + 1] = a1;
        zr[o + 2] = a2;
        zr[o + 3] = a3;
      }
      for (; o < no; ++o) {
        const double* __restrict__ wr = l.w.row(o);
        double acc = l.b[o];
        for (std::size_t c = 0; c < ni; ++c) acc += wr[c] * xr[c];
        zr[o] = acc;
      }
    }
    Mat a(nb, no);
    for (std::size_t i = 0; i < z.data().size(); ++i)
      a.data()[i] = act_eval(l.act, z.data()[i]);
    tape.pre.push_back(std::move(z));
    tape.post.push_back(std::move(a));
    cur = &tape.post.back();
  }
  return {tape.post.back(), tape};
}

/// Accumulates parameter gradients for a whole batch into acc and returns
/// the batch of input gradients. dy holds dL/d(output), one row per sample.
inline Mat backward_batch_acc(const Mlp& net, const BatchTape& tape, const Mat& dy, Grad& acc) {
  const std::size_t nl = net.layers.size();
  if (tape.pre.size() != nl) throw ShapeError("backward_batch_acc: tape/params mismatch");
  if (dy.cols() != net.out_dim() || dy.rows() != tape.input.rows())
    throw ShapeError("backward_batch_acc: dy shape");
  if (acc.layers.size() != nl) throw ShapeError("backward_batch_acc: grad/params mismatch");
  const std::size_t nb = dy.rows();
  Mat delta(nb, dy.cols());
  {
    const Layer& l = net.layers[nl - 1];
    const Mat& pre = tape.pre[nl - 1];
    for (std::size_t i = 0; i < delta.data().size(); ++i)
      delta.data()[i] = dy.data()[i] * act_deriv(l.act, pre.data()[i]);
  }
  for (std::size_t li = nl; li-- > 0;) {
    const Layer& l = net.layers[li];
    const std::size_t no = l.out_dim(), ni = l.in_dim();
    const Mat& in = (li == 0) ? tape.input : tape.post[li - 1];
    LayerGrad& lg = acc.layers[li];
    // weight/bias gradients (G += delta^T * in) and input gradients
    // (dX = delta * W), blocked over samples (L2-resident slab of in/dx)
    // and over four outputs (register reuse of each streamed load)
    constexpr std::size_t kSampleBlock = 64;
    Mat dx(nb, ni);
    for (std::size_t s0 = 0; s0 < nb; s0 += kSampleBlock) {
      const std::size_t s1 = std::min(nb, s0 + kSampleBlock);
      std::size_t o = 0;
      for (; o + 4 <= no; o += 4) {
        double* __restrict__ g0 = lg.w.row(o);
        double* __restrict__ g1 = lg.w.row(o + 1);
        double* __restrict__ g2 = lg.w.row(o + 2);
        double* __restrict__ g3 = lg.w.row(o + 3);
        const double* __restrict__ w0 = l.w.row(o);
        const double* __restrict__ w1 = l.w.row(o + 1);
        const double* __restrict__ w2 = l.w.row(o + 2);
        const double* __restrict__ w3 = l.w.row(o + 3);
        for (std::size_t s = s0; s < s1; ++s) {
          const double d0 = delta(s, o), d1 = delta(s, o + 1);
          const double d2 = delta(s, o + 2), d3 = delta(s, o + 3);
          lg.b[o] += d0;
          lg.b[o + 1] += d1;
          lg.b[o + 2] += d2;
          lg.b[o + 3] += d3;
          const double* __restrict__ ir = in.row(s);
          double* __restrict__ dr = dx.row(s);
          for (std::size_t c = 0; c < ni; ++c) {
            const double xv = ir[c];
            g0[c] += d0 * xv;
            g1[c] += d1 * xv;
            g2[c] += d2 * xv;
            g3[c] += d3 * xv;
            dr[c] += d0 * w0[c] + d1 * w1[c] + d2 * w2[c] + d3 * w3[c];
          }
        }
      }
      for (; o < no; ++o) {
        double* __restrict__ grow = lg.w.row(o);
        const double* __restrict__ wr = l.w.row(o);
        for (std::size_t s = s0; s < s1; ++s) {
          const double d = delta(s, o);
          lg.b[o] += d;
          const double* __restrict__ ir = in.row(s);
          double* __restrict__ dr = dx.row(s);
          for (std::size_t c = 0; c < ni; ++c) {
            grow[c] += d * ir[c];
            dr[c] += d * wr[c];
          }
        }
      }
    }
    if (li == 0) return dx;
    const Layer& lp = net.layers[li - 1];
    const Mat& pre = tape.pre[li - 1];
    delta = Mat(nb, ni);
    for (std::size_t i = 0; i < delta.data().size(); ++i)
      delta.data()[i] = dx.data()[i] * act_deriv(lp.act, pre.data()[i]);
  }
  throw ShapeError("backward_batch_acc: unreachable");
}

/// Gradient of the scalar output w.r.t. the input (network must have a
/// 1-dimensional output).
inline Vec input_gradient(const Mlp& net, const Tape& tape) {
  if (net.out_dim() != 1) throw ShapeError("input_gradient: output must be scalar");
  return backward(net, tape, Vec{1.0}).second;
}

/// For a scalar-output network, computes P = ||d y / d input||^2 and its
/// exact gradient w.r.t. the parameters (double backprop through the
/// input-gradient pass).
inline std::pair<double, Grad> input_grad_sq_param_grad(const Mlp& net, const Tape& tape) {
  const std::size_t nl = net.layers.size();
  if (net.out_dim() != 1) throw ShapeError("input_grad_sq_param_grad: output must be scalar");
  if (tape.pre.size() != nl) throw ShapeError("input_grad_sq_param_grad: tape mismatch");

  // First pass: u[l] = dy/dz_l, v[l] = dy/da_{l-1} = W_l^T u[l].
  std::vector<Vec> u(nl), v(nl);
  {
    Vec cur(1);
    cur[0] = act_deriv(net.layers[nl - 1].act, tape.pre[nl - 1][0]);
    u[nl - 1] = cur;
    for (std::size_t li = nl; li-- > 0;) {
      v[li] = matvec_t(net.layers[li].w, u[li]);
      if (li == 0) break;
      Vec& prev = u[li - 1];
      prev.assign(v[li].size(), 0.0);
      for (std::size_t i = 0; i < prev.size(); ++i)
        prev[i] = v[li][i] * act_deriv(net.layers[li - 1].act, tape.pre[li - 1][i]);
    }
  }
  const double penalty = norm2_sq(v[0]);

  // Adjoint pass over the gradient computation (bars are dP/d.).
  Grad g = Grad::zeros_like(net);
  std::vector<Vec> zbar(nl);
  for (std::size_t li = 0; li < nl; ++li) zbar[li].assign(u[li].size(), 0.0);

  Vec vbar = v[0];
  for (auto& x : vbar) x *= 2.0;  // dP/dv_0 = 2 v_0
  for (std::size_t li = 0; li < nl; ++li) {
    const Layer& l = net.layers[li];
    // v[li] = W^T u[li]: dP/dW += u v̄^T, ū = W v̄.
    LayerGrad& lg = g.layers[li];
    for (std::size_t r = 0; r < l.out_dim(); ++r)
      for (std::size_t c = 0; c < l.in_dim(); ++c) lg.w(r, c) += u[li][r] * vbar[c];
    Vec ubar = matvec(l.w, vbar);
    if (li + 1 < nl) {
      // u[li] = v[li+1] .* act'(z_li)
      const Vec& z = tape.pre[li];
      vbar.assign(ubar.size(), 0.0);
      for (std::size_t i = 0; i < ubar.size(); ++i) {
        vbar[i] = ubar[i] * act_deriv(l.act, z[i]);
        zbar[li][i] += ubar[i] * v[li + 1][i] * act_deriv2(l.act, z[i]);
      }
    } else {
      // u[L-1] = act'(z_{L-1})
      zbar[li][0] += ubar[0] * act_deriv2(l.act, tape.pre[li][0]);
    }
  }

  // Propagate the z̄ adjoints through the original forward graph.
  for (std::size_t li = nl; li-- > 0;) {
    const Layer& l = net.layers[li];
    const Vec& in = (li == 0) ? tape.input : tape.post[li - 1];
    LayerGrad& lg = g.layers[li];
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      const double zb = zbar[li][r];
      if (zb == 0.0) continue;
      lg.b[r] += zb;
      for (std::size_t c = 0; c < l.in_dim(); ++c) lg.w(r, c) += zb * in[c];
    }
    if (li == 0) break;
    Vec abar = matvec_t(l.w, zbar[li]);
    const Vec& zprev = tape.pre[li - 1];
    for (std::size_t i = 0; i < abar.size(); ++i)
      zbar[li - 1][i] += abar[i] * act_deriv(net.layers[li - 1].act, zprev[i]);
  }
  return {penalty, std::move(g)};
}

/// Bias-corrected adaptive-moment optimizer state for one Mlp.
struct AdamState {
  long step = 0;
  Grad m;
  Grad v;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState make(const Mlp& net, double lr_) {
    AdamState s;
    s.m = Grad::zeros_like(net);
    s.v = Grad::zeros_like(net);
    s.lr = lr_;
    return s;
  }
};

inline void adam_step(Mlp& net, const Grad& g, AdamState& st) {
  if (g.layers.size() != net.layers.size()) throw ShapeError("adam_step: grad/params mismatch");
  if (!g.finite()) throw NumericError("adam_step: non-finite gradient");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto update = [&](Vec& p, const Vec& gv, Vec& m, Vec& v) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gv[i];
        v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gv[i] * gv[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
      }
    };
    update(net.layers[li].w.data(), g.layers[li].w.data(), st.m.layers[li].w.data(),
           st.v.layers[li].w.data());
    update(net.layers[li].b, g.layers[li].b, st.m.layers[li].b, st.v.layers[li].b);
  }
}

/// Orthogonal-ish init: random normal rows, modified Gram-Schmidt, scaled
/// by gain. Biases start at zero.
inline Mat orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  Mat w(rows, cols);
  for (auto& x : w.data()) x = rng.normal();
  // Orthonormalize the shorter side.
  const std::size_t n = std::min(rows, cols);
  auto row_ptr = [&](std::size_t r) { return &w.data()[r * cols]; };
  if (rows <= cols) {
    for (std::size_t r = 0; r < n; ++r) {
      double* wr = row_ptr(r);
      for (std::size_t p = 0; p < r; ++p) {
        const double* wp = row_ptr(p);
        double d = 0.0;
        for (std::size_t c = 0; c < cols; ++c) d += wr[c] * wp[c];
        for (std::size_t c = 0; c < cols; ++c) wr[c] -= d * wp[c];
      }
      double nrm = 0.0;
      for (std::size_t c = 0; c < cols; ++c) nrm += wr[c] * wr[c];
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) nrm = 1.0;
      for (std::size_t c = 0; c < cols; ++c) wr[c] *= gain / nrm;
    }
  } else {
    // Orthonormalize columns instead.
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double d = 0.0;
        for (std::size_t r = 0; r < rows; ++r) d += w(r, c) * w(r, p);
        for (std::size_t r = 0; r < rows; ++r) w(r, c) -= d * w(r, p);
      }
      double nrm = 0.0;
      for (std::size_t r = 0; r < rows; ++r) nrm += w(r, c) * w(r, c);
      nrm = std::sqrt(nrm);
      if (nrm < 1e-12) nrm = 1.0;
      for (std::size_t r = 0; r < rows; ++r) w(r, c) *= gain / nrm;
    }
  }
  return w;
}

/// Builds an MLP with the given layer sizes; hidden layers use
/// hidden_act, the output layer is linear with out_gain init.
inline Mlp make_mlp(const std::string& name, const std::vector<std::size_t>& sizes,
                    Activation hidden_act, Rng& rng, double out_gain = 1.0) {
  if (sizes.size() < 2) throw ShapeError("make_mlp: need at least input and output sizes");
  Mlp net;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool last = (i + 2 == sizes.size());
    Layer l;
    l.name = name + ".l" + std::to_string(i);
    l.act = last ? Activation::Linear : hidden_act;
    l.w = orthogonal_init(sizes[i + 1], sizes[i], last ? out_gain : 1.0, rng);
    l.b = Vec(sizes[i + 1], 0.0);
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace bip::nn
