#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace eclab {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

struct TensorData {
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;  // same length as v when grad is enabled
  bool grad_enabled = false;
};

// Dense 64-bit tensor handle. Copies share storage; all network math flows
// through the free-function ops below, which record backward closures on the
// active Tape when any operand has gradients enabled.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) { d_->shape = {1}; d_->v = {0.0}; }

  static Tensor zeros(const Shape& s) {
    Tensor t;
    t.d_->shape = s;
    t.d_->v.assign(shape_numel(s), 0.0);
    return t;
  }
  static Tensor full(const Shape& s, double value) {
    Tensor t = zeros(s);
    for (auto& x : t.d_->v) x = value;
    return t;
  }
  static Tensor from(std::vector<double> values, const Shape& s) {
    if (values.size() != shape_numel(s))
      throw ShapeError("from(): " + std::to_string(values.size()) + " values for shape " + shape_str(s));
    Tensor t;
    t.d_->shape = s;
    t.d_->v = std::move(values);
    return t;
  }
  static Tensor scalar(double value) { return from({value}, {1}); }

  const Shape& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->v.size(); }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }

  double* data() { return d_->v.data(); }
  const double* data() const { return d_->v.data(); }
  double& operator[](std::size_t i) { return d_->v[i]; }
  double operator[](std::size_t i) const { return d_->v[i]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return d_->v[0];
  }

  void enable_grad() {
    d_->grad_enabled = true;
    if (d_->g.size() != d_->v.size()) d_->g.assign(d_->v.size(), 0.0);
  }
  bool grad_enabled() const { return d_->grad_enabled; }
  double* grad() { return d_->g.data(); }
  const double* grad() const { return d_->g.data(); }
  void zero_grad() {
    for (auto& x : d_->g) x = 0.0;
  }

  std::shared_ptr<TensorData> ptr() const { return d_; }
  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Ops append closures; backward() replays them in reverse.
// Gradients accumulate into enabled buffers until explicitly zeroed, so one
// tape supports batched losses and repeated backward calls.
class Tape {
 public:
  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  void backward_from(Tensor loss) {
    if (loss.numel() != 1) throw ShapeError("backward on non-scalar tensor " + shape_str(loss.shape()));
    if (!loss.grad_enabled())
      throw ValueError("backward on a tensor with gradients disabled (not produced by tracked ops)");
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {
inline Tape*& tls_tape() {
  thread_local Tape* t = nullptr;
  return t;
}
}  // namespace detail

struct TapeScope {
  explicit TapeScope(Tape& t) : prev(detail::tls_tape()) { detail::tls_tape() = &t; }
  ~TapeScope() { detail::tls_tape() = prev; }
  Tape* prev;
};

inline void backward(Tensor loss) {
  Tape* t = detail::tls_tape();
  if (!t) throw ValueError("backward called with no active tape");
  t->backward_from(loss);
}

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> ins) {
  if (!tls_tape()) return false;
  for (const Tensor* t : ins)
    if (t->grad_enabled()) return true;
  return false;
}

inline void track_out(Tensor& out) { out.enable_grad(); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, n] {
      for (std::size_t i = 0; i < n; ++i) {
        if (ad->grad_enabled) ad->g[i] += od->g[i];
        if (bd->grad_enabled) bd->g[i] += od->g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, n] {
      for (std::size_t i = 0; i < n; ++i) {
        if (ad->grad_enabled) ad->g[i] += od->g[i];
        if (bd->grad_enabled) bd->g[i] -= od->g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, n] {
      for (std::size_t i = 0; i < n; ++i) {
        if (ad->grad_enabled) ad->g[i] += od->g[i] * bd->v[i];
        if (bd->grad_enabled) bd->g[i] += od->g[i] * ad->v[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, c, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + c;
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i)
        if (ad->v[i] > 0.0) ad->g[i] += od->g[i];
    });
  }
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * od->v[i] * (1.0 - od->v[i]);
    });
  }
  return out;
}

inline Tensor tanh_op(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(a[i]);
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * (1.0 - od->v[i] * od->v[i]);
    });
  }
  return out;
}

inline Tensor exp_op(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i] * od->v[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / selection / structure
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) s += a[i];
  Tensor out = Tensor::scalar(s);
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[0];
    });
  }
  return out;
}

inline Tensor pick(const Tensor& a, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= a.numel())
    throw ShapeError("pick: index " + std::to_string(index) + " out of range for " + shape_str(a.shape()));
  Tensor out = Tensor::scalar(a[static_cast<std::size_t>(index)]);
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, index] { ad->g[static_cast<std::size_t>(index)] += od->g[0]; });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  Tensor out = Tensor::zeros(s);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i];
  if (detail::tracking({&a})) {
    detail::track_out(out);
    auto ad = a.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, od, n] {
      for (std::size_t i = 0; i < n; ++i) ad->g[i] += od->g[i];
    });
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  const std::size_t na = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros({static_cast<int>(na + nb)});
  for (std::size_t i = 0; i < na; ++i) out[i] = a[i];
  for (std::size_t i = 0; i < nb; ++i) out[na + i] = b[i];
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, na, nb] {
      if (ad->grad_enabled)
        for (std::size_t i = 0; i < na; ++i) ad->g[i] += od->g[i];
      if (bd->grad_enabled)
        for (std::size_t i = 0; i < nb; ++i) bd->g[i] += od->g[na + i];
    });
  }
  return out;
}

// Elementwise mean of a nonempty list of same-shape tensors.
inline Tensor bow_average(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ValueError("bow_average: empty list");
  for (const Tensor& x : xs) detail::check_same_shape(xs[0], x, "bow_average");
  const std::size_t n = xs[0].numel();
  Tensor out = Tensor::zeros(xs[0].shape());
  for (const Tensor& x : xs)
    for (std::size_t i = 0; i < n; ++i) out[i] += x[i];
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
  bool track = false;
  for (const Tensor& x : xs) track = track || detail::tracking({&x});
  if (track) {
    detail::track_out(out);
    std::vector<std::shared_ptr<TensorData>> ins;
    ins.reserve(xs.size());
    for (const Tensor& x : xs) ins.push_back(x.ptr());
    auto od = out.ptr();
    detail::tls_tape()->record([ins, od, inv, n] {
      for (const auto& xd : ins)
        if (xd->grad_enabled)
          for (std::size_t i = 0; i < n; ++i) xd->g[i] += od->g[i] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: requires rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner axes disagree (" + std::to_string(k) + " vs " + std::to_string(k2) + ")");
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i * k + p)];
      const double* brow = b.data() + static_cast<std::size_t>(p) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, m, k, n] {
      if (ad->grad_enabled)
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            const double* go = od->g.data() + static_cast<std::size_t>(i) * n;
            const double* bv = bd->v.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) s += go[j] * bv[j];
            ad->g[static_cast<std::size_t>(i * k + p)] += s;
          }
      if (bd->grad_enabled)
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const double av = ad->v[static_cast<std::size_t>(i * k + p)];
            const double* go = od->g.data() + static_cast<std::size_t>(i) * n;
            double* gb = bd->g.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) gb[j] += av * go[j];
          }
    });
  }
  return out;
}

// y = x . W + b for a rank-1 x of length k, W [k x n], b [n].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 1 || w.shape().size() != 2)
    throw ShapeError("affine: expected x rank-1 and W rank-2, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const int k = x.dim(0), k2 = w.dim(0), n = w.dim(1);
  if (k != k2)
    throw ShapeError("affine: input length " + std::to_string(k) + " != W rows " + std::to_string(k2));
  if (b.shape().size() != 1 || b.dim(0) != n)
    throw ShapeError("affine: bias shape " + shape_str(b.shape()) + " != [" + std::to_string(n) + "]");
  Tensor out = Tensor::zeros({n});
  for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)];
  for (int p = 0; p < k; ++p) {
    const double xv = x[static_cast<std::size_t>(p)];
    if (xv == 0.0) continue;
    const double* wrow = w.data() + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += xv * wrow[j];
  }
  if (detail::tracking({&x, &w, &b})) {
    detail::track_out(out);
    auto xd = x.ptr(), wd = w.ptr(), bdp = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([xd, wd, bdp, od, k, n] {
      const double* go = od->g.data();
      if (bdp->grad_enabled)
        for (int j = 0; j < n; ++j) bdp->g[static_cast<std::size_t>(j)] += go[j];
      if (xd->grad_enabled)
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const double* wrow = wd->v.data() + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) s += go[j] * wrow[j];
          xd->g[static_cast<std::size_t>(p)] += s;
        }
      if (wd->grad_enabled)
        for (int p = 0; p < k; ++p) {
          const double xv = xd->v[static_cast<std::size_t>(p)];
          if (xv == 0.0) continue;
          double* gw = wd->g.data() + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) gw[j] += xv * go[j];
        }
    });
  }
  return out;
}

// Valid cross-correlation plus bias, HWC layout. input [H,W,Cin],
// weights [k,k,Cin,Cout], bias [Cout] -> [H',W',Cout].
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int stride) {
  if (input.shape().size() != 3)
    throw ShapeError("conv2d: input must be rank-3 HWC, got " + shape_str(input.shape()));
  if (weights.shape().size() != 4)
    throw ShapeError("conv2d: weights must be rank-4 [k,k,Cin,Cout], got " + shape_str(weights.shape()));
  const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const int kh = weights.dim(0), kw = weights.dim(1), wcin = weights.dim(2), cout = weights.dim(3);
  if (kh != kw) throw ShapeError("conv2d: kernel must be square, got " + shape_str(weights.shape()));
  if (cin != wcin)
    throw ShapeError("conv2d: input channels (axis 2) " + std::to_string(cin) + " != kernel channels " + std::to_string(wcin));
  if (bias.shape().size() != 1 || bias.dim(0) != cout)
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " != [" + std::to_string(cout) + "]");
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  if ((h - kh) % stride != 0 || (w - kw) % stride != 0 || h < kh || w < kw)
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                     std::to_string(kh) + " stride " + std::to_string(stride) + " on spatial axes");
  const int oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
  Tensor out = Tensor::zeros({oh, ow, cout});
  const double* in = input.data();
  const double* wt = weights.data();
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double* o = out.data() + (static_cast<std::size_t>(r) * ow + c) * cout;
      for (int j = 0; j < cout; ++j) o[j] = bias[static_cast<std::size_t>(j)];
      for (int i = 0; i < kh; ++i)
        for (int q = 0; q < kw; ++q) {
          const double* irow = in + ((static_cast<std::size_t>(r * stride + i)) * w + (c * stride + q)) * cin;
          const double* wrow = wt + ((static_cast<std::size_t>(i) * kw + q) * cin) * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const double iv = irow[ci];
            if (iv == 0.0) continue;
            const double* wv = wrow + static_cast<std::size_t>(ci) * cout;
            for (int j = 0; j < cout; ++j) o[j] += iv * wv[j];
          }
        }
    }
  if (detail::tracking({&input, &weights, &bias})) {
    detail::track_out(out);
    auto id = input.ptr(), wd = weights.ptr(), bd = bias.ptr(), od = out.ptr();
    detail::tls_tape()->record([id, wd, bd, od, h, w, cin, kh, kw, cout, stride, oh, ow] {
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
          const double* go = od->g.data() + (static_cast<std::size_t>(r) * ow + c) * cout;
          if (bd->grad_enabled)
            for (int j = 0; j < cout; ++j) bd->g[static_cast<std::size_t>(j)] += go[j];
          for (int i = 0; i < kh; ++i)
            for (int q = 0; q < kw; ++q) {
              const std::size_t ibase = ((static_cast<std::size_t>(r * stride + i)) * w + (c * stride + q)) * cin;
              const std::size_t wbase = (static_cast<std::size_t>(i) * kw + q) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                double gsum = 0.0;
                const double* wv = wd->v.data() + wbase + static_cast<std::size_t>(ci) * cout;
                for (int j = 0; j < cout; ++j) gsum += go[j] * wv[j];
                if (id->grad_enabled) id->g[ibase + static_cast<std::size_t>(ci)] += gsum;
                if (wd->grad_enabled) {
                  const double iv = id->v[ibase + static_cast<std::size_t>(ci)];
                  if (iv != 0.0) {
                    double* gw = wd->g.data() + wbase + static_cast<std::size_t>(ci) * cout;
                    for (int j = 0; j < cout; ++j) gw[j] += iv * go[j];
                  }
                }
              }
            }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax / embedding
// ---------------------------------------------------------------------------

inline constexpr double kL2NormEps = 1e-8;

// x / max(||x||_2, eps) over the whole tensor; zero maps to zero.
inline Tensor l2_normalize(const Tensor& x) {
  const std::size_t n = x.numel();
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += x[i] * x[i];
  const double nrm = std::sqrt(sq);
  const double m = nrm > kL2NormEps ? nrm : kL2NormEps;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] / m;
  if (detail::tracking({&x})) {
    detail::track_out(out);
    auto xd = x.ptr(), od = out.ptr();
    const bool clamped = nrm <= kL2NormEps;
    detail::tls_tape()->record([xd, od, m, clamped, n] {
      if (clamped) {  // constant divisor
        for (std::size_t i = 0; i < n; ++i) xd->g[i] += od->g[i] / m;
        return;
      }
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += od->g[i] * od->v[i];
      for (std::size_t i = 0; i < n; ++i) xd->g[i] += (od->g[i] - od->v[i] * dot) / m;
    });
  }
  return out;
}

// ||a - b||_2 as a scalar tensor.
inline Tensor l2_distance(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "l2_distance");
  const std::size_t n = a.numel();
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  const double dist = std::sqrt(sq);
  Tensor out = Tensor::scalar(dist);
  if (detail::tracking({&a, &b})) {
    detail::track_out(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    detail::tls_tape()->record([ad, bd, od, n] {
      const double d = od->v[0] > 1e-12 ? od->v[0] : 1e-12;
      const double g0 = od->g[0];
      for (std::size_t i = 0; i < n; ++i) {
        const double dg = g0 * (ad->v[i] - bd->v[i]) / d;
        if (ad->grad_enabled) ad->g[i] += dg;
        if (bd->grad_enabled) bd->g[i] -= dg;
      }
    });
  }
  return out;
}

// Softmax over a rank-1 tensor with logits divided by `temperature`.
inline Tensor softmax(const Tensor& z, double temperature = 1.0) {
  if (z.shape().size() != 1) throw ShapeError("softmax: expected rank-1 logits, got " + shape_str(z.shape()));
  if (!(temperature > 0.0)) throw ValueError("softmax: temperature must be > 0");
  const std::size_t n = z.numel();
  Tensor out = Tensor::zeros(z.shape());
  double mx = z[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, z[i]);
  double den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp((z[i] - mx) / temperature);
    den += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= den;
  if (detail::tracking({&z})) {
    detail::track_out(out);
    auto zd = z.ptr(), od = out.ptr();
    detail::tls_tape()->record([zd, od, temperature, n] {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += od->g[i] * od->v[i];
      for (std::size_t i = 0; i < n; ++i) zd->g[i] += od->v[i] * (od->g[i] - dot) / temperature;
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& z, double temperature = 1.0) {
  if (z.shape().size() != 1) throw ShapeError("log_softmax: expected rank-1 logits, got " + shape_str(z.shape()));
  if (!(temperature > 0.0)) throw ValueError("log_softmax: temperature must be > 0");
  const std::size_t n = z.numel();
  Tensor out = Tensor::zeros(z.shape());
  double mx = z[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, z[i]);
  double den = 0.0;
  for (std::size_t i = 0; i < n; ++i) den += std::exp((z[i] - mx) / temperature);
  const double lse = std::log(den) + mx / temperature;
  for (std::size_t i = 0; i < n; ++i) out[i] = z[i] / temperature - lse;
  if (detail::tracking({&z})) {
    detail::track_out(out);
    auto zd = z.ptr(), od = out.ptr();
    detail::tls_tape()->record([zd, od, temperature, n] {
      double gsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) gsum += od->g[i];
      for (std::size_t i = 0; i < n; ++i) zd->g[i] += (od->g[i] - std::exp(od->v[i]) * gsum) / temperature;
    });
  }
  return out;
}

// Row `id` of an embedding matrix W [V, d].
inline Tensor embed_lookup(const Tensor& w, int id) {
  if (w.shape().size() != 2) throw ShapeError("embed_lookup: W must be rank-2, got " + shape_str(w.shape()));
  const int v = w.dim(0), d = w.dim(1);
  if (id < 0 || id >= v)
    throw ValueError("embed_lookup: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
  Tensor out = Tensor::zeros({d});
  const double* row = w.data() + static_cast<std::size_t>(id) * d;
  for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(i)] = row[i];
  if (detail::tracking({&w})) {
    detail::track_out(out);
    auto wd = w.ptr(), od = out.ptr();
    detail::tls_tape()->record([wd, od, id, d] {
      double* grow = wd->g.data() + static_cast<std::size_t>(id) * d;
      for (int i = 0; i < d; ++i) grow[i] += od->g[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// GRU cell (composite; differentiable through the primitives above)
// ---------------------------------------------------------------------------

struct GruParams {
  Tensor wx_r, wh_r, b_r;
  Tensor wx_z, wh_z, b_z;
  Tensor wx_h, wh_h, b_h;
};

// Standard GRU update: r,z sigmoid gates, tanh candidate on (x, r*h),
// h' = (1-z)*cand + z*h.
inline Tensor gru_step(const Tensor& x, const Tensor& h, const GruParams& p) {
  Tensor r = sigmoid(add(affine(x, p.wx_r, p.b_r), affine(h, p.wh_r, Tensor::zeros({p.wh_r.dim(1)}))));
  Tensor z = sigmoid(add(affine(x, p.wx_z, p.b_z), affine(h, p.wh_z, Tensor::zeros({p.wh_z.dim(1)}))));
  Tensor cand = tanh_op(add(affine(x, p.wx_h, p.b_h), affine(mul(r, h), p.wh_h, Tensor::zeros({p.wh_h.dim(1)}))));
  Tensor keep = mul(z, h);
  Tensor one_minus_z = add_scalar(scale(z, -1.0), 1.0);
  return add(mul(one_minus_z, cand), keep);
}

}  // namespace eclab
