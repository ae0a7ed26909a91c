#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace perank {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// bad input files or data contents; the CLI maps these to exit code 2
class DataError : public Error {
 public:
  using Error::Error;
};

// bad flags or stage-order violations; exit code 1
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rs) {
    Matrix m(rs.size(), rs.empty() ? 0 : rs[0].size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (rs[i].size() != m.cols) throw Error("ragged rows");
      std::copy(rs[i].begin(), rs[i].end(), m.row(i));
    }
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
  std::vector<double> row_vec(std::size_t r) const { return {row(r), row(r) + cols}; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape() const { return std::to_string(rows) + "x" + std::to_string(cols); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  void append_row(const double* v) {
    data.insert(data.end(), v, v + cols);
    ++rows;
  }
  void append_row(const std::vector<double>& v) {
    if (v.size() != cols) throw Error("append_row: width " + std::to_string(v.size()) + " vs " + std::to_string(cols));
    append_row(v.data());
  }
};

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

inline void require_shape(bool ok, const char* what, const Matrix& a, const Matrix& b) {
  if (!ok) throw Error(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

namespace detail {

inline void axpy(double* __restrict c, double a, const double* __restrict b, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
}

// Four output rows share each load of b.
inline void axpy4(double* __restrict c0, double* __restrict c1, double* __restrict c2, double* __restrict c3, double a0, double a1,
                  double a2, double a3, const double* __restrict b, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double v = b[j];
    c0[j] += a0 * v;
    c1[j] += a1 * v;
    c2[j] += a2 * v;
    c3[j] += a3 * v;
  }
}

}  // namespace detail

// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols == b.rows, "matmul", a, b);
  Matrix c(a.rows, b.cols);
  const std::size_t n = b.cols;
  std::size_t i = 0;
  for (; i + 4 <= a.rows; i += 4) {
    const double *a0 = a.row(i), *a1 = a.row(i + 1), *a2 = a.row(i + 2), *a3 = a.row(i + 3);
    for (std::size_t k = 0; k < a.cols; ++k)
      detail::axpy4(c.row(i), c.row(i + 1), c.row(i + 2), c.row(i + 3), a0[k], a1[k], a2[k], a3[k], b.row(k), n);
  }
  for (; i < a.rows; ++i) {
    const double* ai = a.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) detail::axpy(c.row(i), ai[k], b.row(k), n);
  }
  return c;
}

// c += a^T * b
inline void matmul_at_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require_shape(a.rows == b.rows, "matmul_at", a, b);
  if (c.rows != a.cols || c.cols != b.cols) throw Error("matmul_at: output shape " + c.shape());
  const std::size_t n = b.cols;
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double* ar = a.row(r);
    const double* br = b.row(r);
    std::size_t i = 0;
    for (; i + 4 <= a.cols; i += 4)
      detail::axpy4(c.row(i), c.row(i + 1), c.row(i + 2), c.row(i + 3), ar[i], ar[i + 1], ar[i + 2], ar[i + 3], br, n);
    for (; i < a.cols; ++i) detail::axpy(c.row(i), ar[i], br, n);
  }
}

// c = a * b^T
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols == b.cols, "matmul_bt", a, b);
  // accumulate rows of b^T so the inner loop runs over contiguous output
  Matrix bt(b.cols, b.rows);
  for (std::size_t j = 0; j < b.rows; ++j)
    for (std::size_t k = 0; k < b.cols; ++k) bt(k, j) = b(j, k);
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) detail::axpy(ci, ai[k], bt.row(k), b.rows);
  }
  return c;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("dot: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  return dot(a.data(), b.data(), a.size());
}

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t r, std::size_t c) : name(std::move(n)), value(r, c), grad(r, c) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamList = std::vector<Parameter*>;

inline void zero_grads(const ParamList& ps) {
  for (auto* p : ps) p->zero_grad();
}

inline void set_trainable(const ParamList& ps, bool on) {
  for (auto* p : ps) p->trainable = on;
}

// Engine is std::mt19937_64, whose output sequence is fixed by the standard;
// every distribution below is computed by hand so draws match across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  // independent child stream
  Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline void require_distribution_input(const std::vector<double>& v) {
  if (v.empty()) throw Error("empty distribution");
  for (double x : v)
    if (!std::isfinite(x)) throw Error("non-finite logit");
}

inline std::vector<double> softmax(const std::vector<double>& v) {
  require_distribution_input(v);
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline std::vector<double> log_softmax(const std::vector<double>& v) {
  require_distribution_input(v);
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::min(0.0, v[i] - lse);
  return out;
}

enum class Activation { gelu, identity, tanh };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    case Activation::tanh: return std::tanh(x);
    case Activation::identity: break;
  }
  return x;
}

inline double activate_grad(Activation a, double x) {
  switch (a) {
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return cdf + x * pdf;
    }
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::identity: break;
  }
  return 1.0;
}

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::identity: break;
  }
  return "identity";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw UsageError("unknown activation '" + s + "'");
}

inline void check_linear_shapes(const Matrix& x, const Parameter& W, const Parameter& b) {
  if (x.cols != W.value.rows)
    throw Error("linear: input " + x.shape() + " does not match weight " + W.value.shape());
  if (b.value.rows != 1 || b.value.cols != W.value.cols)
    throw Error("linear: bias " + b.value.shape() + " does not match weight " + W.value.shape());
}

// y = xW + b, b broadcast over rows
inline Matrix linear_forward(const Matrix& x, const Parameter& W, const Parameter& b) {
  check_linear_shapes(x, W, b);
  Matrix y = matmul(x, W.value);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* yi = y.row(i);
    for (std::size_t j = 0; j < y.cols; ++j) yi[j] += b.value.data[j];
  }
  return y;
}

// Accumulates dW, db (trainable params only) and returns dx.
inline Matrix linear_backward(const Matrix& x, Parameter& W, Parameter& b, const Matrix& dy) {
  check_linear_shapes(x, W, b);
  if (dy.rows != x.rows || dy.cols != W.value.cols)
    throw Error("linear_backward: upstream " + dy.shape() + " does not match output " + std::to_string(x.rows) + "x" +
                std::to_string(W.value.cols));
  if (W.trainable) matmul_at_acc(x, dy, W.grad);
  if (b.trainable)
    for (std::size_t i = 0; i < dy.rows; ++i)
      for (std::size_t j = 0; j < dy.cols; ++j) b.grad.data[j] += dy(i, j);
  return matmul_bt(dy, W.value);
}

// Max relative error between the gradients already accumulated in `params`
// and central differences of f. Coordinates are subsampled when there are
// more than max_coords of them.
inline double finite_diff_check(const std::function<double()>& f, const ParamList& params, double eps = 1e-5,
                                std::size_t max_coords = 256, std::uint64_t seed = 0) {
  if (!(eps > 0.0)) throw Error("finite_diff_check: eps must be positive");
  std::vector<std::pair<Parameter*, std::size_t>> coords;
  for (auto* p : params)
    if (p->trainable)
      for (std::size_t i = 0; i < p->value.size(); ++i) coords.emplace_back(p, i);
  if (coords.size() > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }
  double worst = 0.0;
  for (auto& [p, i] : coords) {
    const double orig = p->value.data[i];
    p->value.data[i] = orig + eps;
    const double fp = f();
    p->value.data[i] = orig - eps;
    const double fm = f();
    p->value.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_diff_check: non-finite objective at " + p->name);
    const double central = (fp - fm) / (2.0 * eps);
    const double err = std::abs(p->grad.data[i] - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

inline double grad_norm(const ParamList& ps) {
  double s = 0.0;
  for (auto* p : ps)
    if (p->trainable)
      for (double g : p->grad.data) s += g * g;
  return std::sqrt(s);
}

inline void clip_grad_norm(const ParamList& ps, double max_norm) {
  const double n = grad_norm(ps);
  if (max_norm <= 0.0 || n <= max_norm) return;
  const double scale = max_norm / n;
  for (auto* p : ps)
    if (p->trainable)
      for (double& g : p->grad.data) g *= scale;
}

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // Frozen parameters are skipped entirely, so their values stay bit-identical.
  void step(const ParamList& ps) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto* p : ps) {
      if (!p->trainable) continue;
      auto& st = state_[p];
      if (st.m.size() != p->value.size()) {
        st.m.assign(p->value.size(), 0.0);
        st.v.assign(p->value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad.data[i];
        st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g;
        st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g * g;
        if (lr_ == 0.0) continue;
        p->value.data[i] -= lr_ * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  std::uint64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::unordered_map<const Parameter*, Moments> state_;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline void init_uniform_scaled(Parameter& p, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.value.rows + p.value.cols));
  for (double& v : p.value.data) v = rng.uniform(-a, a);
}

}  // namespace perank
