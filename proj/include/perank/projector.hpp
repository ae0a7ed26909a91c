#pragma once

#include <optional>

#include "numerics.hpp"
#include "retrieval.hpp"

namespace perank {

// Two-layer perceptron from encoder space to LM input space:
// out = act(e W1 + b1) W2 + b2, no output normalization.
class Projector {
 public:
  Projector() = default;
  Projector(std::size_t d_enc, std::size_t d_hidden, std::size_t d_lm, Activation act = Activation::gelu)
      : W1("projector.W1", d_enc, d_hidden),
        b1("projector.b1", 1, d_hidden),
        W2("projector.W2", d_hidden, d_lm),
        b2("projector.b2", 1, d_lm),
        act_(act) {}

  void init(Rng& rng) {
    init_uniform_scaled(W1, rng);
    init_uniform_scaled(W2, rng);
    b1.value.fill(0.0);
    b2.value.fill(0.0);
  }

  std::size_t d_enc() const { return W1.value.rows; }
  std::size_t d_hidden() const { return W1.value.cols; }
  std::size_t d_lm() const { return W2.value.cols; }
  Activation activation() const { return act_; }
  ParamList params() { return {&W1, &b1, &W2, &b2}; }

  // Pure; rows of E are embeddings.
  Matrix apply(const Matrix& E) const {
    check_input(E);
    Matrix h = linear_forward(E, W1, b1);
    for (double& v : h.data) v = activate(act_, v);
    return linear_forward(h, W2, b2);
  }

  std::vector<double> apply(const Embedding& e) const {
    Matrix E(1, e.size());
    std::copy(e.begin(), e.end(), E.row(0));
    return apply(E).row_vec(0);
  }

  // Like apply, but keeps the activations needed by project_backward.
  Matrix project(const Matrix& E) {
    check_input(E);
    Cache c;
    c.x = E;
    c.pre = linear_forward(E, W1, b1);
    c.hid = c.pre;
    for (double& v : c.hid.data) v = activate(act_, v);
    Matrix out = linear_forward(c.hid, W2, b2);
    cache_ = std::move(c);
    return out;
  }

  // Accumulates weight gradients; returns the gradient with respect to the
  // embeddings, which callers discard because the encoder is frozen.
  Matrix project_backward(const Matrix& dY) {
    if (!cache_) throw Error("project_backward called before project");
    Cache& c = *cache_;
    Matrix dh = linear_backward(c.hid, W2, b2, dY);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] *= activate_grad(act_, c.pre.data[i]);
    return linear_backward(c.x, W1, b1, dh);
  }

  void clear_cache() { cache_.reset(); }

  Parameter W1, b1, W2, b2;

 private:
  struct Cache {
    Matrix x, pre, hid;
  };

  void check_input(const Matrix& E) const {
    if (E.cols != d_enc())
      throw Error("projector: embedding dim " + std::to_string(E.cols) + " does not match d_enc " + std::to_string(d_enc()));
  }

  Activation act_ = Activation::gelu;
  std::optional<Cache> cache_;
};

inline Matrix stack_embeddings(const std::vector<Embedding>& es) {
  if (es.empty()) return Matrix();
  Matrix m(0, es[0].size());
  for (const auto& e : es) m.append_row(e);
  return m;
}

}  // namespace perank
