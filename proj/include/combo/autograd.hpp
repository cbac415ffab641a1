#pragma once

// Reverse-mode differentiation over a closed vocabulary of operations.
// A Tape records every forward op together with its backward rule; one
// call to backward() replays the rules in reverse and deposits gradients
// into the Parameters that took part.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "combo/tensor.hpp"

namespace combo {

template <class Real>
struct Parameter {
  Parameter() = default;
  Parameter(std::string id_, Tensor<Real> value_)
      : id(std::move(id_)), value(std::move(value_)), grad(Tensor<Real>::zeros_like(value)) {}

  void zero_grad() { grad.fill(Real(0)); }

  std::string id;
  Tensor<Real> value;
  Tensor<Real> grad;
};

template <class Real>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy.
template <class Real>
class Var {
 public:
  Var() = default;

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape<Real>* tape() const noexcept { return tape_; }
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<Real>;
  Var(Tape<Real>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<Real>* tape_ = nullptr;
  std::size_t index_ = 0;
};

template <class Real>
class Tape {
 public:
  /// Receives the tape and the index of the node whose gradient is ready.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// With gradients disabled every parameter is recorded as a constant and
  /// no backward rules are kept (evaluation mode).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value);

  /// Leaf bound to p; backward() adds d(loss)/d(p.value) into p.grad.
  Var<Real> parameter(Parameter<Real>& p);

  /// Records an op result. needs_grad is true when any input needs it.
  Var<Real> record(Tensor<Real> value, bool needs_grad, BackwardFn backward);

  bool needs_grad(const Var<Real>& v) const { return nodes_[v.index()].needs_grad; }
  bool needs_grad(std::size_t i) const { return nodes_[i].needs_grad; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  const Tensor<Real>& value(std::size_t i) const { return nodes_[i].value; }

  /// Gradient buffer of node i, allocated as zeros on first access.
  Tensor<Real>& grad(std::size_t i);

  /// Seeds d(loss)/d(loss) = 1 and runs every backward rule once.
  /// Throws StateError if the tape was already consumed.
  void backward(const Var<Real>& loss);

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Parameter<Real>* param = nullptr;
  };

  void check_open() const;

  // deque keeps value references stable while the tape grows
  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

template <class Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape_->value(index_);
}

/// Rows [begin, end) of a weight matrix belonging to one group.
using RowRange = std::pair<std::size_t, std::size_t>;
using RowGroups = std::vector<std::vector<RowRange>>;

namespace ops {

// All 2-D ops treat a tensor as rows() x cols(); higher ranks are flattened
// over their leading axes.

template <class Real> Var<Real> matmul(const Var<Real>& a, const Var<Real>& b);
template <class Real> Var<Real> add(const Var<Real>& a, const Var<Real>& b);
/// x[r x c] + v[c] broadcast over rows.
template <class Real> Var<Real> add_rowvec(const Var<Real>& x, const Var<Real>& v);
/// x[r x c] + t[s x c] where row i of x gets row (i mod s) of t.
template <class Real> Var<Real> add_tiled(const Var<Real>& x, const Var<Real>& t);
template <class Real> Var<Real> scale(const Var<Real>& x, Real s);
template <class Real> Var<Real> sum(const Var<Real>& x);
template <class Real> Var<Real> mean(const Var<Real>& x);
template <class Real> Var<Real> transpose(const Var<Real>& x);
template <class Real> Var<Real> reshape(const Var<Real>& x, Shape shape);
template <class Real> Var<Real> slice_rows(const Var<Real>& x, std::size_t begin, std::size_t end);
template <class Real> Var<Real> concat_rows(const std::vector<Var<Real>>& parts);
template <class Real> Var<Real> gather_rows(const Var<Real>& x, const std::vector<std::size_t>& rows);

/// Last-axis normalization, biased variance.
template <class Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta,
                     Real eps = Real(1e-6));
template <class Real> Var<Real> softmax(const Var<Real>& x);
/// Exact-erf GELU.
template <class Real> Var<Real> gelu(const Var<Real>& x);

/// Multi-head scaled dot-product self-attention over a packed qkv matrix
/// of shape [batch*seq x 3*dim]; q, k and v occupy consecutive column
/// thirds and head h uses columns [h*dim/heads, (h+1)*dim/heads) of each.
/// Returns [batch*seq x dim].
template <class Real>
Var<Real> attention(const Var<Real>& qkv, std::size_t batch, std::size_t seq, std::size_t heads);

/// Mean over rows of -log softmax(logits)[label].
template <class Real>
Var<Real> cross_entropy(const Var<Real>& logits, const std::vector<int>& labels);

/// l2 norm of each row group of w; output [groups]. Subgradient is zero
/// for a group whose norm is exactly zero.
template <class Real>
Var<Real> group_l2_norms(const Var<Real>& w, const RowGroups& groups);

template <class Real>
Var<Real> linear(const Var<Real>& x, const Var<Real>& w, const Var<Real>& b) {
  return add_rowvec(matmul(x, w), b);
}

}  // namespace ops

// Plain (non-recorded) helpers shared by ops and their oracles.
namespace numeric {
template <class Real> Real gelu(Real x);
template <class Real> Real gelu_derivative(Real x);
/// In-place stabilized softmax of one row.
template <class Real> void softmax_row(Real* row, std::size_t n);
}  // namespace numeric

}  // namespace combo
