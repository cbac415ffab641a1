#include "combo/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "combo/kernels.hpp"

namespace combo {

// ---------------------------------------------------------------------------
// Tape

template <class Real>
void Tape<Real>::check_open() const {
  if (consumed_) throw StateError("tape already consumed by backward(); record a new forward pass");
}

template <class Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  check_open();
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var<Real>(this, nodes_.size() - 1);
}

template <class Real>
Var<Real> Tape<Real>::parameter(Parameter<Real>& p) {
  check_open();
  if (!grad_enabled_) return constant(p.value);
  nodes_.push_back(Node{p.value, {}, true, {}, &p});
  return Var<Real>(this, nodes_.size() - 1);
}

template <class Real>
Var<Real> Tape<Real>::record(Tensor<Real> value, bool needs_grad, BackwardFn backward) {
  check_open();
  const bool keep = needs_grad && grad_enabled_;
  nodes_.push_back(Node{std::move(value), {}, keep, keep ? std::move(backward) : BackwardFn{}, nullptr});
  return Var<Real>(this, nodes_.size() - 1);
}

template <class Real>
Tensor<Real>& Tape<Real>::grad(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.empty()) n.grad = Tensor<Real>::zeros_like(n.value);
  return n.grad;
}

template <class Real>
void Tape<Real>::backward(const Var<Real>& loss) {
  check_open();
  if (loss.tape() != this) throw StateError("backward() called with a value from another tape");
  if (loss.value().size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.index()].needs_grad) return;
  grad(loss.index())[0] = Real(1);
  for (std::size_t i = loss.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, i);
    } else if (n.param != nullptr) {
      auto& pg = n.param->grad;
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
    }
    // Gradients of consumed intermediates are no longer needed.
    n.grad = Tensor<Real>();
  }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// numeric helpers

namespace numeric {

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <class Real>
Real gelu_derivative(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> /
                   std::numbers::sqrt2_v<Real>;
  return cdf + x * pdf;
}

template <class Real>
void softmax_row(Real* row, std::size_t n) {
  const Real mx = *std::max_element(row, row + n);
  Real total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    total += row[j];
  }
  const Real inv = Real(1) / total;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

template float gelu<float>(float);
template double gelu<double>(double);
template float gelu_derivative<float>(float);
template double gelu_derivative<double>(double);
template void softmax_row<float>(float*, std::size_t);
template void softmax_row<double>(double*, std::size_t);

}  // namespace numeric

// ---------------------------------------------------------------------------
// ops

namespace ops {

namespace {

template <class Real>
Tape<Real>& same_tape(const Var<Real>& a, const Var<Real>& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr) throw StateError("operands recorded on different tapes");
  return *a.tape();
}

template <class Real>
void require_matrix(const Var<Real>& v, const char* what) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(what) + " expects a 2-D tensor, got " + shape_str(v.shape()));
  }
}

template <class Real>
void accumulate(Tensor<Real>& dst, const Tensor<Real>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  Tape<Real>& tape = same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor<Real> out({m, n});
  kernels::gemm_nn(m, k, n, av.data(), bv.data(), out.data(), false);
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(std::move(out), tape.needs_grad(ia) || tape.needs_grad(ib),
                     [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.needs_grad(ia)) {
                         kernels::gemm_nt(m, n, k, g.data(), t.value(ib).data(), t.grad(ia).data(), true);
                       }
                       if (t.needs_grad(ib)) {
                         kernels::gemm_tn(k, m, n, t.value(ia).data(), g.data(), t.grad(ib).data(), true);
                       }
                     });
}

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  Tape<Real>& tape = same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<Real> out = a.value();
  accumulate(out, b.value());
  const std::size_t ia = a.index(), ib = b.index();
  return tape.record(std::move(out), tape.needs_grad(ia) || tape.needs_grad(ib),
                     [ia, ib](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.needs_grad(ia)) accumulate(t.grad(ia), g);
                       if (t.needs_grad(ib)) accumulate(t.grad(ib), g);
                     });
}

template <class Real>
Var<Real> add_rowvec(const Var<Real>& x, const Var<Real>& v) {
  Tape<Real>& tape = same_tape(x, v);
  const std::size_t c = x.value().cols();
  if (v.value().size() != c) {
    throw DimensionError("add_rowvec: row of " + shape_str(x.shape()) + " vs vector " + shape_str(v.shape()));
  }
  Tensor<Real> out = x.value();
  const auto& vv = v.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    Real* row = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) row[j] += vv[j];
  }
  const std::size_t ix = x.index(), iv = v.index();
  return tape.record(std::move(out), tape.needs_grad(ix) || tape.needs_grad(iv),
                     [ix, iv, c](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.needs_grad(ix)) accumulate(t.grad(ix), g);
                       if (t.needs_grad(iv)) {
                         auto& gv = t.grad(iv);
                         for (std::size_t r = 0; r < g.rows(); ++r) {
                           const Real* row = g.data() + r * c;
                           for (std::size_t j = 0; j < c; ++j) gv[j] += row[j];
                         }
                       }
                     });
}

template <class Real>
Var<Real> add_tiled(const Var<Real>& x, const Var<Real>& tile) {
  Tape<Real>& tape = same_tape(x, tile);
  const auto& xv = x.value();
  const auto& tv = tile.value();
  const std::size_t c = xv.cols(), s = tv.rows();
  if (tv.cols() != c || xv.rows() % s != 0) {
    throw DimensionError("add_tiled: " + shape_str(xv.shape()) + " is not a tiling of " + shape_str(tv.shape()));
  }
  Tensor<Real> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    Real* row = out.data() + r * c;
    const Real* trow = tv.data() + (r % s) * c;
    for (std::size_t j = 0; j < c; ++j) row[j] += trow[j];
  }
  const std::size_t ix = x.index(), it = tile.index();
  return tape.record(std::move(out), tape.needs_grad(ix) || tape.needs_grad(it),
                     [ix, it, c, s](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (t.needs_grad(ix)) accumulate(t.grad(ix), g);
                       if (t.needs_grad(it)) {
                         auto& gt = t.grad(it);
                         for (std::size_t r = 0; r < g.rows(); ++r) {
                           const Real* row = g.data() + r * c;
                           Real* trow = gt.data() + (r % s) * c;
                           for (std::size_t j = 0; j < c; ++j) trow[j] += row[j];
                         }
                       }
                     });
}

template <class Real>
Var<Real> scale(const Var<Real>& x, Real s) {
  Tape<Real>& tape = *x.tape();
  Tensor<Real> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const std::size_t ix = x.index();
  return tape.record(std::move(out), tape.needs_grad(ix), [ix, s](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * g[i];
  });
}

template <class Real>
Var<Real> sum(const Var<Real>& x) {
  Tape<Real>& tape = *x.tape();
  Real total = 0;
  for (Real v : x.value().span()) total += v;
  const std::size_t ix = x.index();
  return tape.record(Tensor<Real>({1}, total), tape.needs_grad(ix), [ix](Tape<Real>& t, std::size_t self) {
    const Real g = t.grad(self)[0];
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <class Real>
Var<Real> mean(const Var<Real>& x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.value().size()));
}

template <class Real>
Var<Real> transpose(const Var<Real>& x) {
  Tape<Real>& tape = *x.tape();
  require_matrix(x, "transpose");
  const auto& xv = x.value();
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<Real> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  const std::size_t ix = x.index();
  return tape.record(std::move(out), tape.needs_grad(ix), [ix, r, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx.at(i, j) += g.at(j, i);
  });
}

template <class Real>
Var<Real> reshape(const Var<Real>& x, Shape shape) {
  Tape<Real>& tape = *x.tape();
  if (shape_size(shape) != x.value().size()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size");
  }
  const std::size_t ix = x.index();
  return tape.record(x.value().reshaped(std::move(shape)), tape.needs_grad(ix),
                     [ix](Tape<Real>& t, std::size_t self) { accumulate(t.grad(ix), t.grad(self)); });
}

template <class Real>
Var<Real> slice_rows(const Var<Real>& x, std::size_t begin, std::size_t end) {
  Tape<Real>& tape = *x.tape();
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  if (begin >= end || end > xv.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of " +
                         shape_str(xv.shape()));
  }
  std::vector<Real> d(xv.data() + begin * c, xv.data() + end * c);
  const std::size_t ix = x.index();
  return tape.record(Tensor<Real>({end - begin, c}, std::move(d)), tape.needs_grad(ix),
                     [ix, begin, c](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       auto& gx = t.grad(ix);
                       Real* dst = gx.data() + begin * c;
                       for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                     });
}

template <class Real>
Var<Real> concat_rows(const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
  Tape<Real>& tape = *parts.front().tape();
  const std::size_t c = parts.front().value().cols();
  std::size_t rows = 0;
  bool needs = false;
  std::vector<std::size_t> idx;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw StateError("operands recorded on different tapes");
    if (p.value().cols() != c) {
      throw DimensionError("concat_rows column mismatch: " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.value().rows();
    needs = needs || tape.needs_grad(p);
    idx.push_back(p.index());
  }
  std::vector<Real> d;
  d.reserve(rows * c);
  for (const auto& p : parts) d.insert(d.end(), p.value().values().begin(), p.value().values().end());
  return tape.record(Tensor<Real>({rows, c}, std::move(d)), needs,
                     [idx = std::move(idx)](Tape<Real>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       std::size_t offset = 0;
                       for (std::size_t i : idx) {
                         const std::size_t n = t.value(i).size();
                         if (t.needs_grad(i)) {
                           auto& gi = t.grad(i);
                           for (std::size_t j = 0; j < n; ++j) gi[j] += g[offset + j];
                         }
                         offset += n;
                       }
                     });
}

template <class Real>
Var<Real> gather_rows(const Var<Real>& x, const std::vector<std::size_t>& rows) {
  Tape<Real>& tape = *x.tape();
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  if (rows.empty()) throw DimensionError("gather_rows with no rows");
  Tensor<Real> out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw DimensionError("gather_rows index out of " + shape_str(xv.shape()));
    std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
  }
  const std::size_t ix = x.index();
  return tape.record(std::move(out), tape.needs_grad(ix), [ix, rows, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Real* dst = gx.data() + rows[i] * c;
      const Real* src = g.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <class Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gamma, const Var<Real>& beta, Real eps) {
  Tape<Real>& tape = same_tape(x, gamma);
  same_tape(x, beta);
  const auto& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm affine of " + shape_str(gamma.shape()) + " for rows of " +
                         shape_str(xv.shape()));
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<Real> xhat(xv.shape());
  std::vector<Real> rstd(rows);
  Tensor<Real> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<Real>(d);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    Real* xh = xhat.data() + r * d;
    Real* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (in[j] - mu) * rs;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.index(), ig = gamma.index(), ib = beta.index();
  const bool needs = tape.needs_grad(ix) || tape.needs_grad(ig) || tape.needs_grad(ib);
  return tape.record(
      std::move(out), needs,
      [ix, ig, ib, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.needs_grad(ig) || t.needs_grad(ib)) {
          auto& gg = t.grad(ig);
          auto& gb = t.grad(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* gr = g.data() + r * d;
            const Real* xh = xhat.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              if (t.needs_grad(ig)) gg[j] += gr[j] * xh[j];
              if (t.needs_grad(ib)) gb[j] += gr[j];
            }
          }
        }
        if (t.needs_grad(ix)) {
          const auto& gv = t.value(ig);
          auto& gx = t.grad(ix);
          std::vector<Real> gxh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* gr = g.data() + r * d;
            const Real* xh = xhat.data() + r * d;
            Real m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              gxh[j] = gr[j] * gv[j];
              m1 += gxh[j];
              m2 += gxh[j] * xh[j];
            }
            m1 /= static_cast<Real>(d);
            m2 /= static_cast<Real>(d);
            Real* dst = gx.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += rstd[r] * (gxh[j] - m1 - xh[j] * m2);
          }
        }
      });
}

template <class Real>
Var<Real> softmax(const Var<Real>& x) {
  Tape<Real>& tape = *x.tape();
  Tensor<Real> out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) numeric::softmax_row(out.data() + r * n, n);
  const std::size_t ix = x.index();
  return tape.record(std::move(out), tape.needs_grad(ix), [ix, n](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const Real* yr = y.data() + r * n;
      const Real* gr = g.data() + r * n;
      Real dotp = 0;
      for (std::size_t j = 0; j < n; ++j) dotp += gr[j] * yr[j];
      Real* dst = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += yr[j] * (gr[j] - dotp);
    }
  });
}

template <class Real>
Var<Real> gelu(const Var<Real>& x) {
  Tape<Real>& tape = *x.tape();
  Tensor<Real> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = numeric::gelu(out[i]);
  const std::size_t ix = x.index();
  return tape.record(std::move(out), tape.needs_grad(ix), [ix](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * numeric::gelu_derivative(xv[i]);
  });
}

template <class Real>
Var<Real> attention(const Var<Real>& qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  Tape<Real>& tape = *qkv.tape();
  const auto& in = qkv.value();
  if (in.rank() != 2 || in.dim(0) != batch * seq || in.dim(1) % 3 != 0 || heads == 0 ||
      (in.dim(1) / 3) % heads != 0) {
    throw DimensionError("attention: qkv " + shape_str(in.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dim = in.dim(1) / 3, hd = dim / heads, width = in.dim(1);
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

  // Copies one head's q, k or v block of one sample into a contiguous [seq x hd] buffer.
  auto gather = [=](const Real* src, std::size_t b, std::size_t col0, Real* dst) {
    for (std::size_t s = 0; s < seq; ++s) std::copy_n(src + (b * seq + s) * width + col0, hd, dst + s * hd);
  };

  Tensor<Real> out({batch * seq, dim});
  std::vector<Real> probs(batch * heads * seq * seq);
  std::vector<Real> q(seq * hd), k(seq * hd), v(seq * hd), o(seq * hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather(in.data(), b, h * hd, q.data());
      gather(in.data(), b, dim + h * hd, k.data());
      gather(in.data(), b, 2 * dim + h * hd, v.data());
      Real* p = probs.data() + (b * heads + h) * seq * seq;
      kernels::gemm_nt(seq, hd, seq, q.data(), k.data(), p, false);
      for (std::size_t r = 0; r < seq; ++r) {
        Real* row = p + r * seq;
        for (std::size_t j = 0; j < seq; ++j) row[j] *= scale;
        numeric::softmax_row(row, seq);
      }
      kernels::gemm_nn(seq, seq, hd, p, v.data(), o.data(), false);
      for (std::size_t s = 0; s < seq; ++s) std::copy_n(o.data() + s * hd, hd, out.data() + (b * seq + s) * dim + h * hd);
    }
  }

  const std::size_t iq = qkv.index();
  return tape.record(
      std::move(out), tape.needs_grad(iq),
      [=, probs = std::move(probs)](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = t.value(iq);
        auto& gx = t.grad(iq);
        std::vector<Real> q(seq * hd), k(seq * hd), v(seq * hd), go(seq * hd);
        std::vector<Real> dq(seq * hd), dk(seq * hd), dv(seq * hd), dp(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            gather(x.data(), b, h * hd, q.data());
            gather(x.data(), b, dim + h * hd, k.data());
            gather(x.data(), b, 2 * dim + h * hd, v.data());
            for (std::size_t s = 0; s < seq; ++s) std::copy_n(g.data() + (b * seq + s) * dim + h * hd, hd, go.data() + s * hd);
            const Real* p = probs.data() + (b * heads + h) * seq * seq;
            // dP = dO V^T ; dV = P^T dO
            kernels::gemm_nt(seq, hd, seq, go.data(), v.data(), dp.data(), false);
            kernels::gemm_tn(seq, seq, hd, p, go.data(), dv.data(), false);
            // dS = P * (dP - rowsum(dP * P)), then the score scale.
            for (std::size_t r = 0; r < seq; ++r) {
              const Real* pr = p + r * seq;
              Real* dr = dp.data() + r * seq;
              Real dotp = 0;
              for (std::size_t j = 0; j < seq; ++j) dotp += dr[j] * pr[j];
              for (std::size_t j = 0; j < seq; ++j) dr[j] = pr[j] * (dr[j] - dotp) * scale;
            }
            kernels::gemm_nn(seq, seq, hd, dp.data(), k.data(), dq.data(), false);
            kernels::gemm_tn(seq, seq, hd, dp.data(), q.data(), dk.data(), false);
            for (std::size_t s = 0; s < seq; ++s) {
              Real* row = gx.data() + (b * seq + s) * width;
              for (std::size_t j = 0; j < hd; ++j) {
                row[h * hd + j] += dq[s * hd + j];
                row[dim + h * hd + j] += dk[s * hd + j];
                row[2 * dim + h * hd + j] += dv[s * hd + j];
              }
            }
          }
        }
      });
}

template <class Real>
Var<Real> cross_entropy(const Var<Real>& logits, const std::vector<int>& labels) {
  Tape<Real>& tape = *logits.tape();
  require_matrix(logits, "cross_entropy");
  const auto& lv = logits.value();
  const std::size_t rows = lv.dim(0), c = lv.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(lv.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  Tensor<Real> probs = lv;
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = lv.data() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[labels[r]];
    numeric::softmax_row(probs.data() + r * c, c);
  }
  const Real inv_rows = Real(1) / static_cast<Real>(rows);
  const std::size_t il = logits.index();
  return tape.record(Tensor<Real>({1}, total * inv_rows), tape.needs_grad(il),
                     [il, labels, c, inv_rows, probs = std::move(probs)](Tape<Real>& t, std::size_t self) {
                       const Real g = t.grad(self)[0] * inv_rows;
                       auto& gl = t.grad(il);
                       for (std::size_t r = 0; r < labels.size(); ++r) {
                         for (std::size_t j = 0; j < c; ++j) {
                           const Real target = static_cast<std::size_t>(labels[r]) == j ? Real(1) : Real(0);
                           gl[r * c + j] += g * (probs[r * c + j] - target);
                         }
                       }
                     });
}

template <class Real>
Var<Real> group_l2_norms(const Var<Real>& w, const RowGroups& groups) {
  Tape<Real>& tape = *w.tape();
  const auto& wv = w.value();
  const std::size_t c = wv.cols();
  if (groups.empty()) throw DimensionError("group_l2_norms with no groups");
  Tensor<Real> out({groups.size()});
  for (std::size_t k = 0; k < groups.size(); ++k) {
    Real ss = 0;
    for (auto [b, e] : groups[k]) {
      if (b > e || e > wv.rows()) throw DimensionError("group rows out of " + shape_str(wv.shape()));
      for (std::size_t i = b * c; i < e * c; ++i) ss += wv[i] * wv[i];
    }
    out[k] = std::sqrt(ss);
  }
  const std::size_t iw = w.index();
  return tape.record(std::move(out), tape.needs_grad(iw), [iw, groups, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& s = t.value(self);
    const auto& wv = t.value(iw);
    auto& gw = t.grad(iw);
    for (std::size_t k = 0; k < groups.size(); ++k) {
      if (s[k] == Real(0)) continue;
      const Real f = g[k] / s[k];
      for (auto [b, e] : groups[k])
        for (std::size_t i = b * c; i < e * c; ++i) gw[i] += f * wv[i];
    }
  });
}

#define COMBO_INSTANTIATE_OPS(R)                                                               \
  template Var<R> matmul<R>(const Var<R>&, const Var<R>&);                                     \
  template Var<R> add<R>(const Var<R>&, const Var<R>&);                                        \
  template Var<R> add_rowvec<R>(const Var<R>&, const Var<R>&);                                 \
  template Var<R> add_tiled<R>(const Var<R>&, const Var<R>&);                                  \
  template Var<R> scale<R>(const Var<R>&, R);                                                  \
  template Var<R> sum<R>(const Var<R>&);                                                       \
  template Var<R> mean<R>(const Var<R>&);                                                      \
  template Var<R> transpose<R>(const Var<R>&);                                                 \
  template Var<R> reshape<R>(const Var<R>&, Shape);                                            \
  template Var<R> slice_rows<R>(const Var<R>&, std::size_t, std::size_t);                      \
  template Var<R> concat_rows<R>(const std::vector<Var<R>>&);                                  \
  template Var<R> gather_rows<R>(const Var<R>&, const std::vector<std::size_t>&);              \
  template Var<R> layer_norm<R>(const Var<R>&, const Var<R>&, const Var<R>&, R);               \
  template Var<R> softmax<R>(const Var<R>&);                                                   \
  template Var<R> gelu<R>(const Var<R>&);                                                      \
  template Var<R> attention<R>(const Var<R>&, std::size_t, std::size_t, std::size_t);          \
  template Var<R> cross_entropy<R>(const Var<R>&, const std::vector<int>&);                    \
  template Var<R> group_l2_norms<R>(const Var<R>&, const RowGroups&);

COMBO_INSTANTIATE_OPS(float)
COMBO_INSTANTIATE_OPS(double)

#undef COMBO_INSTANTIATE_OPS

}  // namespace ops
}  // namespace combo
