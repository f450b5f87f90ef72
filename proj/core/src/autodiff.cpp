#include "dkf/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "dkf/error.hpp"
#include "eigen_view.hpp"

namespace dkf::ad {

using detail::view;

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix{}, false, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix{}, true, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
  bool needs = false;
  for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix{}, needs, needs ? std::move(fn) : nullptr});
  return {this, nodes_.size() - 1};
}

Matrix& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root, double seed) {
  if (value(root).rows() != 1 || value(root).cols() != 1)
    throw ShapeError("Tape::backward: root must be a 1x1 value");
  grad_buffer(root)(0, 0) += seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows()
     << "x" << b.cols();
  throw ShapeError(os.str());
}

void accumulate(Tape& t, Var v, const Matrix& g) {
  if (!t.requires_grad(v)) return;
  Matrix& buf = t.grad_buffer(v);
  view(buf) += view(g);
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out(av.rows(), bv.cols());
  view(out).noalias() = view(av) * view(bv);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) view(t.grad_buffer(a)).noalias() += view(g) * view(t.value(b)).transpose();
    if (t.requires_grad(b)) view(t.grad_buffer(b)).noalias() += view(t.value(a)).transpose() * view(g);
  });
}

Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) shape_error("matmul_nt", av, bv);
  Matrix out(av.rows(), bv.rows());
  view(out).noalias() = view(av) * view(bv).transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) view(t.grad_buffer(a)).noalias() += view(g) * view(t.value(b));
    if (t.requires_grad(b)) view(t.grad_buffer(b)).noalias() += view(g).transpose() * view(t.value(a));
  });
}

Var add(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("add", av, bv);
  Matrix out = av;
  view(out) += view(bv);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("sub", av, bv);
  Matrix out = av;
  view(out) -= view(bv);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    if (t.requires_grad(b)) view(t.grad_buffer(b)) -= view(g);
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  view(out) *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) {
    view(t.grad_buffer(a)) += s * view(g);
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_error("add_row", av, rv);
  Matrix out = av;
  view(out).rowwise() += view(rv).row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    if (t.requires_grad(row)) view(t.grad_buffer(row)).row(0) += view(g).colwise().sum();
  });
}

Var add_tiled(Var a, Var block) {
  const Matrix& av = a.value();
  const Matrix& bv = block.value();
  if (bv.cols() != av.cols() || bv.rows() == 0 || av.rows() % bv.rows() != 0)
    shape_error("add_tiled", av, bv);
  const std::size_t reps = av.rows() / bv.rows();
  const std::size_t n = bv.rows();
  Matrix out = av;
  for (std::size_t r = 0; r < reps; ++r)
    detail::block(out, r * n, n, 0, out.cols()) += view(bv);
  return a.tape->record(std::move(out), {a, block}, [a, block, reps, n](Tape& t, const Matrix& g) {
    accumulate(t, a, g);
    if (t.requires_grad(block)) {
      Matrix& gb = t.grad_buffer(block);
      for (std::size_t r = 0; r < reps; ++r) view(gb) += detail::block(g, r * n, n, 0, g.cols());
    }
  });
}

Var scale_columns(Var a, Var v) {
  const Matrix& av = a.value();
  const Matrix& vv = v.value();
  if (vv.rows() != 1 || vv.cols() != av.cols()) shape_error("scale_columns", av, vv);
  Matrix out = av;
  view(out).array().rowwise() *= view(vv).row(0).array();
  return a.tape->record(std::move(out), {a, v}, [a, v](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      view(t.grad_buffer(a)).array() +=
          view(g).array().rowwise() * view(t.value(v)).row(0).array();
    }
    if (t.requires_grad(v)) {
      view(t.grad_buffer(v)).row(0) +=
          (view(g).array() * view(t.value(a)).array()).colwise().sum().matrix();
    }
  });
}

Var sigmoid(Var a) {
  Matrix out = a.value();
  for (double& x : out.values()) x = stable_sigmoid(x);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double s = stable_sigmoid(x.data()[i]);
      ga.data()[i] += g.data()[i] * s * (1.0 - s);
    }
  });
}

Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  const bool slope_needed = a.tape->requires_grad(a);
  Matrix out = a.value();
  Matrix slope = slope_needed ? Matrix(out.rows(), out.cols()) : Matrix{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out.data()[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    out.data()[i] = x * cdf;
    if (slope_needed) slope.data()[i] = cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
  }
  return a.tape->record(std::move(out), {a}, [a, slope = std::move(slope)](Tape& t, const Matrix& g) {
    view(t.grad_buffer(a)).array() += view(g).array() * view(slope).array();
  });
}

Var relu(Var a) {
  Matrix out = a.value();
  for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x.data()[i] > 0.0) ga.data()[i] += g.data()[i];
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != cols)
    shape_error("layer_norm gamma", xv, gamma.value());
  if (beta.value().rows() != 1 || beta.value().cols() != cols)
    shape_error("layer_norm beta", xv, beta.value());

  Matrix xhat(rows, cols);
  std::vector<double> inv_std(rows);
  Matrix out(rows, cols);
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = xv.row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mu) * is;
      xhat(r, c) = h;
      out(r, c) = h * gm[c] + bt[c];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                             const Matrix& g) {
        const std::size_t rows = xhat.rows();
        const std::size_t cols = xhat.cols();
        if (t.requires_grad(gamma)) {
          Matrix& gg = t.grad_buffer(gamma);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg.data()[c] += g(r, c) * xhat(r, c);
        }
        if (t.requires_grad(beta)) {
          Matrix& gb = t.grad_buffer(beta);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb.data()[c] += g(r, c);
        }
        if (t.requires_grad(x)) {
          Matrix& gx = t.grad_buffer(x);
          const double* gm = t.value(gamma).data();
          std::vector<double> dh(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              dh[c] = g(r, c) * gm[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * xhat(r, c);
            }
            mean_dh /= static_cast<double>(cols);
            mean_dh_h /= static_cast<double>(cols);
            for (std::size_t c = 0; c < cols; ++c)
              gx(r, c) += inv_std[r] * (dh[c] - mean_dh - xhat(r, c) * mean_dh_h);
          }
        }
      });
}

Var mean_pool(Var x, std::size_t group) {
  const Matrix& xv = x.value();
  if (group == 0 || xv.rows() % group != 0)
    throw ShapeError("mean_pool: row count not divisible by group size");
  const std::size_t n = xv.rows() / group;
  Matrix out(n, xv.cols());
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t w = 0; w < n; ++w)
    view(out).row(static_cast<Eigen::Index>(w)) =
        detail::block(xv, w * group, group, 0, xv.cols()).colwise().sum() * inv;
  return x.tape->record(std::move(out), {x}, [x, group, n, inv](Tape& t, const Matrix& g) {
    Matrix& gx = t.grad_buffer(x);
    for (std::size_t w = 0; w < n; ++w)
      detail::block(gx, w * group, group, 0, gx.cols()).rowwise() +=
          view(g).row(static_cast<Eigen::Index>(w)) * inv;
  });
}

Var temporal_map(Var a, Var x) {
  const Matrix& av = a.value();
  const Matrix& xv = x.value();
  const std::size_t in_rows = av.cols();
  const std::size_t out_rows = av.rows();
  if (in_rows == 0 || xv.rows() % in_rows != 0) shape_error("temporal_map", av, xv);
  const std::size_t windows = xv.rows() / in_rows;
  Matrix out(windows * out_rows, xv.cols());
  for (std::size_t w = 0; w < windows; ++w)
    detail::block(out, w * out_rows, out_rows, 0, xv.cols()).noalias() =
        view(av) * detail::block(xv, w * in_rows, in_rows, 0, xv.cols());
  return a.tape->record(
      std::move(out), {a, x}, [a, x, windows, in_rows, out_rows](Tape& t, const Matrix& g) {
        const Matrix& av = t.value(a);
        const Matrix& xv = t.value(x);
        const std::size_t c = xv.cols();
        if (t.requires_grad(a)) {
          Matrix& ga = t.grad_buffer(a);
          for (std::size_t w = 0; w < windows; ++w)
            view(ga).noalias() += detail::block(g, w * out_rows, out_rows, 0, c) *
                                  detail::block(xv, w * in_rows, in_rows, 0, c).transpose();
        }
        if (t.requires_grad(x)) {
          Matrix& gx = t.grad_buffer(x);
          for (std::size_t w = 0; w < windows; ++w)
            detail::block(gx, w * in_rows, in_rows, 0, c).noalias() +=
                view(av).transpose() * detail::block(g, w * out_rows, out_rows, 0, c);
        }
      });
}

Var qr_orthogonal(Var a, bool stop_gradient) {
  QrResult qr = householder_qr(a.value());
  if (stop_gradient) return a.tape->constant(std::move(qr.q));
  Matrix q = qr.q;
  return a.tape->record(std::move(q), {a}, [a, qr = std::move(qr)](Tape& t, const Matrix& g) {
    // A_bar = Q tril(QᵀG - GᵀQ, -1) R⁻ᵀ for A = QR with R's diagonal positive.
    const auto q = view(qr.q);
    const auto r = view(qr.r);
    detail::RowMatrix b = q.transpose() * view(g);
    detail::RowMatrix s = b - b.transpose();
    s.triangularView<Eigen::Upper>().setZero();
    detail::RowMatrix m = q * s;
    detail::RowMatrix at = r.triangularView<Eigen::Upper>().solve(m.transpose());
    view(t.grad_buffer(a)) += at.transpose();
  });
}

Var interleave_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("interleave_rows: no parts");
  const std::size_t rows = parts.front().rows();
  const std::size_t cols = parts.front().cols();
  for (const Var& p : parts)
    if (p.rows() != rows || p.cols() != cols) shape_error("interleave_rows", parts.front().value(), p.value());
  const std::size_t n = parts.size();
  Matrix out(rows * n, cols);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix& pv = parts[i].value();
    for (std::size_t b = 0; b < rows; ++b)
      std::copy(pv.row(b).begin(), pv.row(b).end(), out.row(b * n + i).begin());
  }
  Tape& tape = *parts.front().tape;
  bool needs = false;
  for (const Var& p : parts) needs = needs || tape.requires_grad(p);
  Var anchor = parts.front();
  for (const Var& p : parts)
    if (tape.requires_grad(p)) anchor = p;
  return tape.record(std::move(out), {anchor}, [parts, rows, n, needs](Tape& t, const Matrix& g) {
    if (!needs) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (!t.requires_grad(parts[i])) continue;
      Matrix& gp = t.grad_buffer(parts[i]);
      for (std::size_t b = 0; b < rows; ++b) {
        const auto src = g.row(b * n + i);
        auto dst = gp.row(b);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    }
  });
}

Var row_sq_norms(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  view(out).col(0) = view(av).rowwise().squaredNorm();
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    view(t.grad_buffer(a)) += 2.0 * (view(t.value(a)).array().colwise() * view(g).col(0).array()).matrix();
  });
}

Var mean(Var a) {
  const Matrix& av = a.value();
  if (av.empty()) throw ShapeError("mean: empty input");
  Matrix out(1, 1);
  out(0, 0) = view(av).sum() / static_cast<double>(av.size());
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix& ga = t.grad_buffer(a);
    view(ga).array() += g(0, 0) / static_cast<double>(ga.size());
  });
}

Var mse(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("mse", av, bv);
  if (av.empty()) throw ShapeError("mse: empty input");
  Matrix out(1, 1);
  out(0, 0) = (view(av) - view(bv)).squaredNorm() / static_cast<double>(av.size());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const double k = 2.0 * g(0, 0) / static_cast<double>(av.size());
    detail::RowMatrix diff = view(av) - view(t.value(b));
    if (t.requires_grad(a)) view(t.grad_buffer(a)) += k * diff;
    if (t.requires_grad(b)) view(t.grad_buffer(b)) -= k * diff;
  });
}

}  // namespace dkf::ad
