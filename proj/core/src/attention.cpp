#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "dkf/autodiff.hpp"
#include "dkf/encoder.hpp"
#include "dkf/error.hpp"
#include "eigen_view.hpp"

namespace dkf {

namespace {

using detail::BlockMap;
using detail::ConstBlockMap;

void row_scores(const ConstBlockMap& s, std::vector<double>& m) {
  const auto n = s.cols();
  m.resize(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i);
    m[static_cast<std::size_t>(i)] = row.maxCoeff() - row.sum() / static_cast<double>(n);
  }
}

// One head of one window. `probs` receives the attention weights (uniform rows
// for queries that were not selected) and `selected` the per-query mask.
void head_forward(const ConstBlockMap& q, const ConstBlockMap& k, const ConstBlockMap& v,
                  BlockMap out, BlockMap probs, char* selected, bool sparse, double factor) {
  const auto n = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  probs.noalias() = q.lazyProduct(k.transpose()) * scale;

  std::fill(selected, selected + n, char{1});
  if (sparse) {
    const std::size_t u = probsparse_query_count(static_cast<std::size_t>(n), factor);
    if (u < static_cast<std::size_t>(n)) {
      std::vector<double> m;
      row_scores(ConstBlockMap(probs.data(), n, n, detail::Stride(probs.outerStride())), m);
      std::fill(selected, selected + n, char{0});
      for (std::size_t idx : probsparse_select(Vector::from_data(std::move(m)), u))
        selected[idx] = 1;
    }
  }

  const double uniform = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto row = probs.row(i);
    if (!selected[i]) {
      row.setConstant(uniform);
      continue;
    }
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
  out.noalias() = probs.lazyProduct(v);
}

void head_backward(const ConstBlockMap& q, const ConstBlockMap& k, const ConstBlockMap& v,
                   const ConstBlockMap& probs, const char* selected, const ConstBlockMap& g_out,
                   BlockMap* g_q, BlockMap* g_k, BlockMap* g_v) {
  const auto n = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  if (g_v) g_v->noalias() += probs.transpose().lazyProduct(g_out);
  if (!g_q && !g_k) return;
  detail::RowMatrix ds = g_out.lazyProduct(v.transpose());  // dL/dP
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!selected[i]) {
      ds.row(i).setZero();
      continue;
    }
    const double dot = ds.row(i).dot(probs.row(i));
    ds.row(i) = (probs.row(i).array() * (ds.row(i).array() - dot)).matrix();
  }
  if (g_q) g_q->noalias() += ds.lazyProduct(k) * scale;
  if (g_k) g_k->noalias() += ds.transpose().lazyProduct(q) * scale;
}

ConstBlockMap whole(const Matrix& m) { return detail::block(m, 0, m.rows(), 0, m.cols()); }

void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.rows() == 0 || q.cols() == 0) throw ShapeError("attention: empty query matrix");
  if (k.rows() != q.rows() || v.rows() != q.rows() || k.cols() != q.cols() || v.cols() == 0)
    throw ShapeError("attention: query/key/value shapes disagree");
}

Matrix single_head(const Matrix& q, const Matrix& k, const Matrix& v, bool sparse, double factor) {
  check_qkv(q, k, v);
  Matrix out(q.rows(), v.cols());
  Matrix probs(q.rows(), q.rows());
  std::vector<char> selected(q.rows());
  head_forward(whole(q), whole(k), whole(v), detail::block(out, 0, out.rows(), 0, out.cols()),
               detail::block(probs, 0, probs.rows(), 0, probs.cols()), selected.data(), sparse,
               factor);
  return out;
}

}  // namespace

Matrix full_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  return single_head(q, k, v, false, 1.0);
}

Vector probsparse_scores(const Matrix& q, const Matrix& k) {
  if (q.rows() == 0 || k.rows() == 0 || q.cols() != k.cols())
    throw ShapeError("probsparse_scores: query/key shapes disagree");
  Matrix s(q.rows(), k.rows());
  detail::view(s).noalias() =
      (detail::view(q) * detail::view(k).transpose()) / std::sqrt(static_cast<double>(q.cols()));
  std::vector<double> m;
  row_scores(whole(s), m);
  for (double& x : m) x = std::max(x, 0.0);  // max >= mean; clamps rounding residue
  return Vector::from_data(std::move(m));
}

std::size_t probsparse_query_count(std::size_t tokens, double factor) {
  if (!(factor > 0.0)) throw ConfigError("probsparse factor must be positive");
  const double u = std::ceil(factor * std::log(static_cast<double>(tokens) + 1.0));
  return std::min(tokens, static_cast<std::size_t>(u));
}

std::vector<std::size_t> probsparse_select(const Vector& scores, std::size_t u) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t keep = std::min(u, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

Matrix probsparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, double factor) {
  if (!(factor > 0.0)) throw ConfigError("probsparse factor must be positive");
  return single_head(q, k, v, true, factor);
}

namespace ad {

Var attention(Var q, Var k, Var v, const AttentionSpec& spec) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  check_qkv(qv, kv, vv);
  if (vv.cols() != qv.cols()) throw ShapeError("attention: value width must match query width");
  if (spec.windows * spec.tokens != qv.rows())
    throw ShapeError("attention: windows*tokens does not match the token stack");
  if (spec.heads == 0 || qv.cols() % spec.heads != 0)
    throw ShapeError("attention: width not divisible by head count");

  const std::size_t n = spec.tokens;
  const std::size_t dh = qv.cols() / spec.heads;
  Matrix out(qv.rows(), qv.cols());
  Matrix probs(spec.windows * spec.heads * n, n);
  std::vector<char> selected(spec.windows * spec.heads * n);

  for (std::size_t w = 0; w < spec.windows; ++w) {
    for (std::size_t h = 0; h < spec.heads; ++h) {
      const std::size_t slot = w * spec.heads + h;
      head_forward(detail::block(qv, w * n, n, h * dh, dh), detail::block(kv, w * n, n, h * dh, dh),
                   detail::block(vv, w * n, n, h * dh, dh), detail::block(out, w * n, n, h * dh, dh),
                   detail::block(probs, slot * n, n, 0, n), selected.data() + slot * n,
                   spec.probsparse, spec.factor);
    }
  }

  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, spec, dh, probs = std::move(probs), selected = std::move(selected)](
          Tape& t, const Matrix& g) {
        const std::size_t n = spec.tokens;
        const Matrix& qv = t.value(q);
        const Matrix& kv = t.value(k);
        const Matrix& vv = t.value(v);
        Matrix* gq = t.requires_grad(q) ? &t.grad_buffer(q) : nullptr;
        Matrix* gk = t.requires_grad(k) ? &t.grad_buffer(k) : nullptr;
        Matrix* gv = t.requires_grad(v) ? &t.grad_buffer(v) : nullptr;
        for (std::size_t w = 0; w < spec.windows; ++w) {
          for (std::size_t h = 0; h < spec.heads; ++h) {
            const std::size_t slot = w * spec.heads + h;
            std::optional<BlockMap> bq, bk, bv;
            if (gq) bq.emplace(detail::block(*gq, w * n, n, h * dh, dh));
            if (gk) bk.emplace(detail::block(*gk, w * n, n, h * dh, dh));
            if (gv) bv.emplace(detail::block(*gv, w * n, n, h * dh, dh));
            head_backward(detail::block(qv, w * n, n, h * dh, dh),
                          detail::block(kv, w * n, n, h * dh, dh),
                          detail::block(vv, w * n, n, h * dh, dh),
                          detail::block(probs, slot * n, n, 0, n), selected.data() + slot * n,
                          detail::block(g, w * n, n, h * dh, dh), bq ? &*bq : nullptr,
                          bk ? &*bk : nullptr, bv ? &*bv : nullptr);
          }
        }
      });
}

}  // namespace ad
}  // namespace dkf
