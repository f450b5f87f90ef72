#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <vector>

#include "dkf/linalg.hpp"

/// Reverse-mode differentiation over dense matrices.
///
/// A Tape records every value produced by the ops below together with a
/// closure that pushes the output adjoint back to the inputs. Values are
/// computed eagerly; ops whose inputs need no gradient record no closure.
namespace dkf::ad {

class Tape;

/// Handle to a node of a Tape. Cheap to copy; valid as long as its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = std::numeric_limits<std::size_t>::max();

  bool valid() const noexcept { return tape != nullptr; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf whose gradient is accumulated by backward().
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Adjoint of `v` after backward(); a zero matrix when nothing reached it.
  Matrix grad(Var v) const;

  /// Seeds d(root)/d(root) = seed for a 1x1 root and sweeps the tape in reverse.
  void backward(Var root, double seed = 1.0);

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Used by op implementations. `fn` is dropped when no input requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  /// Zero-initialised on first use.
  Matrix& grad_buffer(Var v);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Elementwise and linear-algebra ops. Shapes are checked; mismatches throw ShapeError.
Var matmul(Var a, Var b);     // a b
Var matmul_nt(Var a, Var b);  // a bᵀ
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// a + row, where `row` is 1 x a.cols() and is broadcast over rows.
Var add_row(Var a, Var row);
/// a + [block; block; ...] with `block` repeated a.rows()/block.rows() times.
Var add_tiled(Var a, Var block);
/// a diag(v) with v a 1 x a.cols() row.
Var scale_columns(Var a, Var v);
Var sigmoid(Var a);
Var gelu(Var a);
Var relu(Var a);

/// Row-wise layer normalisation followed by an elementwise affine map
/// (gamma and beta are 1 x cols rows).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Mean over each consecutive group of `group` rows: (n*group x c) -> (n x c).
Var mean_pool(Var x, std::size_t group);

/// Per-window left multiplication: for each window w, out_w = a · x_w where x
/// stacks windows of a.cols() rows and out stacks windows of a.rows() rows.
Var temporal_map(Var a, Var x);

/// Orthogonal factor of the positive-diagonal Householder QR of a square matrix.
/// Differentiated exactly unless `stop_gradient` is set.
Var qr_orthogonal(Var a, bool stop_gradient = false);

/// Interleaves equally shaped parts: row b*parts.size() + i of the result is
/// row b of parts[i]. Turns per-step (B x c) blocks into a window-major stack.
Var interleave_rows(const std::vector<Var>& parts);

/// Squared Euclidean norm of each row: (n x c) -> (n x 1).
Var row_sq_norms(Var a);
/// Mean of all entries as a 1x1 value.
Var mean(Var a);
/// Mean of squared differences as a 1x1 value.
Var mse(Var a, Var b);

struct AttentionSpec {
  std::size_t windows = 1;
  std::size_t tokens = 1;
  std::size_t heads = 1;
  bool probsparse = false;
  double factor = 5.0;
};

/// Multi-head scaled dot-product attention over a window-major token stack.
/// q, k, v are (windows*tokens) x width; the width is split into equal head
/// slices. With `probsparse` only the top-u queries per window and head attend;
/// the remaining queries receive the mean of the value rows.
Var attention(Var q, Var k, Var v, const AttentionSpec& spec);

}  // namespace dkf::ad
