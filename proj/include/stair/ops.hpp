#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "stair/rng.hpp"
#include "stair/tensor.hpp"
#include "stair/types.hpp"

namespace stair {

using IdxMat = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Reduction { Mean, Sum };

// ---------------------------------------------------------------------------
// Elementwise / linear primitives
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  Var<S> out(Mat<S>(a.value() + b.value()), recording(a, b));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) b.accumulate_grad(out.grad());
    });
  }
  return out;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("sub: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  Var<S> out(Mat<S>(a.value() - b.value()), recording(a, b));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) b.accumulate_grad(Mat<S>(-out.grad()));
    });
  }
  return out;
}

// Broadcasts a 1xN row (e.g. a bias) over every row of a.
template <typename S>
Var<S> add_rowvec(const Var<S>& a, const Var<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_rowvec: " + shape_str(a.value()) + " + " + shape_str(row.value()));
  Mat<S> v = a.value();
  v.rowwise() += row.value().row(0);
  Var<S> out(std::move(v), recording(a, row));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, row, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (row.requires_grad()) row.accumulate_grad(Mat<S>(out.grad().colwise().sum()));
    });
  }
  return out;
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  Var<S> out(Mat<S>(a.value().cwiseProduct(b.value())), recording(a, b));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(Mat<S>(out.grad().cwiseProduct(b.value())));
      if (b.requires_grad()) b.accumulate_grad(Mat<S>(out.grad().cwiseProduct(a.value())));
    });
  }
  return out;
}

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  Var<S> out(Mat<S>(a.value() * s), recording(a));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, out, s]() mutable { a.accumulate_grad(Mat<S>(out.grad() * s)); });
  }
  return out;
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Var<S> out(Mat<S>(a.value().cwiseMax(S(0))), recording(a));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, out]() mutable {
      Mat<S> g = out.grad();
      const Mat<S>& x = a.value();
      for (Index i = 0; i < g.rows(); ++i)
        for (Index j = 0; j < g.cols(); ++j)
          if (x(i, j) <= S(0)) g(i, j) = S(0);
      a.accumulate_grad(g);
    });
  }
  return out;
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.value()) + " * " +
                     shape_str(b.value()));
  Var<S> out(Mat<S>(a.value() * b.value()), recording(a, b));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(Mat<S>(out.grad() * b.value().transpose()));
      if (b.requires_grad()) b.accumulate_grad(Mat<S>(a.value().transpose() * out.grad()));
    });
  }
  return out;
}

// a * b^T, used for attention scores.
template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner extents differ, " + shape_str(a.value()) + " * " +
                     shape_str(b.value()) + "^T");
  Var<S> out(Mat<S>(a.value() * b.value().transpose()), recording(a, b));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(Mat<S>(out.grad() * b.value()));
      if (b.requires_grad()) b.accumulate_grad(Mat<S>(out.grad().transpose() * a.value()));
    });
  }
  return out;
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Mat<S> v(1, 1);
  v(0, 0) = a.value().sum();
  Var<S> out(std::move(v), recording(a));
  if (out.requires_grad()) {
    Tape<S>::active()->record([a, out]() mutable {
      a.accumulate_grad(Mat<S>(Mat<S>::Constant(a.rows(), a.cols(), out.grad()(0, 0))));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row slicing / concatenation (token-block plumbing)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> slice_rows(const Var<S>& a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.rows())
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + n) +
                     ") out of " + shape_str(a.value()));
  Var<S> out(Mat<S>(a.value().middleRows(start, n)), recording(a));
  if (out.requires_grad()) {
    Tape<S>::active()->record(
        [a, out, start]() mutable { a.accumulate_grad_block(start, 0, out.grad()); });
  }
  return out;
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.cols())
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + n) +
                     ") out of " + shape_str(a.value()));
  Var<S> out(Mat<S>(a.value().middleCols(start, n)), recording(a));
  if (out.requires_grad()) {
    Tape<S>::active()->record(
        [a, out, start]() mutable { a.accumulate_grad_block(0, start, out.grad()); });
  }
  return out;
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  Index rows = 0;
  Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.value()));
    rows += p.rows();
  }
  Mat<S> v(rows, cols);
  Index at = 0;
  bool rec = false;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    rec = rec || p.requires_grad();
  }
  rec = rec && Tape<S>::active() != nullptr;
  Var<S> out(std::move(v), rec);
  if (rec) {
    Tape<S>::active()->record([parts, out]() mutable {
      Index at = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) p.accumulate_grad(Mat<S>(out.grad().middleRows(at, p.rows())));
        at += p.rows();
      }
    });
  }
  return out;
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  Index cols = 0;
  Index rows = parts[0].rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch " + shape_str(p.value()));
    cols += p.cols();
  }
  Mat<S> v(rows, cols);
  Index at = 0;
  bool rec = false;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    rec = rec || p.requires_grad();
  }
  rec = rec && Tape<S>::active() != nullptr;
  Var<S> out(std::move(v), rec);
  if (rec) {
    Tape<S>::active()->record([parts, out]() mutable {
      Index at = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) p.accumulate_grad(Mat<S>(out.grad().middleCols(at, p.cols())));
        at += p.cols();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization, masked softmax, loss
// ---------------------------------------------------------------------------

// Per-row layer normalization with affine gain/bias (both 1xD). Epsilon sits
// inside the square root, so constant rows normalize to zero.
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  const Index d = x.cols();
  if (d == 0) throw ShapeError("layer_norm: zero feature dimension");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: affine params " + shape_str(gain.value()) + "/" +
                     shape_str(bias.value()) + " do not match input " + shape_str(x.value()));

  const Mat<S>& xv = x.value();
  Mat<S> xhat(xv.rows(), d);
  Mat<S> inv_std(xv.rows(), 1);
  for (Index i = 0; i < xv.rows(); ++i) {
    S mean = xv.row(i).mean();
    S var = (xv.row(i).array() - mean).square().sum() / S(d);
    S istd = S(1) / std::sqrt(var + eps);
    inv_std(i, 0) = istd;
    xhat.row(i) = (xv.row(i).array() - mean) * istd;
  }
  Mat<S> v = xhat;
  for (Index i = 0; i < v.rows(); ++i)
    v.row(i) = v.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);

  Var<S> out(std::move(v), Tape<S>::active() != nullptr &&
                               (x.requires_grad() || gain.requires_grad() || bias.requires_grad()));
  if (out.requires_grad()) {
    Tape<S>::active()->record([x, gain, bias, out, xhat, inv_std, d]() mutable {
      const Mat<S>& gy = out.grad();
      if (bias.requires_grad()) bias.accumulate_grad(Mat<S>(gy.colwise().sum()));
      if (gain.requires_grad()) gain.accumulate_grad(Mat<S>(gy.cwiseProduct(xhat).colwise().sum()));
      if (x.requires_grad()) {
        Mat<S> gx(gy.rows(), d);
        for (Index i = 0; i < gy.rows(); ++i) {
          // dL/dxhat for this row
          Eigen::Array<S, 1, Eigen::Dynamic> gh =
              gy.row(i).array() * gain.value().row(0).array();
          S mean_gh = gh.mean();
          S mean_ghx = (gh * xhat.row(i).array()).mean();
          gx.row(i) =
              ((gh - mean_gh - xhat.row(i).array() * mean_ghx) * inv_std(i, 0)).matrix();
        }
        x.accumulate_grad(gx);
      }
    });
  }
  return out;
}

// Row softmax under an allow/forbid mask (1 = allowed). Forbidden entries
// are exactly zero in the output; the row max is taken over allowed entries
// only. A fully forbidden row is an error.
template <typename S>
Var<S> softmax_rows(const Var<S>& x, const MaskMat& mask) {
  if (mask.rows() != x.rows() || mask.cols() != x.cols())
    throw ShapeError("softmax_rows: mask " + shape_str(mask.rows(), mask.cols()) +
                     " does not match input " + shape_str(x.value()));
  const Mat<S>& xv = x.value();
  Mat<S> v = Mat<S>::Zero(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.rows(); ++i) {
    S mx = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Index j = 0; j < xv.cols(); ++j)
      if (mask(i, j)) {
        any = true;
        mx = std::max(mx, xv(i, j));
      }
    if (!any) throw MaskError("softmax_rows: row " + std::to_string(i) + " is fully forbidden");
    S sum = S(0);
    for (Index j = 0; j < xv.cols(); ++j)
      if (mask(i, j)) {
        v(i, j) = std::exp(xv(i, j) - mx);
        sum += v(i, j);
      }
    for (Index j = 0; j < xv.cols(); ++j)
      if (mask(i, j)) v(i, j) /= sum;
  }
  Var<S> out(std::move(v), recording(x));
  if (out.requires_grad()) {
    Tape<S>::active()->record([x, out]() mutable {
      const Mat<S>& y = out.value();
      const Mat<S>& gy = out.grad();
      Mat<S> gx(y.rows(), y.cols());
      for (Index i = 0; i < y.rows(); ++i) {
        S dot = gy.row(i).dot(y.row(i));
        gx.row(i) = y.row(i).cwiseProduct(gy.row(i) - Mat<S>::Constant(1, y.cols(), dot));
      }
      x.accumulate_grad(gx);  // forbidden entries have y == 0, so gx == 0 there
    });
  }
  return out;
}

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
  return softmax_rows(x, MaskMat::Ones(x.rows(), x.cols()));
}

// Mean (or sum) negative log-likelihood over non-ignored positions.
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& targets,
                     int ignore_index = kIgnoreIndex, Reduction red = Reduction::Mean) {
  const Index t = logits.rows();
  const Index vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != t)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(logits.value()));
  Index n = 0;
  double total = 0.0;
  std::vector<double> logz(t, 0.0);
  const Mat<S>& lv = logits.value();
  for (Index i = 0; i < t; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || targets[i] >= vocab)
      throw VocabError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocab of " + std::to_string(vocab));
    double mx = static_cast<double>(lv.row(i).maxCoeff());
    double sum = 0.0;
    for (Index j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(lv(i, j)) - mx);
    logz[i] = mx + std::log(sum);
    total += logz[i] - static_cast<double>(lv(i, targets[i]));
    ++n;
  }
  if (n == 0) throw NumericError("cross_entropy: degenerate batch, every position ignored");
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(red == Reduction::Mean ? total / n : total);
  Var<S> out(std::move(v), recording(logits));
  if (out.requires_grad()) {
    Tape<S>::active()->record([logits, out, targets, ignore_index, red, n]() mutable {
      const Mat<S>& lv = logits.value();
      const S go = out.grad()(0, 0);
      const S w = red == Reduction::Mean ? go / S(n) : go;
      Mat<S> g = Mat<S>::Zero(lv.rows(), lv.cols());
      for (Index i = 0; i < lv.rows(); ++i) {
        if (targets[i] == ignore_index) continue;
        S mx = lv.row(i).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (lv.row(i).array() - mx).exp();
        e /= e.sum();
        g.row(i) = (e * w).matrix();
        g(i, targets[i]) -= w;
      }
      logits.accumulate_grad(g);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup / gather
// ---------------------------------------------------------------------------

template <typename S>
Var<S> embedding_lookup(const Var<S>& table, const std::vector<int>& ids) {
  const Index vocab = table.rows();
  Mat<S> v(static_cast<Index>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw VocabError("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocab of " +
                       std::to_string(vocab));
    v.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  Var<S> out(std::move(v), recording(table));
  if (out.requires_grad()) {
    Tape<S>::active()->record([table, out, ids]() mutable {
      Mat<S> g = Mat<S>::Zero(table.rows(), table.cols());
      for (size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += out.grad().row(static_cast<Index>(i));
      table.accumulate_grad(g);
    });
  }
  return out;
}

// out(i, j) = x(i, idx(i, j)); scatter-adds on the way back. Used to turn a
// per-offset relative-position score table into per-pair scores.
template <typename S>
Var<S> gather_rel(const Var<S>& x, const IdxMat& idx) {
  Mat<S> v(idx.rows(), idx.cols());
  if (idx.rows() != x.rows())
    throw ShapeError("gather_rel: row mismatch " + shape_str(x.value()) + " vs index " +
                     shape_str(idx.rows(), idx.cols()));
  for (Index i = 0; i < idx.rows(); ++i)
    for (Index j = 0; j < idx.cols(); ++j) {
      int k = idx(i, j);
      if (k < 0 || k >= x.cols())
        throw ShapeError("gather_rel: index " + std::to_string(k) + " outside " +
                         shape_str(x.value()));
      v(i, j) = x.value()(i, k);
    }
  Var<S> out(std::move(v), recording(x));
  if (out.requires_grad()) {
    Tape<S>::active()->record([x, out, idx]() mutable {
      Mat<S> g = Mat<S>::Zero(x.rows(), x.cols());
      for (Index i = 0; i < idx.rows(); ++i)
        for (Index j = 0; j < idx.cols(); ++j) g(i, idx(i, j)) += out.grad()(i, j);
      x.accumulate_grad(g);
    });
  }
  return out;
}

// Inverted dropout: keeps with probability 1-p and rescales, identity when
// not training or p == 0. Draws row-major from the given stream.
template <typename S>
Var<S> dropout(const Var<S>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout rate must be < 1, got " + std::to_string(p));
  Mat<S> m(x.rows(), x.cols());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform() < p ? S(0) : keep_scale;
  return mul(x, Var<S>::constant(std::move(m)));
}

}  // namespace stair
