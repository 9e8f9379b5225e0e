#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stair/rng.hpp"
#include "stair/tensor.hpp"
#include "stair/types.hpp"

namespace stair {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  long coords_checked = 0;
};

// Central-difference oracle for tape gradients. `f` must be a deterministic
// scalar function of the given leaf parameters (dropout off); it is invoked
// with no tape for value probes and once under a tape for the analytic
// gradients. When max_coords_per_param > 0, a seeded random subset of
// coordinates is probed per parameter. The relative error for a coordinate
// is |g_ad - g_fd| / max(1, |g_fd|).
template <typename S>
GradCheckReport finite_diff_check(const std::function<Var<S>()>& f, std::vector<Var<S>>& params,
                                  double epsilon = 1e-5, long max_coords_per_param = 0,
                                  uint64_t sample_seed = 0) {
  auto eval = [&]() -> S {
    Var<S> y = f();
    if (y.rows() != 1 || y.cols() != 1)
      throw ShapeError("finite_diff_check: f must return a scalar, got " + shape_str(y.value()));
    return y.value()(0, 0);
  };

  const S base1 = eval();
  const S base2 = eval();
  if (base1 != base2)
    throw OracleError("finite_diff_check: f is not deterministic (" + std::to_string(base1) +
                      " vs " + std::to_string(base2) + ")");

  for (auto& p : params) p.zero_grad();
  std::vector<Mat<S>> analytic;
  {
    Tape<S> tape;
    Var<S> y = f();
    tape.backward(y);
  }
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  Rng pick(sample_seed, "finite_diff_coords");
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Mat<S>& value = params[pi].mutable_value();
    const Index total = value.size();
    std::vector<Index> coords;
    if (max_coords_per_param <= 0 || total <= max_coords_per_param) {
      coords.resize(total);
      for (Index c = 0; c < total; ++c) coords[c] = c;
    } else {
      for (long c = 0; c < max_coords_per_param; ++c)
        coords.push_back(static_cast<Index>(pick.uniform_int(static_cast<uint64_t>(total))));
    }
    for (Index c : coords) {
      const Index i = c / value.cols();
      const Index j = c % value.cols();
      const S keep = value(i, j);
      value(i, j) = keep + static_cast<S>(epsilon);
      const double fp = static_cast<double>(eval());
      value(i, j) = keep - static_cast<S>(epsilon);
      const double fm = static_cast<double>(eval());
      value(i, j) = keep;
      const double g_fd = (fp - fm) / (2.0 * epsilon);
      const double g_ad = static_cast<double>(analytic[pi](i, j));
      const double rel = std::abs(g_ad - g_fd) / std::max(1.0, std::abs(g_fd));
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = "param" + std::to_string(pi) + "(" + std::to_string(i) + "," +
                             std::to_string(j) + ")";
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace stair
