#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stair/types.hpp"

namespace stair {

// Named view onto one trainable matrix. The registry order is the canonical
// parameter order everywhere (optimizer state, checkpoints, grad packing).
template <typename S>
struct ParamRef {
  std::string name;
  Mat<S>* value;
};

template <typename S>
struct AdamState {
  long step_count = 0;
  S beta1 = S(0.9);
  S beta2 = S(0.98);
  S epsilon = S(1e-8);
  std::vector<Mat<S>> first_moment;
  std::vector<Mat<S>> second_moment;

  bool initialized() const { return !first_moment.empty(); }
};

// Bias-corrected Adam update in place. Moments are allocated on first use
// and must stay shape-congruent with their parameters afterwards.
template <typename S>
void adam_step(const std::vector<ParamRef<S>>& params, const std::vector<Mat<S>>& grads,
               AdamState<S>& state, S lr) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " grads for " +
                     std::to_string(params.size()) + " params");
  if (!state.initialized()) {
    state.first_moment.reserve(params.size());
    state.second_moment.reserve(params.size());
    for (const auto& p : params) {
      state.first_moment.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
      state.second_moment.push_back(Mat<S>::Zero(p.value->rows(), p.value->cols()));
    }
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads[i];
    auto& p = *params[i].value;
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("adam_step: grad " + shape_str(g) + " vs param " + params[i].name + " " +
                       shape_str(p));
    if (!g.allFinite())
      throw NumericError("adam_step: non-finite gradient for parameter " + params[i].name);
  }
  state.step_count += 1;
  const S t = static_cast<S>(state.step_count);
  const S bc1 = S(1) - std::pow(state.beta1, t);
  const S bc2 = S(1) - std::pow(state.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    m = state.beta1 * m + (S(1) - state.beta1) * g;
    v = state.beta2 * v + (S(1) - state.beta2) * g.cwiseProduct(g);
    Mat<S> mhat = m / bc1;
    Mat<S> vhat = v / bc2;
    params[i].value->array() -= lr * mhat.array() / (vhat.array().sqrt() + state.epsilon);
  }
}

// Scales every gradient by max_norm / ||g||_2 when the joint L2 norm exceeds
// max_norm; returns the applied scale (1.0 when under the threshold).
template <typename S>
double clip_global_norm(std::vector<Mat<S>>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.template cast<double>().squaredNorm());
  double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  double s = max_norm / norm;
  for (auto& g : grads) g *= static_cast<S>(s);
  return s;
}

}  // namespace stair
