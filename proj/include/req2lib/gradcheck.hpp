#pragma once

// Central-difference gradient checking against tape gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "req2lib/tensor.hpp"

namespace req2lib {

/// Builds a scalar loss on `tape` from parameter variables (one per tensor, same order).
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

class NondeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline double evaluate_loss(const LossBuilder& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.constant(p));
  return f(tape, vars).value().item();
}

}  // namespace detail

/// Compares tape gradients of `f` with (f(x+e) - f(x-e)) / 2e. Tensors with
/// more than `coords_per_tensor` components are checked on a seeded random
/// subset of that size. Relative error uses max(|analytic|, |numeric|, floor)
/// as denominator; `floor` keeps gradients at the roundoff level of the
/// difference quotient (about 1e-16 * |f| / epsilon) from dominating.
inline GradCheckResult finite_difference_check(const LossBuilder& f, std::vector<Tensor> params, double epsilon,
                                               std::size_t coords_per_tensor = 32, std::uint64_t seed = 0,
                                               double floor = 1e-7) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_difference_check: epsilon must be positive");
  if (!(floor > 0.0)) throw std::invalid_argument("finite_difference_check: floor must be positive");
  if (coords_per_tensor == 0) throw std::invalid_argument("finite_difference_check: need at least one coordinate");

  std::vector<Tensor> analytic;
  double base = 0.0;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    Var loss = f(tape, vars);
    base = loss.value().item();
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  const double again = detail::evaluate_loss(f, params);
  if (std::memcmp(&base, &again, sizeof base) != 0)
    throw NondeterministicLoss("loss differs between two evaluations at the same point");

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> coords(params[t].numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double original = params[t][i];
      params[t][i] = original + epsilon;
      const double plus = detail::evaluate_loss(f, params);
      params[t][i] = original - epsilon;
      const double minus = detail::evaluate_loss(f, params);
      params[t][i] = original;
      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double exact = analytic[t][i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), floor});
      const double rel = std::abs(exact - numeric) / denom;
      ++result.coordinates_checked;
      if (rel > result.max_relative_error || result.coordinates_checked == 1) {
        result.max_relative_error = rel;
        result.worst_tensor = t;
        result.worst_index = i;
        result.worst_analytic = exact;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace req2lib
