#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungseg/tensor.hpp"

namespace lungseg {

struct GradReport {
  std::string name;
  double max_rel_err = 0.0;
  /// Largest relative error among coordinates not covered by abs_floor.
  double max_rel_err_above_floor = 0.0;
  double max_abs_err = 0.0;
  std::int64_t worst_index = -1;
  bool pass = false;
  std::int64_t checked = 0;  // coordinates probed
  double tolerance = 0.0;
  double abs_floor = 0.0;
  std::string note;
};

using ScalarFn = std::function<double(const Tensor5<double>&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
Tensor5<double> finite_diff_grad(const ScalarFn& f, const Tensor5<double>& x, double h);

/// Relative error |a - n| / max(|a|, |n|, 1e-8) per coordinate.
double relative_error(double analytic, double numeric);

/// Compares the analytic and numeric values at `indices` (all elements when empty).
GradReport compare_gradients(const std::string& name, const Tensor5<double>& analytic,
                             const Tensor5<double>& numeric, double tolerance, double abs_floor,
                             const std::vector<std::int64_t>& indices = {});

/// A differentiable scalar function of several tensors, evaluated in place.
struct GradProblem {
  struct Input {
    std::string name;
    Tensor5<double>* value;
  };
  std::vector<Input> inputs;
  /// Forward only, reading the current values of `inputs`.
  std::function<double()> loss;
  /// Forward and backward; one gradient per input, same order.
  std::function<std::vector<Tensor5<double>>()> analytic;
  double step = 1e-5;
  double tolerance = 1e-4;
  double abs_floor = 1e-8;
  /// 0 probes every coordinate; otherwise the total number of sampled
  /// coordinates across all inputs (each input gets at least one).
  std::int64_t sample_budget = 0;
  std::string note;
  /// Keeps whatever the closures refer to alive.
  std::shared_ptr<void> owner;
};

/// Runs the finite-difference oracle against `problem.analytic`. A coordinate
/// whose estimate disagrees is probed once more with step/10 and that
/// estimate counts. This keeps a ReLU or max-pool kink inside
/// [x-h, x+h] from masquerading as a wrong derivative. When the two
/// estimates also disagree with each other, or the one-sided differences at
/// step/10 disagree (a kink at the point itself), the coordinate is
/// unresolved: it
/// is excluded and, under sampling, replaced by another draw from the same
/// tensor. A tensor with no resolved coordinate fails.
std::vector<GradReport> run_gradcheck(GradProblem& problem, std::uint64_t seed);

/// Names accepted by check_gradients: every primitive op, the four blocks,
/// both networks and the three losses.
const std::vector<std::string>& gradcheck_targets();

/// Builds the micro-scale f64 problem for `target`; tolerance < 0 keeps the
/// target's default (1e-4 for ops and blocks, 1e-3 for networks).
GradProblem make_grad_problem(const std::string& target, std::uint64_t seed, double tolerance = -1.0);

std::vector<GradReport> check_gradients(const std::string& target, std::uint64_t seed, double tolerance = -1.0);

nlohmann::json to_json(const GradReport& r);
nlohmann::json to_json(const std::vector<GradReport>& reports);

}  // namespace lungseg
