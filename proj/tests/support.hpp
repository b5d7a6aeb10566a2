// tests/support.hpp
//
// Shared test utilities: central finite-difference gradient checking against
// the tape, random matrix helpers, and tolerance constants.
#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "rtag/rng.hpp"
#include "rtag/tape.hpp"

namespace rtag::test {

using Eigen::MatrixXd;

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-4;
inline constexpr double kFdAbsTol = 1e-7;

inline MatrixXd random_matrix(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Builds a scalar loss from leaf inputs.  The function is re-run from scratch
// for every finite-difference probe, so it must be deterministic.
using ScalarFn = std::function<ad::Value(ad::Tape&, const std::vector<ad::Value>&)>;

struct GradCheckResult {
  bool ok = true;
  double worst_abs_err = 0.0;
  std::string detail;
};

// Central-difference check of d(loss)/d(inputs).  If `probe_limit` > 0, only
// that many coordinates per input are probed (deterministically spread), which
// keeps large-parameter network checks tractable.
inline GradCheckResult check_gradients(const ScalarFn& fn, const std::vector<MatrixXd>& inputs,
                                       int probe_limit = 0, double rel_tol = kFdRelTol,
                                       double abs_tol = kFdAbsTol, double h = kFdStep) {
  GradCheckResult res;

  ad::Tape tape;
  std::vector<ad::Value> leafs;
  leafs.reserve(inputs.size());
  for (const MatrixXd& m : inputs) leafs.push_back(tape.leaf(m));
  ad::Value loss = fn(tape, leafs);
  tape.backward(loss);

  const auto eval = [&](const std::vector<MatrixXd>& xs) {
    ad::Tape t2;
    std::vector<ad::Value> ls;
    ls.reserve(xs.size());
    for (const MatrixXd& m : xs) ls.push_back(t2.leaf(m));
    return fn(t2, ls).scalar();
  };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const MatrixXd& g = leafs[k].grad();
    const Eigen::Index n = inputs[k].size();
    Eigen::Index stride = 1;
    if (probe_limit > 0 && n > probe_limit) stride = n / probe_limit;
    for (Eigen::Index flat = 0; flat < n; flat += stride) {
      const Eigen::Index r = flat % inputs[k].rows();
      const Eigen::Index c = flat / inputs[k].rows();
      std::vector<MatrixXd> xs = inputs;
      xs[k](r, c) += h;
      const double fp = eval(xs);
      xs[k](r, c) -= 2.0 * h;
      const double fm = eval(xs);
      const double fd = (fp - fm) / (2.0 * h);
      const double adg = g(r, c);
      const double err = std::abs(fd - adg);
      const double tol = abs_tol + rel_tol * std::max(std::abs(fd), std::abs(adg));
      res.worst_abs_err = std::max(res.worst_abs_err, err);
      if (err > tol) {
        res.ok = false;
        res.detail = cat("input ", k, " (", r, ",", c, "): ad=", adg, " fd=", fd, " err=", err);
        return res;
      }
    }
  }
  return res;
}

}  // namespace rtag::test
