#pragma once

// Central finite-difference gradient checker. Only forward evaluations are
// used for the numeric side, so it stays independent of every backward rule.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "htwa/engine.hpp"

namespace htwa::gradcheck {

struct Options {
  double step = 1e-5;
  double rtol = 1e-3;
  double atol = 1e-6;
};

struct Target {
  std::string path;
  engine::DiffArray array;
  std::vector<std::size_t> indices;  // empty: every element
};

struct Failure {
  std::string path;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct Report {
  std::size_t checked = 0;
  double max_abs_diff = 0.0;
  std::vector<Failure> failures;
  bool ok() const { return failures.empty(); }
};

using LossFn = std::function<engine::DiffArray()>;

// |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)
bool close(double analytic, double numeric, const Options& options);

Report check(const LossFn& loss, std::vector<Target> targets, const Options& options = {});

std::string describe(const Report& report, std::size_t max_lines = 20);

}  // namespace htwa::gradcheck
