#include "htwa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace htwa::gradcheck {

using engine::DiffArray;

bool close(double analytic, double numeric, const Options& options) {
  const double diff = std::abs(analytic - numeric);
  return diff <= options.atol + options.rtol * std::max(std::abs(analytic), std::abs(numeric));
}

Report check(const LossFn& loss, std::vector<Target> targets, const Options& options) {
  for (auto& t : targets) {
    t.array.set_requires_grad(true);
    t.array.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    engine::Tape tape;
    engine::TapeScope scope(tape);
    DiffArray value = loss();
    tape.backward(value);
  }
  for (auto& t : targets) {
    if (t.array.has_grad()) {
      analytic.emplace_back(t.array.grad().begin(), t.array.grad().end());
    } else {
      analytic.emplace_back(t.array.numel(), 0.0);
    }
  }

  Report report;
  engine::NoGradScope no_grad;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    auto& t = targets[ti];
    std::vector<std::size_t> indices = t.indices;
    if (indices.empty()) {
      indices.resize(t.array.numel());
      for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    }
    auto values = t.array.mutable_data();
    for (std::size_t idx : indices) {
      const double saved = values[idx];
      values[idx] = saved + options.step;
      const double plus = loss().item();
      values[idx] = saved - options.step;
      const double minus = loss().item();
      values[idx] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[ti][idx];
      ++report.checked;
      report.max_abs_diff = std::max(report.max_abs_diff, std::abs(a - numeric));
      if (!close(a, numeric, options)) report.failures.push_back({t.path, idx, a, numeric});
    }
  }
  for (auto& t : targets) t.array.zero_grad();
  return report;
}

std::string describe(const Report& report, std::size_t max_lines) {
  std::ostringstream os;
  os << "checked " << report.checked << " elements, " << report.failures.size()
     << " failures, max |analytic - numeric| = " << report.max_abs_diff << '\n';
  std::size_t shown = 0;
  for (const auto& f : report.failures) {
    if (shown++ == max_lines) {
      os << "  ...\n";
      break;
    }
    os << "  " << f.path << "[" << f.index << "]: analytic " << f.analytic << " numeric " << f.numeric
       << '\n';
  }
  return os.str();
}

}  // namespace htwa::gradcheck
