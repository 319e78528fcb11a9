#include "multirep/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace multirep::ad {

std::vector<GradCheckEntry> check_gradients(const std::function<Tensor<double>()>& loss,
                                            std::span<NamedTensor> inputs,
                                            const GradCheckOptions& options) {
  for (NamedTensor& in : inputs) {
    if (!in.tensor.requires_grad()) {
      throw ContractError("gradcheck input '" + in.name + "' does not require a gradient");
    }
    in.tensor.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss());
  }

  std::vector<GradCheckEntry> report;
  for (NamedTensor& in : inputs) {
    std::vector<double> analytic(in.tensor.grad().begin(), in.tensor.grad().end());
    if (options.corrupt) options.corrupt(in.name, analytic);

    std::span<double> values = in.tensor.mutable_data();
    std::vector<double> numeric(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = loss().item();
      values[i] = saved - options.step;
      const double down = loss().item();
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * options.step);
    }

    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    diff = std::sqrt(diff);
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    GradCheckEntry entry{in.name, denom < 1e-12 ? 0.0 : diff / denom, true};
    entry.passed = entry.relative_error < options.tolerance;
    report.push_back(entry);
  }
  return report;
}

bool all_passed(std::span<const GradCheckEntry> entries) {
  return std::all_of(entries.begin(), entries.end(),
                     [](const GradCheckEntry& e) { return e.passed; });
}

}  // namespace multirep::ad
