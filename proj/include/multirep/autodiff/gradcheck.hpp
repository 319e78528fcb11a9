#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "multirep/autodiff/tensor.hpp"

namespace multirep::ad {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Test hook: rewrites the analytic gradient of a named tensor before it is
  /// compared.
  std::function<void(const std::string&, std::span<double>)> corrupt;
};

struct GradCheckEntry {
  std::string name;
  double relative_error = 0.0;
  bool passed = true;
};

/// Compares backward() against central differences for every tensor in
/// `inputs`. `loss` must rebuild the scalar from the tensors' current values.
/// The relative error of a tensor is ‖analytic − numeric‖ / max(‖analytic‖,
/// ‖numeric‖), taken as 0 when both norms are below 1e-12.
std::vector<GradCheckEntry> check_gradients(const std::function<Tensor<double>()>& loss,
                                            std::span<NamedTensor> inputs,
                                            const GradCheckOptions& options = {});

bool all_passed(std::span<const GradCheckEntry> entries);

}  // namespace multirep::ad
