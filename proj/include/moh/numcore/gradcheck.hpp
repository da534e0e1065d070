#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moh/numcore/params.hpp"

namespace moh::nc {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "<param>[<flat index>]"
  std::size_t checked = 0;
};

/// Compares analytic gradients of a scalar graph against central differences.
///
/// The relative error of one entry is |a - n| / max(|a|, |n|, floor), so
/// entries whose gradients are both below `floor` are judged on an absolute
/// scale. Only meaningful in 64-bit.
using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>>& inputs,
                           double step = 1e-5, double floor = 1e-4);

/// Same check over every entry of a parameter store.
using StoreFn = std::function<Var<double>(Binder<double>&)>;
GradCheckResult grad_check(const StoreFn& f, ParamStore<double>& store, double step = 1e-5,
                           double floor = 1e-4);

}  // namespace moh::nc
