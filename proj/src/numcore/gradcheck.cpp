#include "moh/numcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace moh::nc {

namespace {

void record_entry(GradCheckResult& r, double analytic, double numeric, double floor,
                  const std::string& name, std::size_t index) {
  const double abs_err = std::abs(analytic - numeric);
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  const double rel = abs_err / denom;
  r.max_abs_error = std::max(r.max_abs_error, abs_err);
  if (r.checked == 0 || rel > r.max_rel_error) {
    r.max_rel_error = rel;
    r.worst = name + "[" + std::to_string(index) + "]";
  }
  ++r.checked;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>>& inputs, double step,
                           double floor) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.input(x, true));
    Var<double> out = f(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad_tensor(v));
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.input(x, false));
    return f(tape, vars).value().item();
  };
  GradCheckResult r;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t][i];
      inputs[t][i] = orig + step;
      const double fp = eval();
      inputs[t][i] = orig - step;
      const double fm = eval();
      inputs[t][i] = orig;
      record_entry(r, analytic[t][i], (fp - fm) / (2.0 * step), floor, "input" + std::to_string(t), i);
    }
  }
  return r;
}

GradCheckResult grad_check(const StoreFn& f, ParamStore<double>& store, double step, double floor) {
  store.zero_grad();
  {
    Tape<double> tape;
    Binder<double> bind(tape, store);
    tape.backward(f(bind));
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    Binder<double> bind(tape, store);
    return f(bind).value().item();
  };
  GradCheckResult r;
  for (auto& [name, p] : store) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double fp = eval();
      p.value[i] = orig - step;
      const double fm = eval();
      p.value[i] = orig;
      record_entry(r, p.grad[i], (fp - fm) / (2.0 * step), floor, name, i);
    }
  }
  return r;
}

}  // namespace moh::nc
