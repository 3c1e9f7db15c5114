#pragma once

// Central-difference gradient verification for scalar-valued maps.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  std::string to_string() const {
    return std::string(passed ? "pass" : "FAIL") +
           " max_rel_err=" + std::to_string(max_rel_error) +
           " checked=" + std::to_string(checked) +
           " worst_index=" + std::to_string(worst_index);
  }
};

// f evaluates the map on the current contents of x and returns the scalar
// loss node together with the tape that produced it. x must have
// requires_grad set. Coordinates are sampled without replacement up to
// max_coords; 0 means all.
template <class T>
GradCheckReport grad_check(
    const std::function<Ptr<T>(Tape<T>&, const Ptr<T>&)>& f, const Ptr<T>& x,
    double tol, double h = 1e-5, std::size_t max_coords = 0,
    std::uint64_t seed = 0, double denom_floor = 1e-8) {
  GradCheckReport rep;
  Tape<T> tape;
  x->requires_grad = true;
  auto loss = f(tape, x);
  tape.backward(loss);
  const std::vector<T>* g = tape.find_grad(x);
  std::vector<T> analytic(x->value.size(), T(0));
  if (g) analytic = *g;

  std::vector<std::size_t> coords(x->value.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (max_coords > 0 && max_coords < coords.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }

  for (std::size_t i : coords) {
    const T saved = x->value[i];
    x->value[i] = saved + static_cast<T>(h);
    Tape<T> tp;
    const double fp = static_cast<double>(f(tp, x)->value[0]);
    x->value[i] = saved - static_cast<T>(h);
    Tape<T> tm;
    const double fm = static_cast<double>(f(tm, x)->value[0]);
    x->value[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++rep.checked;
    if (rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_index = i;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace vct
