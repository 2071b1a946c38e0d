#pragma once

#include <functional>

#include "metalearn/tensor.hpp"

namespace metalearn {

// Central-difference gradient estimate of a scalar function, coordinate by
// coordinate. This is the independent oracle that grad() is checked against;
// it never touches the tape machinery. Double precision only.
Tensor finite_diff(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double eps);

}  // namespace metalearn
