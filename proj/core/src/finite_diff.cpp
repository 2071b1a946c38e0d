#include "metalearn/finite_diff.hpp"

#include <cmath>

namespace metalearn {

Tensor finite_diff(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double eps) {
  if (x.precision() != Precision::Double) {
    throw DomainError("finite_diff: oracle requires double precision");
  }
  if (eps <= 0.0) throw DomainError("finite_diff: eps must be positive");
  Tensor g(x.shape(), Precision::Double);
  double* out = g.mutable_data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor hi = x;
    Tensor lo = x;
    hi.mutable_data()[i] += eps;
    lo.mutable_data()[i] -= eps;
    const double fh = f(hi);
    const double fl = f(lo);
    if (!std::isfinite(fh) || !std::isfinite(fl)) {
      throw DomainError("finite_diff: non-finite function value at coordinate " +
                        std::to_string(i));
    }
    out[i] = (fh - fl) / (2.0 * eps);
  }
  return g;
}

}  // namespace metalearn
