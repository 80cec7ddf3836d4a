#include "dgs/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dgs {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor Tensor::from(Shape s, std::vector<float> values) {
  check(static_cast<std::int64_t>(values.size()) == s.numel(),
        "Tensor::from: got " + std::to_string(values.size()) + " values for shape " + s.str());
  Tensor t;
  t.shape = s;
  t.data = std::move(values);
  return t;
}

void ConvSpec::validate() const {
  check(kernel == 1 || kernel == 3, "ConvSpec: kernel must be 1 or 3, got " + std::to_string(kernel));
  check(stride == 1 || stride == 2, "ConvSpec: stride must be 1 or 2, got " + std::to_string(stride));
  check(groups >= 1, "ConvSpec: groups must be >= 1");
  check(in_channels > 0 && out_channels > 0, "ConvSpec: channel counts must be positive");
  check(in_channels % groups == 0,
        "ConvSpec: in_channels " + std::to_string(in_channels) + " not divisible by groups " +
            std::to_string(groups));
  check(out_channels % groups == 0,
        "ConvSpec: out_channels " + std::to_string(out_channels) + " not divisible by groups " +
            std::to_string(groups));
}

void check_finite(const std::vector<float>& v, const char* op) {
  // Sum of absolute values is finite iff every term is; one cheap pass.
  double acc = 0.0;
  for (float x : v) acc += std::fabs(static_cast<double>(x));
  if (!std::isfinite(acc)) {
    throw NumericError(std::string(op) + ": non-finite values in output");
  }
}

void check_finite(const Tensor& t, const char* op) {
  check_finite(t.data, op);
}

}  // namespace dgs
