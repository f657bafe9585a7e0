#include "extd/tensor.hpp"

namespace extd {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 || stride < 1 ||
      padding < 0 || groups < 1) {
    throw std::invalid_argument("conv spec has non-positive extents");
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw std::invalid_argument("conv groups (" + std::to_string(groups) +
                                ") must divide in/out channels (" + std::to_string(in_channels) +
                                ", " + std::to_string(out_channels) + ")");
  }
}

}  // namespace extd
