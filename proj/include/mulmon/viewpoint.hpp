#pragma once

#include <cmath>

#include "mulmon/tensor.hpp"

namespace mulmon {

// Camera pose vector v in R^J. Generated data uses J=3 holding
// (cos azimuth, sin azimuth, distance-to-center); loaded data may carry any J.
struct Viewpoint {
  Tensor<float> vector;  // [J]

  int64_t dims() const { return vector.numel(); }

  // unit-circle + positive-radius invariants for the generated form
  bool valid_generated() const {
    if (dims() != 3) return false;
    double c = vector.v[0], s = vector.v[1], r = vector.v[2];
    return std::abs(c * c + s * s - 1.0) <= 1e-6 && r > 0.0;
  }

  double azimuth() const { return std::atan2(vector.v[1], vector.v[0]); }
  double radius() const { return vector.v[2]; }
};

inline Viewpoint encode_viewpoint(double azimuth, double radius) {
  MULMON_CHECK(radius > 0.0, "encode_viewpoint: radius must be > 0, got ", radius);
  Viewpoint v;
  v.vector = Tensor<float>(Shape{3});
  v.vector.v[0] = static_cast<float>(std::cos(azimuth));
  v.vector.v[1] = static_cast<float>(std::sin(azimuth));
  v.vector.v[2] = static_cast<float>(radius);
  return v;
}

}  // namespace mulmon
