#pragma once

#include <string>
#include <vector>

#include "mulmon/tensor.hpp"

namespace mulmon {

// Binary PPM (P6) from a [3,H,W] float image; values clipped to [0,1].
void write_ppm(const std::string& path, const Tensor<float>& image);

// Index map rendered with a fixed color table (PPM).
void write_mask_ppm(const std::string& path, const Tensor<int32_t>& mask);

// Rows of (label, values...) as a CSV with a header line.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace mulmon
