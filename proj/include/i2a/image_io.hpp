#pragma once

#include <string>

#include "i2a/tensor.hpp"

namespace i2a::imageio {

// Images are H x W x C tensors with values in [0, 1]; C is 1 or 3 on save
// (4-channel PNGs load with alpha kept).

Tensor load_image(const std::string& path);  // dispatches on extension (.png, .ppm, .pgm)
void save_png(const std::string& path, const Tensor& image);
void save_ppm(const std::string& path, const Tensor& image);

Tensor load_png(const std::string& path);
Tensor load_ppm(const std::string& path);

// Encode to an in-memory PNG (used by the HTTP captioner client).
std::string encode_png(const Tensor& image);

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

}  // namespace i2a::imageio
