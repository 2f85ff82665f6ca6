// SPDX-License-Identifier: Apache-2.0
//
// ImageTensor: a [C,H,W] image with values in [0,1]. C is 1 or 3.
// 8-bit inputs are divided by 255 at ingestion; all operators and metrics
// work on this single convention.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clearair/tensor.hpp"

namespace clearair {

class ImageTensor {
public:
    ImageTensor() = default;
    // Validates invariants: finite, within [0,1], C in {1,3}, H,W >= 1.
    explicit ImageTensor(Tensor data);

    static ImageTensor constant(int c, int h, int w, double value);
    static ImageTensor from_bytes(int c, int h, int w, const std::vector<std::uint8_t>& bytes);

    const Tensor& tensor() const { return data_; }
    Tensor& tensor() { return data_; }

    int channels() const { return data_.dim(0); }
    int height() const { return data_.dim(1); }
    int width() const { return data_.dim(2); }

    double at(int c, int y, int x) const { return data_.at(c, y, x); }
    double& at(int c, int y, int x) { return data_.at(c, y, x); }

    std::vector<std::uint8_t> to_bytes() const; // round-half-up to 8 bit

    // Mean over all elements; used by simple statistics and tests.
    double mean() const;

    void validate() const;

private:
    Tensor data_;
};

// Clamps every element of t into [0,1] and wraps it as an image.
ImageTensor clamp_to_image(Tensor t);

// Rec. 601 luma; identity for single-channel images. Result is [1,H,W].
Tensor luminance(const ImageTensor& img);

} // namespace clearair
