// SPDX-License-Identifier: Apache-2.0

#include "clearair/image.hpp"

#include <algorithm>
#include <cmath>

#include "clearair/errors.hpp"

namespace clearair {

ImageTensor::ImageTensor(Tensor data) : data_(std::move(data)) {
    validate();
}

void ImageTensor::validate() const {
    if (data_.ndim() != 3) throw ValidationError("image must be [C,H,W]");
    const int c = data_.dim(0);
    if (c != 1 && c != 3) throw ValidationError("image channels must be 1 or 3");
    if (data_.dim(1) < 1 || data_.dim(2) < 1) throw ValidationError("image H,W must be >= 1");
    for (std::int64_t i = 0; i < data_.size(); ++i) {
        const double v = data_[i];
        if (!std::isfinite(v)) throw ValidationError("image contains non-finite values");
        if (v < 0.0 || v > 1.0) throw ValidationError("image values must lie in [0,1]");
    }
}

ImageTensor ImageTensor::constant(int c, int h, int w, double value) {
    return ImageTensor(Tensor::full({c, h, w}, value));
}

ImageTensor ImageTensor::from_bytes(int c, int h, int w, const std::vector<std::uint8_t>& bytes) {
    if (static_cast<std::int64_t>(bytes.size()) != static_cast<std::int64_t>(c) * h * w) {
        throw ValidationError("from_bytes: byte count mismatch");
    }
    Tensor t({c, h, w});
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        t[static_cast<std::int64_t>(i)] = bytes[i] / 255.0;
    }
    return ImageTensor(std::move(t));
}

std::vector<std::uint8_t> ImageTensor::to_bytes() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(data_.size()));
    for (std::int64_t i = 0; i < data_.size(); ++i) {
        const double v = std::clamp(data_[i], 0.0, 1.0) * 255.0;
        out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v));
    }
    return out;
}

double ImageTensor::mean() const {
    double acc = 0.0;
    for (std::int64_t i = 0; i < data_.size(); ++i) acc += data_[i];
    return acc / static_cast<double>(data_.size());
}

ImageTensor clamp_to_image(Tensor t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
    return ImageTensor(std::move(t));
}

Tensor luminance(const ImageTensor& img) {
    const int h = img.height(), w = img.width();
    Tensor out({1, h, w});
    if (img.channels() == 1) {
        std::copy(img.tensor().data(), img.tensor().data() + out.size(), out.data());
        return out;
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            out.at(0, y, x) =
                0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
        }
    }
    return out;
}

} // namespace clearair
