// SPDX-License-Identifier: Apache-2.0

#include "clearair/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "clearair/errors.hpp"

namespace clearair {

std::int64_t element_count(const std::vector<int>& dims) {
    std::int64_t n = 1;
    for (int d : dims) {
        if (d < 0) throw ShapeError("negative tensor dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(static_cast<std::size_t>(element_count(dims_)), 0.0);
}

Tensor Tensor::full(std::vector<int> dims, double value) {
    Tensor t(std::move(dims));
    t.fill(value);
    return t;
}

Tensor Tensor::from_values(std::vector<int> dims, std::vector<double> values) {
    if (element_count(dims) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("from_values: element count does not match dims");
    }
    Tensor t;
    t.dims_ = std::move(dims);
    t.data_ = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

double Tensor::min() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : data_) m = std::min(m, v);
    return m;
}

double Tensor::max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : data_) m = std::max(m, v);
    return m;
}

double Tensor::abs_max() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

void Tensor::fill(double v) {
    std::fill(data_.begin(), data_.end(), v);
}

Tensor Tensor::reshaped(std::vector<int> dims) const {
    if (element_count(dims) != size()) {
        throw ShapeError("reshaped: element count mismatch");
    }
    Tensor t;
    t.dims_ = std::move(dims);
    t.data_ = data_;
    return t;
}

} // namespace clearair
