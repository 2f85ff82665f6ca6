// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double tensor. Feature maps are [C, H, W], matrices
// [rows, cols], vectors [n]. This is the single numeric currency of the
// whole pipeline; everything trains and evaluates in double precision.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace clearair {

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> dims);
    Tensor(std::initializer_list<int> dims) : Tensor(std::vector<int>(dims)) {}

    static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
    static Tensor full(std::vector<int> dims, double value);
    static Tensor from_values(std::vector<int> dims, std::vector<double> values);

    int ndim() const { return static_cast<int>(dims_.size()); }
    int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& dims() const { return dims_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(int i) { return data_[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return data_[static_cast<std::size_t>(i) * dims_[1] + j]; }
    double at(int i, int j) const { return data_[static_cast<std::size_t>(i) * dims_[1] + j]; }
    double& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * dims_[1] + y) * dims_[2] + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * dims_[1] + y) * dims_[2] + x];
    }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
    bool all_finite() const;
    double min() const;
    double max() const;
    double abs_max() const;

    void fill(double v);
    // Reinterpret with a new shape of identical element count.
    Tensor reshaped(std::vector<int> dims) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.dims_ == b.dims_ && a.data_ == b.data_;
    }

private:
    std::vector<int> dims_;
    std::vector<double> data_;
};

std::int64_t element_count(const std::vector<int>& dims);

} // namespace clearair
