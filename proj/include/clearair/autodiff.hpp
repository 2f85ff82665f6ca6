// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff over Tensor. A Tape owns the nodes of
// one forward graph; creation order is a valid topological order, so
// backward() is a single reverse sweep. Every op stores exactly what its
// backward closure needs; gradients accumulate into per-node buffers.
//
// The op set is the closed vocabulary of this model family: 1x1/3x3
// convolutions, depthwise 3x3, channel layer norm, softmax attention
// pieces, pixel (un)shuffle, segment pooling, bilinear resize, and the
// elementwise/reduction glue.

#pragma once

#include <functional>
#include <vector>

#include "clearair/tensor.hpp"

namespace clearair::ad {

class Tape;

class Value {
public:
    Value() = default;
    bool valid() const { return tape_ != nullptr; }
    int index() const { return index_; }
    Tape* tape() const { return tape_; }
    const Tensor& val() const;
    const Tensor& grad() const;

private:
    friend class Tape;
    Value(Tape* t, int i) : tape_(t), index_(i) {}
    Tape* tape_ = nullptr;
    int index_ = -1;
};

class Tape {
public:
    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value leaf(Tensor t, bool needs_grad = false);

    // --- elementwise / scalar ---
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, double s);
    Value add_scalar(Value a, double c);
    Value mul_scalar_tensor(Value a, Value s); // s is a [1] tensor (learnable scalar)
    Value gelu(Value a);
    Value sigmoid(Value a);
    Value clamp01(Value a);

    // --- matrices ---
    Value matmul(Value a, Value b);
    Value transpose(Value a);
    Value rows(Value a, int r0, int r1);
    Value concat_rows(const std::vector<Value>& parts);
    Value softmax_rows(Value a);
    Value normalize_rows(Value a, double eps = 1e-12);
    Value add_row_vector(Value a, Value v); // a[m,n] + v[n] broadcast over rows
    Value linear_vec(Value x, Value w, Value b); // w[out,k] * x[k] + b[out]; b may be invalid
    Value reshape(Value a, std::vector<int> dims);

    // --- feature maps [C,H,W] ---
    Value conv1x1(Value x, Value w, Value b);            // w[Cout,Cin]
    Value conv3x3_valid(Value x, Value w, Value b);       // w[Cout,Cin,3,3]
    Value dwconv3x3_valid(Value x, Value w, Value b);     // w[C,3,3]
    Value pad_reflect(Value x, int top, int bottom, int left, int right);
    Value crop(Value x, int top, int left, int h, int w);
    Value layernorm_chan(Value x, Value gamma, Value beta, double eps = 1e-6);
    Value pixel_unshuffle2(Value x);
    Value pixel_shuffle2(Value x);
    Value concat_chan(Value a, Value b);
    Value chan_slice(Value x, int c0, int c1);
    Value chan_scale_shift(Value x, Value s, Value t);    // x*s[c] + t[c]
    Value chan_broadcast(Value v, int h, int w);          // v[C] -> [C,h,w]
    Value mul_spatial(Value x, Value m);                  // x[C,H,W] * m[1,H,W]
    Value bilinear_resize(Value x, int h, int w);

    // --- segment pooling (labels are constants, not differentiated) ---
    // means[s,c] of x over each label region; regions where every element
    // is bit-identical return that value exactly.
    Value segment_mean(Value x, const std::vector<int>& labels, int n_segments);
    Value segment_broadcast(Value means, const std::vector<int>& labels, int h, int w);

    // --- reductions ---
    Value mean_all(Value a);
    Value mean_abs_diff(Value a, Value b);
    Value mean_sq_diff(Value a, Value b);

    // Convenience: reflect-padded 3x3 convs (shape preserving).
    Value conv3x3(Value x, Value w, Value b) {
        return conv3x3_valid(pad_reflect(x, 1, 1, 1, 1), w, b);
    }
    Value dwconv3x3(Value x, Value w, Value b) {
        return dwconv3x3_valid(pad_reflect(x, 1, 1, 1, 1), w, b);
    }

    // Backpropagate from a size-1 root.
    void backward(Value root);

    const Tensor& value_of(int index) const { return nodes_[static_cast<std::size_t>(index)].value; }
    const Tensor& grad_of(int index) const;
    bool has_grad(int index) const { return !nodes_[static_cast<std::size_t>(index)].grad.empty(); }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Tape&, Node&)> backward;
    };

    Value push(Tensor value, bool needs_grad, std::function<void(Tape&, Node&)> back);
    bool wants_grad(Value v) const { return nodes_[static_cast<std::size_t>(v.index_)].needs_grad; }
    // Returns the zero-initialized gradient buffer of a node, or nullptr
    // if the node does not track gradients.
    Tensor* grad_buffer(int index);

    std::vector<Node> nodes_;
    static const Tensor empty_;
};

} // namespace clearair::ad
