// SPDX-License-Identifier: Apache-2.0
//
// Named parameters and the small layer vocabulary the model is built
// from. A LayerCtx binds parameters to leaves of one tape, so a parameter
// used twice in a forward pass accumulates both gradient contributions.

#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "clearair/autodiff.hpp"
#include "clearair/rng.hpp"
#include "clearair/tensor.hpp"

namespace clearair::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad; // accumulated by train steps; sized lazily
    Tensor m, v; // AdamW moments; sized lazily

    Parameter(std::string n, Tensor val) : name(std::move(n)), value(std::move(val)) {}

    void zero_grad() {
        if (grad.empty()) grad = Tensor(value.dims());
        grad.fill(0.0);
    }
    void ensure_moments() {
        if (m.empty()) m = Tensor(value.dims());
        if (v.empty()) v = Tensor(value.dims());
    }
};

class ParamStore {
public:
    Parameter* create(const std::string& name, Tensor init);
    Parameter* find(const std::string& name) const;
    std::size_t count() const { return owned_.size(); }

private:
    std::vector<std::unique_ptr<Parameter>> owned_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

// Weight init helpers.
Tensor trunc_normal_init(std::vector<int> dims, double stddev, Rng& rng);
Tensor zeros_init(std::vector<int> dims);
Tensor ones_init(std::vector<int> dims);

struct LayerCtx {
    ad::Tape& tape;
    bool track_grads = true;

    explicit LayerCtx(ad::Tape& t, bool grads = true) : tape(t), track_grads(grads) {}

    ad::Value use(Parameter* p) {
        auto it = cache_.find(p);
        if (it != cache_.end()) return it->second;
        ad::Value v = tape.leaf(p->value, track_grads);
        cache_.emplace(p, v);
        return v;
    }
    ad::Value constant(Tensor t) { return tape.leaf(std::move(t), false); }

    // After backward: writes accumulated leaf grads into parameter .grad.
    void export_grads();

private:
    std::unordered_map<Parameter*, ad::Value> cache_;
};

struct Linear {
    Parameter* w = nullptr; // [out, in]
    Parameter* b = nullptr; // [out], optional

    static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                         double stddev = 0.02, bool bias = true);
    static Linear create_with(ParamStore& store, const std::string& name, Tensor weight,
                              Tensor bias_or_empty);
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

struct Conv1x1 {
    Parameter* w = nullptr; // [Cout, Cin]
    Parameter* b = nullptr;

    static Conv1x1 create(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
                          double stddev = 0.02, bool bias = true);
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

struct Conv3x3 {
    Parameter* w = nullptr; // [Cout, Cin, 3, 3]
    Parameter* b = nullptr;

    static Conv3x3 create(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
                          double stddev = 0.02, bool bias = true);
    // Reflect-padded, shape preserving.
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

struct DwConv3x3 {
    Parameter* w = nullptr; // [C, 3, 3]
    Parameter* b = nullptr;

    static DwConv3x3 create(ParamStore& store, const std::string& name, int c, Rng& rng,
                            double stddev = 0.02, bool bias = true);
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

struct LayerNormChan {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;

    static LayerNormChan create(ParamStore& store, const std::string& name, int c);
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

// Two-layer MLP with GELU, hidden width = output width.
struct Mlp2 {
    Linear fc1, fc2;

    static Mlp2 create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                       double stddev = 0.02);
    ad::Value forward(LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<Parameter*>& out) const;
};

} // namespace clearair::nn
