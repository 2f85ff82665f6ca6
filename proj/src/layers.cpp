// SPDX-License-Identifier: Apache-2.0

#include "clearair/layers.hpp"

#include "clearair/errors.hpp"

namespace clearair::nn {

Parameter* ParamStore::create(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw Error("duplicate parameter name: " + name);
    owned_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    Parameter* p = owned_.back().get();
    by_name_[name] = p;
    return p;
}

Parameter* ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

Tensor trunc_normal_init(std::vector<int> dims, double stddev, Rng& rng) {
    Tensor t(std::move(dims));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.truncated_normal(stddev);
    return t;
}

Tensor zeros_init(std::vector<int> dims) {
    return Tensor(std::move(dims));
}

Tensor ones_init(std::vector<int> dims) {
    return Tensor::full(std::move(dims), 1.0);
}

void LayerCtx::export_grads() {
    for (auto& [param, value] : cache_) {
        if (!tape.has_grad(value.index())) continue;
        const Tensor& g = value.grad();
        Parameter* p = const_cast<Parameter*>(param);
        if (p->grad.empty()) p->grad = Tensor(p->value.dims());
        for (std::int64_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                      double stddev, bool bias) {
    Linear l;
    l.w = store.create(name + ".w", trunc_normal_init({out, in}, stddev, rng));
    if (bias) l.b = store.create(name + ".b", zeros_init({out}));
    return l;
}

Linear Linear::create_with(ParamStore& store, const std::string& name, Tensor weight,
                           Tensor bias_or_empty) {
    Linear l;
    l.w = store.create(name + ".w", std::move(weight));
    if (!bias_or_empty.empty()) l.b = store.create(name + ".b", std::move(bias_or_empty));
    return l;
}

ad::Value Linear::forward(LayerCtx& ctx, ad::Value x) const {
    return ctx.tape.linear_vec(x, ctx.use(w), b ? ctx.use(b) : ad::Value{});
}

void Linear::collect(std::vector<Parameter*>& out) const {
    out.push_back(w);
    if (b) out.push_back(b);
}

Conv1x1 Conv1x1::create(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
                        double stddev, bool bias) {
    Conv1x1 c;
    c.w = store.create(name + ".w", trunc_normal_init({cout, cin}, stddev, rng));
    if (bias) c.b = store.create(name + ".b", zeros_init({cout}));
    return c;
}

ad::Value Conv1x1::forward(LayerCtx& ctx, ad::Value x) const {
    return ctx.tape.conv1x1(x, ctx.use(w), b ? ctx.use(b) : ad::Value{});
}

void Conv1x1::collect(std::vector<Parameter*>& out) const {
    out.push_back(w);
    if (b) out.push_back(b);
}

Conv3x3 Conv3x3::create(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
                        double stddev, bool bias) {
    Conv3x3 c;
    c.w = store.create(name + ".w", trunc_normal_init({cout, cin, 3, 3}, stddev, rng));
    if (bias) c.b = store.create(name + ".b", zeros_init({cout}));
    return c;
}

ad::Value Conv3x3::forward(LayerCtx& ctx, ad::Value x) const {
    return ctx.tape.conv3x3(x, ctx.use(w), b ? ctx.use(b) : ad::Value{});
}

void Conv3x3::collect(std::vector<Parameter*>& out) const {
    out.push_back(w);
    if (b) out.push_back(b);
}

DwConv3x3 DwConv3x3::create(ParamStore& store, const std::string& name, int c, Rng& rng,
                            double stddev, bool bias) {
    DwConv3x3 d;
    d.w = store.create(name + ".w", trunc_normal_init({c, 3, 3}, stddev, rng));
    if (bias) d.b = store.create(name + ".b", zeros_init({c}));
    return d;
}

ad::Value DwConv3x3::forward(LayerCtx& ctx, ad::Value x) const {
    return ctx.tape.dwconv3x3(x, ctx.use(w), b ? ctx.use(b) : ad::Value{});
}

void DwConv3x3::collect(std::vector<Parameter*>& out) const {
    out.push_back(w);
    if (b) out.push_back(b);
}

LayerNormChan LayerNormChan::create(ParamStore& store, const std::string& name, int c) {
    LayerNormChan n;
    n.gamma = store.create(name + ".gamma", ones_init({c}));
    n.beta = store.create(name + ".beta", zeros_init({c}));
    return n;
}

ad::Value LayerNormChan::forward(LayerCtx& ctx, ad::Value x) const {
    return ctx.tape.layernorm_chan(x, ctx.use(gamma), ctx.use(beta));
}

void LayerNormChan::collect(std::vector<Parameter*>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
}

Mlp2 Mlp2::create(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                  double stddev) {
    Mlp2 m;
    m.fc1 = Linear::create(store, name + ".fc1", in, out, rng, stddev);
    m.fc2 = Linear::create(store, name + ".fc2", out, out, rng, stddev);
    return m;
}

ad::Value Mlp2::forward(LayerCtx& ctx, ad::Value x) const {
    return fc2.forward(ctx, ctx.tape.gelu(fc1.forward(ctx, x)));
}

void Mlp2::collect(std::vector<Parameter*>& out) const {
    fc1.collect(out);
    fc2.collect(out);
}

} // namespace clearair::nn
