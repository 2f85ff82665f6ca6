// SPDX-License-Identifier: Apache-2.0

#include "clearair/modulation.hpp"

#include <cmath>

#include "clearair/errors.hpp"

namespace clearair::modulation {

using ad::Tape;
using ad::Value;
using nn::LayerCtx;
using nn::ParamStore;

QualityAdapter QualityAdapter::create(ParamStore& store, const std::string& name, int d_q) {
    QualityAdapter a;
    Tensor eye({d_q, d_q});
    for (int i = 0; i < d_q; ++i) eye.at(i, i) = 1.0;
    a.map = nn::Linear::create_with(store, name, std::move(eye), nn::zeros_init({d_q}));
    return a;
}

Value QualityAdapter::forward(LayerCtx& ctx, Value q) const {
    return map.forward(ctx, q);
}

void QualityAdapter::collect(std::vector<nn::Parameter*>& out) const {
    map.collect(out);
}

QgmBlock QgmBlock::create(ParamStore& store, const std::string& name, int d_fq, int channels,
                          Rng& rng) {
    QgmBlock b;
    b.scale = nn::Linear::create_with(store, name + ".scale",
                                      nn::trunc_normal_init({channels, d_fq}, 0.02, rng),
                                      nn::ones_init({channels}));
    b.shift = nn::Linear::create_with(store, name + ".shift", nn::zeros_init({channels, d_fq}),
                                      nn::zeros_init({channels}));
    return b;
}

Value QgmBlock::forward(LayerCtx& ctx, Value x, Value f_q) const {
    if (x.val().ndim() != 3) throw ShapeError("qgm_forward: input must be [C,H,W]");
    if (scale.w->value.dim(0) != x.val().dim(0)) {
        throw ShapeError("qgm_forward: projection channels do not match input");
    }
    Value s = scale.forward(ctx, f_q);
    Value t = shift.forward(ctx, f_q);
    return ctx.tape.chan_scale_shift(x, s, t);
}

void QgmBlock::collect(std::vector<nn::Parameter*>& out) const {
    scale.collect(out);
    shift.collect(out);
}

Tensor mask_average_pool(const Tensor& f_s, const guidance::SemanticMaskSet& ms) {
    if (f_s.ndim() != 3) throw ShapeError("mask_average_pool: features must be [C,H,W]");
    if (ms.height != f_s.dim(1) || ms.width != f_s.dim(2)) {
        throw ShapeError("mask_average_pool: mask resolution does not match features");
    }
    ms.validate();
    if (!guidance::is_strict_partition(ms)) {
        throw ValidationError("mask_average_pool: mask set must be a strict partition");
    }
    guidance::LabelMap lm;
    lm.height = ms.height;
    lm.width = ms.width;
    lm.n_segments = ms.count();
    lm.labels.assign(static_cast<std::size_t>(ms.height) * ms.width, 0);
    for (int m = 0; m < ms.count(); ++m) {
        const auto& mask = ms.masks[static_cast<std::size_t>(m)];
        for (std::size_t p = 0; p < mask.size(); ++p) {
            if (mask[p]) lm.labels[p] = m;
        }
    }
    Tape tape;
    Value x = tape.leaf(f_s, false);
    return mask_average_pool(tape, x, lm).val();
}

Value mask_average_pool(Tape& tape, Value f_s, const guidance::LabelMap& lm) {
    const Tensor& t = f_s.val();
    if (t.ndim() != 3) throw ShapeError("mask_average_pool: features must be [C,H,W]");
    if (lm.height != t.dim(1) || lm.width != t.dim(2)) {
        throw ShapeError("mask_average_pool: label map resolution does not match features");
    }
    Value means = tape.segment_mean(f_s, lm.labels, lm.n_segments);
    return tape.segment_broadcast(means, lm.labels, lm.height, lm.width);
}

ScaBlock ScaBlock::create(ParamStore& store, const std::string& name, int channels, int heads,
                          Rng& rng) {
    if (channels % heads != 0) throw ShapeError("sca: heads must divide channels");
    ScaBlock b;
    b.w_k = nn::Conv1x1::create(store, name + ".w_k", channels, channels, rng, 0.02, false);
    b.w_v = nn::Conv1x1::create(store, name + ".w_v", channels, channels, rng, 0.02, false);
    b.heads = heads;
    return b;
}

namespace {

// Shared attention core over per-head key/value matrices shaped [d_h, n].
ScaResult sca_attention(LayerCtx& ctx, Value f_in, Value k_mat, Value v_mat, int heads,
                        const std::vector<std::int64_t>* counts) {
    Tape& tape = ctx.tape;
    const Tensor& x = f_in.val();
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int dh = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Value q_mat = tape.reshape(f_in, {c, h * w});

    Value log_counts;
    if (counts) {
        Tensor lc({static_cast<int>(counts->size())});
        for (std::size_t i = 0; i < counts->size(); ++i) {
            lc[static_cast<std::int64_t>(i)] = std::log(static_cast<double>((*counts)[i]));
        }
        log_counts = tape.leaf(std::move(lc), false);
    }

    ScaResult res;
    std::vector<Value> head_outs;
    for (int hd = 0; hd < heads; ++hd) {
        Value qh = tape.transpose(tape.rows(q_mat, hd * dh, (hd + 1) * dh)); // [HW, dh]
        Value kh = tape.rows(k_mat, hd * dh, (hd + 1) * dh);                 // [dh, n]
        Value vh = tape.rows(v_mat, hd * dh, (hd + 1) * dh);                 // [dh, n]
        Value logits = tape.scale(tape.matmul(qh, kh), scale);               // [HW, n]
        if (counts) logits = tape.add_row_vector(logits, log_counts);
        Value probs = tape.softmax_rows(logits);
        res.head_probs.push_back(probs);
        Value out_h = tape.matmul(probs, tape.transpose(vh)); // [HW, dh]
        head_outs.push_back(tape.transpose(out_h));           // [dh, HW]
    }
    Value out_mat = heads == 1 ? head_outs[0] : tape.concat_rows(head_outs);
    res.out = tape.reshape(out_mat, {c, h, w});
    return res;
}

} // namespace

ScaResult ScaBlock::forward_dense(LayerCtx& ctx, Value f_in, Value f_sem) const {
    const Tensor& x = f_in.val();
    const Tensor& s = f_sem.val();
    if (x.ndim() != 3 || s.ndim() != 3) throw ShapeError("sca_forward: inputs must be [C,H,W]");
    if (x.dim(0) != s.dim(0)) throw ShapeError("sca_forward: channel mismatch");
    if (x.dim(1) != s.dim(1) || x.dim(2) != s.dim(2)) {
        throw ShapeError("sca_forward: spatial mismatch");
    }
    Tape& tape = ctx.tape;
    Value k_map = w_k.forward(ctx, f_sem);
    Value v_map = w_v.forward(ctx, f_sem);
    const int c = x.dim(0);
    const int n = x.dim(1) * x.dim(2);
    Value k_mat = tape.reshape(k_map, {c, n});
    Value v_mat = tape.reshape(v_map, {c, n});
    return sca_attention(ctx, f_in, k_mat, v_mat, heads, nullptr);
}

ScaResult ScaBlock::forward_segments(LayerCtx& ctx, Value f_in, Value seg_means,
                                     const std::vector<std::int64_t>& counts) const {
    const Tensor& means = seg_means.val();
    if (means.ndim() != 2 || means.dim(1) != f_in.val().dim(0)) {
        throw ShapeError("sca_forward: segment means must be [S,C]");
    }
    if (static_cast<int>(counts.size()) != means.dim(0)) {
        throw ShapeError("sca_forward: counts must match segments");
    }
    Tape& tape = ctx.tape;
    // K = W_k f_bar, V = W_v f_bar for each segment mean; [C,S] layout.
    Value k_mat = tape.matmul(ctx.use(w_k.w), tape.transpose(seg_means));
    Value v_mat = tape.matmul(ctx.use(w_v.w), tape.transpose(seg_means));
    return sca_attention(ctx, f_in, k_mat, v_mat, heads, &counts);
}

void ScaBlock::collect(std::vector<nn::Parameter*>& out) const {
    w_k.collect(out);
    w_v.collect(out);
}

PromptModule PromptModule::create(ParamStore& store, const std::string& name, int n_prompts,
                                  int d_p, Rng& rng) {
    PromptModule m;
    m.bank = store.create(name + ".bank", nn::trunc_normal_init({n_prompts, d_p}, 0.02, rng));
    m.gate = nn::Mlp2::create(store, name + ".gate", 512, n_prompts, rng);
    m.out = nn::Mlp2::create(store, name + ".out", d_p, d_p, rng);
    return m;
}

PromptResult PromptModule::forward(LayerCtx& ctx, Value f_d) const {
    if (f_d.val().ndim() != 1 || f_d.val().dim(0) != 512) {
        throw ShapeError("degradation_prompt: F_d must have length 512");
    }
    Tape& tape = ctx.tape;
    const int n_p = bank->value.dim(0);
    const int d_p = bank->value.dim(1);
    Value logits = gate.forward(ctx, f_d);                       // [N_p]
    Value weights = tape.softmax_rows(tape.reshape(logits, {1, n_p}));
    Value mixed = tape.reshape(tape.matmul(weights, ctx.use(bank)), {d_p});
    PromptResult res;
    res.weights = weights;
    res.prompt = out.forward(ctx, mixed);
    return res;
}

void PromptModule::collect(std::vector<nn::Parameter*>& out_params) const {
    out_params.push_back(bank);
    gate.collect(out_params);
    out.collect(out_params);
}

DamBlock DamBlock::create(ParamStore& store, const std::string& name, int channels, int d_p,
                          int base, bool content_as_query, Rng& rng) {
    DamBlock b;
    b.norm = nn::LayerNormChan::create(store, name + ".norm", channels);
    b.proj = nn::Conv1x1::create(store, name + ".proj", channels, channels, rng);
    if (content_as_query) {
        b.query_k = nn::Linear::create(store, name + ".query_k", channels, 512, rng, 0.02, false);
        b.query_v = nn::Conv1x1::create(store, name + ".query_v", channels, channels, rng);
    } else {
        b.content_v = nn::Linear::create(store, name + ".content_v", 512, channels, rng);
    }
    b.mask_mlp = nn::Mlp2::create(store, name + ".mask", d_p, base * base, rng);
    b.fuse = nn::Conv1x1::create(store, name + ".fuse", 2 * channels, channels, rng, 0.02, false);
    b.base_h = base;
    b.base_w = base;
    b.content_as_query = content_as_query;
    return b;
}

DamResult DamBlock::forward(LayerCtx& ctx, Value x, Value f_c, Value f_p) const {
    const Tensor& xt = x.val();
    if (xt.ndim() != 3) throw ShapeError("dam_forward: input must be [C,H,W]");
    if (f_c.val().ndim() != 1 || f_c.val().dim(0) != 512) {
        throw ShapeError("dam_forward: F_c must have length 512");
    }
    Tape& tape = ctx.tape;
    const int c = xt.dim(0), h = xt.dim(1), w = xt.dim(2);

    Value x_hat = proj.forward(ctx, norm.forward(ctx, x));

    Value x_att;
    if (!content_as_query) {
        // One key/value token: attention weights are identically 1, so the
        // block broadcasts the projected content vector.
        x_att = tape.chan_broadcast(content_v.forward(ctx, f_c), h, w);
    } else {
        // F_c queries the spatial positions of x_hat.
        Value x_mat = tape.reshape(x_hat, {c, h * w});
        Value keys = tape.matmul(ctx.use(query_k.w), x_mat); // [512, HW]
        Value logits =
            tape.scale(tape.matmul(tape.reshape(f_c, {1, 512}), keys), 1.0 / std::sqrt(512.0));
        Value probs = tape.softmax_rows(logits); // [1, HW]
        Value values = tape.reshape(query_v.forward(ctx, x_hat), {c, h * w});
        Value pooled = tape.reshape(tape.matmul(probs, tape.transpose(values)), {c});
        x_att = tape.chan_broadcast(pooled, h, w);
    }

    Value mask_logits = mask_mlp.forward(ctx, f_p);
    Value m_d = tape.sigmoid(
        tape.bilinear_resize(tape.reshape(mask_logits, {1, base_h, base_w}), h, w));
    Value f_m = tape.mul_spatial(x_hat, m_d);

    DamResult res;
    res.degradation_mask = m_d;
    res.out = fuse.forward(ctx, tape.concat_chan(x_att, f_m));
    return res;
}

void DamBlock::collect(std::vector<nn::Parameter*>& out) const {
    norm.collect(out);
    proj.collect(out);
    if (content_as_query) {
        query_k.collect(out);
        query_v.collect(out);
    } else {
        content_v.collect(out);
    }
    mask_mlp.collect(out);
    fuse.collect(out);
}

} // namespace clearair::modulation
