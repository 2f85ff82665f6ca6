// SPDX-License-Identifier: Apache-2.0

#include "clearair/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "clearair/errors.hpp"

namespace clearair::backbone {

using ad::Tape;
using ad::Value;
using nn::LayerCtx;

void PipelineOrder::validate() const {
    std::set<PerceptionStage> seen(order.begin(), order.end());
    if (seen.size() != 3) {
        throw ValidationError("pipeline order must be a permutation of how,where,what");
    }
}

int stage_scale_exponent(const std::string& stage) {
    if (stage == "enc1" || stage == "dec1" || stage == "refine") return 0;
    if (stage == "enc2" || stage == "dec2") return 1;
    if (stage == "enc3" || stage == "dec3") return 2;
    if (stage == "latent") return 3;
    throw ValidationError("unknown injection stage '" + stage + "'");
}

PtbBlock PtbBlock::create(nn::ParamStore& store, const std::string& name, int channels, int heads,
                          Rng& rng) {
    if (channels % heads != 0) throw ShapeError("ptb: heads must divide channels");
    PtbBlock b;
    b.heads = heads;
    b.hidden = static_cast<int>(channels * 2.66);
    b.norm1 = nn::LayerNormChan::create(store, name + ".norm1", channels);
    b.qkv = nn::Conv1x1::create(store, name + ".qkv", channels, 3 * channels, rng);
    b.qkv_dw = nn::DwConv3x3::create(store, name + ".qkv_dw", 3 * channels, rng);
    b.temperature = store.create(name + ".temperature", nn::ones_init({heads}));
    b.attn_out = nn::Conv1x1::create(store, name + ".attn_out", channels, channels, rng);
    b.norm2 = nn::LayerNormChan::create(store, name + ".norm2", channels);
    b.ffn_in = nn::Conv1x1::create(store, name + ".ffn_in", channels, 2 * b.hidden, rng);
    b.ffn_dw = nn::DwConv3x3::create(store, name + ".ffn_dw", 2 * b.hidden, rng);
    b.ffn_out = nn::Conv1x1::create(store, name + ".ffn_out", b.hidden, channels, rng);
    return b;
}

Value PtbBlock::forward(LayerCtx& ctx, Value x) const {
    Tape& tape = ctx.tape;
    const int c = x.val().dim(0), h = x.val().dim(1), w = x.val().dim(2);
    const int dh = c / heads;

    // transposed channel attention
    Value y = norm1.forward(ctx, x);
    Value qkv_map = qkv_dw.forward(ctx, qkv.forward(ctx, y));
    Value q = tape.reshape(tape.chan_slice(qkv_map, 0, c), {c, h * w});
    Value k = tape.reshape(tape.chan_slice(qkv_map, c, 2 * c), {c, h * w});
    Value v = tape.reshape(tape.chan_slice(qkv_map, 2 * c, 3 * c), {c, h * w});
    Value temp = ctx.use(temperature);
    std::vector<Value> head_outs;
    for (int hd = 0; hd < heads; ++hd) {
        Value qh = tape.normalize_rows(tape.rows(q, hd * dh, (hd + 1) * dh));
        Value kh = tape.normalize_rows(tape.rows(k, hd * dh, (hd + 1) * dh));
        Value vh = tape.rows(v, hd * dh, (hd + 1) * dh);
        Value t_h = tape.reshape(tape.rows(tape.reshape(temp, {heads, 1}), hd, hd + 1), {1});
        Value logits = tape.mul_scalar_tensor(tape.matmul(qh, tape.transpose(kh)), t_h);
        Value attn = tape.softmax_rows(logits); // [dh, dh]
        head_outs.push_back(tape.matmul(attn, vh));
    }
    Value attn_mat = heads == 1 ? head_outs[0] : tape.concat_rows(head_outs);
    x = tape.add(x, attn_out.forward(ctx, tape.reshape(attn_mat, {c, h, w})));

    // gated feed-forward
    y = norm2.forward(ctx, x);
    Value f = ffn_dw.forward(ctx, ffn_in.forward(ctx, y));
    Value a = tape.chan_slice(f, 0, hidden);
    Value g = tape.chan_slice(f, hidden, 2 * hidden);
    return tape.add(x, ffn_out.forward(ctx, tape.mul(tape.gelu(a), g)));
}

void PtbBlock::collect(std::vector<nn::Parameter*>& out) const {
    norm1.collect(out);
    qkv.collect(out);
    qkv_dw.collect(out);
    out.push_back(temperature);
    attn_out.collect(out);
    norm2.collect(out);
    ffn_in.collect(out);
    ffn_dw.collect(out);
    ffn_out.collect(out);
}

std::unique_ptr<Model> Model::build(const ModelConfig& cfg) {
    cfg.validate();
    std::unique_ptr<Model> m(new Model());
    m->cfg_ = cfg;
    nn::ParamStore& store = m->store_;
    Rng rng(derive_seed(cfg.seed, "backbone"));

    const auto& ch = cfg.level_channels;
    const auto& heads = cfg.level_heads;
    const auto& depths = cfg.level_depths;

    m->embed_ = nn::Conv3x3::create(store, "embed", 3, ch[0], rng);
    for (int lvl = 0; lvl < 3; ++lvl) {
        std::vector<PtbBlock> blocks;
        for (int i = 0; i < depths[static_cast<std::size_t>(lvl)]; ++i) {
            blocks.push_back(PtbBlock::create(
                store, "enc" + std::to_string(lvl + 1) + ".block" + std::to_string(i),
                ch[static_cast<std::size_t>(lvl)], heads[static_cast<std::size_t>(lvl)], rng));
        }
        m->encoders_.push_back(std::move(blocks));
        // conv to C_next/4, then pixel-unshuffle doubles twice
        m->downs_.push_back(nn::Conv3x3::create(store, "down" + std::to_string(lvl + 1),
                                                ch[static_cast<std::size_t>(lvl)],
                                                ch[static_cast<std::size_t>(lvl) + 1] / 4, rng,
                                                0.02, false));
    }
    for (int i = 0; i < depths[3]; ++i) {
        m->latent_.push_back(PtbBlock::create(store, "latent.block" + std::to_string(i), ch[3],
                                              heads[3], rng));
    }
    // decoder: latent -> level3 -> level2 -> level1
    const int up_src[3] = {ch[3], ch[2], ch[1]};
    const int up_dst[3] = {ch[2], ch[1], ch[0]};
    for (int i = 0; i < 3; ++i) {
        m->ups_.push_back(nn::Conv3x3::create(store, "up" + std::to_string(3 - i), up_src[i],
                                              4 * up_dst[i], rng, 0.02, false));
    }
    m->reduces_.push_back(nn::Conv1x1::create(store, "reduce3", 2 * ch[2], ch[2], rng, 0.02, false));
    m->reduces_.push_back(nn::Conv1x1::create(store, "reduce2", 2 * ch[1], ch[1], rng, 0.02, false));
    const int dec_ch[3] = {ch[2], ch[1], 2 * ch[0]};
    const int dec_heads[3] = {heads[2], heads[1], heads[0]};
    const int dec_depth[3] = {depths[2], depths[1], depths[0]};
    for (int i = 0; i < 3; ++i) {
        std::vector<PtbBlock> blocks;
        for (int b = 0; b < dec_depth[i]; ++b) {
            blocks.push_back(PtbBlock::create(
                store, "dec" + std::to_string(3 - i) + ".block" + std::to_string(b), dec_ch[i],
                dec_heads[i], rng));
        }
        m->decoders_.push_back(std::move(blocks));
    }
    for (int i = 0; i < cfg.refinement_blocks; ++i) {
        m->refinement_.push_back(
            PtbBlock::create(store, "refine.block" + std::to_string(i), 2 * ch[0], heads[0], rng));
    }
    m->head_ = nn::Conv3x3::create(store, "head", 2 * ch[0], 3, rng);
    // zero-initialized head: the freshly built model is the identity
    m->head_.w->value.fill(0.0);
    m->head_.b->value.fill(0.0);

    m->bind_plan(cfg.injection_plan);
    return m;
}

int Model::stage_channels(const std::string& stage) const {
    const auto& ch = cfg_.level_channels;
    if (stage == "enc1") return ch[0];
    if (stage == "enc2") return ch[1];
    if (stage == "enc3") return ch[2];
    if (stage == "latent") return ch[3];
    if (stage == "dec3") return ch[2];
    if (stage == "dec2") return ch[1];
    if (stage == "dec1" || stage == "refine") return 2 * ch[0];
    throw ValidationError("unknown injection stage '" + stage + "'");
}

Model::Bound& Model::ensure_block(const std::string& stage, InjectionModule module) {
    Bound& bound = bindings_[stage];
    bound.module = module;
    bound.qgm = nullptr;
    bound.sca = nullptr;
    bound.sem_free = nullptr;
    bound.dam = nullptr;
    if (module == InjectionModule::none) return bound;

    const int c = stage_channels(stage);
    const std::string tag = to_string(module) + "@" + stage;
    Rng rng(derive_seed(cfg_.seed, tag));
    switch (module) {
        case InjectionModule::qgm: {
            auto it = qgm_cache_.find(stage);
            if (it == qgm_cache_.end()) {
                it = qgm_cache_
                         .emplace(stage, modulation::QgmBlock::create(
                                             store_, "guidance.qgm." + stage,
                                             cfg_.embed_dims.quality, c, rng))
                         .first;
            }
            bound.qgm = &it->second;
            if (cfg_.use_iqa) {
                if (!adapter_) {
                    adapter_ = modulation::QualityAdapter::create(store_, "guidance.adapter",
                                                                  cfg_.embed_dims.quality);
                }
            } else if (!fq_free_) {
                Rng frng(derive_seed(cfg_.seed, "fq_free"));
                fq_free_ = store_.create("guidance.fq_free",
                                         nn::trunc_normal_init({cfg_.embed_dims.quality}, 0.02, frng));
            }
            break;
        }
        case InjectionModule::sca: {
            auto it = sca_cache_.find(stage);
            if (it == sca_cache_.end()) {
                const int lvl_heads = cfg_.level_heads[static_cast<std::size_t>(
                    std::min(stage_scale_exponent(stage), 3))];
                it = sca_cache_
                         .emplace(stage, modulation::ScaBlock::create(
                                             store_, "guidance.sca." + stage, c, lvl_heads, rng))
                         .first;
            }
            bound.sca = &it->second;
            if (!cfg_.use_sgu) {
                auto sit = sem_free_cache_.find(stage);
                if (sit == sem_free_cache_.end()) {
                    sit = sem_free_cache_
                              .emplace(stage, store_.create("guidance.sem_free." + stage,
                                                            nn::trunc_normal_init({c}, 0.02, rng)))
                              .first;
                }
                bound.sem_free = sit->second;
            }
            break;
        }
        case InjectionModule::dam: {
            auto it = dam_cache_.find(stage);
            if (it == dam_cache_.end()) {
                it = dam_cache_
                         .emplace(stage, modulation::DamBlock::create(
                                             store_, "guidance.dam." + stage, c,
                                             cfg_.embed_dims.prompt, cfg_.mask_base,
                                             cfg_.dam_content_as_query, rng))
                         .first;
            }
            bound.dam = &it->second;
            if (cfg_.use_ti) {
                if (!prompt_) {
                    Rng prng(derive_seed(cfg_.seed, "prompt"));
                    prompt_ = modulation::PromptModule::create(store_, "guidance.prompt",
                                                               cfg_.prompt_count,
                                                               cfg_.embed_dims.prompt, prng);
                }
            } else {
                if (!fp_free_) {
                    Rng frng(derive_seed(cfg_.seed, "fp_free"));
                    fp_free_ = store_.create(
                        "guidance.fp_free",
                        nn::trunc_normal_init({cfg_.embed_dims.prompt}, 0.02, frng));
                }
                if (!fc_free_) {
                    Rng frng(derive_seed(cfg_.seed, "fc_free"));
                    fc_free_ = store_.create("guidance.fc_free",
                                             nn::trunc_normal_init({512}, 0.02, frng));
                }
            }
            break;
        }
        case InjectionModule::none: break;
    }
    return bound;
}

void Model::bind_plan(const std::map<std::string, InjectionModule>& plan) {
    bindings_.clear();
    for (const auto& [stage, module] : plan) {
        ensure_block(stage, module);
    }
    cfg_.injection_plan = plan;
}

void Model::set_perception_order(const PipelineOrder& order) {
    order.validate();
    auto family = [](PerceptionStage s) {
        switch (s) {
            case PerceptionStage::how: return InjectionModule::qgm;
            case PerceptionStage::where: return InjectionModule::sca;
            case PerceptionStage::what: return InjectionModule::dam;
        }
        return InjectionModule::none;
    };
    // Canonical depth slots: early = enc1, mid = latent, late = dec3+dec2.
    std::map<std::string, InjectionModule> plan;
    plan["enc1"] = family(order.order[0]);
    plan["latent"] = family(order.order[1]);
    plan["dec3"] = family(order.order[2]);
    plan["dec2"] = family(order.order[2]);
    bind_plan(plan);
    cfg_.perception_order = order.order;
}

std::vector<nn::Parameter*> Model::parameters() const {
    std::vector<nn::Parameter*> out;
    embed_.collect(out);
    for (const auto& level : encoders_) {
        for (const auto& b : level) b.collect(out);
    }
    for (const auto& d : downs_) d.collect(out);
    for (const auto& b : latent_) b.collect(out);
    for (const auto& u : ups_) u.collect(out);
    for (const auto& r : reduces_) r.collect(out);
    for (const auto& level : decoders_) {
        for (const auto& b : level) b.collect(out);
    }
    for (const auto& b : refinement_) b.collect(out);
    head_.collect(out);

    bool any_qgm = false, any_dam = false;
    for (const std::string& stage : injection_stage_names()) {
        auto it = bindings_.find(stage);
        if (it == bindings_.end()) continue;
        const Bound& b = it->second;
        if (b.qgm) {
            b.qgm->collect(out);
            any_qgm = true;
        }
        if (b.sca) b.sca->collect(out);
        if (b.sem_free) out.push_back(b.sem_free);
        if (b.dam) {
            b.dam->collect(out);
            any_dam = true;
        }
    }
    if (any_qgm) {
        if (cfg_.use_iqa) {
            adapter_->collect(out);
        } else {
            out.push_back(fq_free_);
        }
    }
    if (any_dam) {
        if (cfg_.use_ti) {
            prompt_->collect(out);
        } else {
            out.push_back(fp_free_);
            out.push_back(fc_free_);
        }
    }
    return out;
}

std::int64_t Model::parameter_count() const {
    std::int64_t n = 0;
    for (const nn::Parameter* p : parameters()) n += p->value.size();
    return n;
}

Value Model::apply_injection(LayerCtx& ctx, const std::string& stage, Value x,
                             const std::optional<Value>& f_q, const std::optional<Value>& f_c,
                             const std::optional<Value>& f_p,
                             const std::map<int, guidance::LabelMap>& labels_by_scale) const {
    auto it = bindings_.find(stage);
    if (it == bindings_.end() || it->second.module == InjectionModule::none) return x;
    const Bound& b = it->second;
    Tape& tape = ctx.tape;
    switch (b.module) {
        case InjectionModule::qgm: {
            if (!f_q) throw GuidanceError("missing quality embedding for injection stage '" +
                                          stage + "'");
            return b.qgm->forward(ctx, x, *f_q);
        }
        case InjectionModule::sca: {
            Value means;
            std::vector<std::int64_t> counts;
            if (b.sem_free) {
                // semantic prior ablated: one learnable region mean
                means = tape.reshape(ctx.use(b.sem_free), {1, x.val().dim(0)});
                counts.assign(1, static_cast<std::int64_t>(x.val().dim(1)) * x.val().dim(2));
            } else {
                auto lit = labels_by_scale.find(stage_scale_exponent(stage));
                if (lit == labels_by_scale.end()) {
                    throw GuidanceError("missing semantic masks for injection stage '" + stage +
                                        "'");
                }
                const guidance::LabelMap& lm = lit->second;
                means = tape.segment_mean(x, lm.labels, lm.n_segments);
                counts.assign(static_cast<std::size_t>(lm.n_segments), 0);
                for (int l : lm.labels) ++counts[static_cast<std::size_t>(l)];
            }
            modulation::ScaResult res = b.sca->forward_segments(ctx, x, means, counts);
            return tape.add(x, res.out);
        }
        case InjectionModule::dam: {
            if (!f_c || !f_p) {
                throw GuidanceError("missing content/degradation embeddings for injection stage '" +
                                    stage + "'");
            }
            modulation::DamResult res = b.dam->forward(ctx, x, *f_c, *f_p);
            return tape.add(x, res.out);
        }
        case InjectionModule::none: break;
    }
    return x;
}

Value Model::forward(LayerCtx& ctx, const ImageTensor& img,
                     const guidance::GuidanceBundle& bundle) const {
    Tape& tape = ctx.tape;
    const int h = img.height(), w = img.width();
    if (h < 16 || w < 16) throw ShapeError("forward: input must be at least 16x16");

    // Which guidance signals does the current binding need?
    bool needs_quality = false, needs_masks = false, needs_clip = false;
    for (const auto& [stage, bound] : bindings_) {
        if (bound.module == InjectionModule::qgm && cfg_.use_iqa) needs_quality = true;
        if (bound.module == InjectionModule::sca && cfg_.use_sgu) needs_masks = true;
        if (bound.module == InjectionModule::dam && cfg_.use_ti) needs_clip = true;
        if (bound.module == InjectionModule::qgm && !bundle.quality && cfg_.use_iqa) {
            throw GuidanceError("missing quality embedding for injection stage '" + stage + "'");
        }
        if (bound.module == InjectionModule::sca && !bundle.masks && cfg_.use_sgu) {
            throw GuidanceError("missing semantic masks for injection stage '" + stage + "'");
        }
        if (bound.module == InjectionModule::dam && !bundle.clip && cfg_.use_ti) {
            throw GuidanceError("missing content/degradation embeddings for injection stage '" +
                                stage + "'");
        }
    }

    const int pad_h = (8 - h % 8) % 8;
    const int pad_w = (8 - w % 8) % 8;
    const int hp = h + pad_h, wp = w + pad_w;

    Value x0 = tape.leaf(img.tensor(), false);
    if (pad_h || pad_w) x0 = tape.pad_reflect(x0, 0, pad_h, 0, pad_w);

    // Guidance signals shared across injection sites.
    std::optional<Value> f_q, f_c, f_p;
    bool any_qgm = false, any_dam = false;
    for (const auto& [stage, bound] : bindings_) {
        any_qgm = any_qgm || bound.module == InjectionModule::qgm;
        any_dam = any_dam || bound.module == InjectionModule::dam;
    }
    if (any_qgm) {
        if (cfg_.use_iqa) {
            bundle.quality->validate(cfg_.embed_dims.quality);
            f_q = adapter_->forward(ctx, tape.leaf(bundle.quality->q, false));
        } else {
            f_q = ctx.use(fq_free_);
        }
    }
    if (any_dam) {
        if (cfg_.use_ti) {
            bundle.clip->validate();
            f_c = tape.leaf(bundle.clip->content, false);
            f_p = prompt_->forward(ctx, tape.leaf(bundle.clip->degradation, false)).prompt;
        } else {
            f_c = ctx.use(fc_free_);
            f_p = ctx.use(fp_free_);
        }
    }

    // Per-scale label maps from the (padded) semantic partition.
    std::map<int, guidance::LabelMap> labels_by_scale;
    if (needs_masks) {
        if (bundle.masks->height != h || bundle.masks->width != w) {
            throw ShapeError("guidance masks must match the input resolution");
        }
        guidance::LabelMap full = guidance::resolve_partition(*bundle.masks);
        full = guidance::pad_labels(full, hp, wp);
        for (const auto& [stage, bound] : bindings_) {
            if (bound.module != InjectionModule::sca || bound.sem_free) continue;
            const int scale = stage_scale_exponent(stage);
            if (!labels_by_scale.count(scale)) {
                labels_by_scale.emplace(
                    scale, guidance::downsample_labels(full, hp >> scale, wp >> scale));
            }
        }
    }

    // encoder
    Value x = embed_.forward(ctx, x0);
    std::vector<Value> skips;
    for (int lvl = 0; lvl < 3; ++lvl) {
        for (const PtbBlock& b : encoders_[static_cast<std::size_t>(lvl)]) x = b.forward(ctx, x);
        x = apply_injection(ctx, "enc" + std::to_string(lvl + 1), x, f_q, f_c, f_p,
                            labels_by_scale);
        skips.push_back(x);
        x = tape.pixel_unshuffle2(downs_[static_cast<std::size_t>(lvl)].forward(ctx, x));
    }
    for (const PtbBlock& b : latent_) x = b.forward(ctx, x);
    x = apply_injection(ctx, "latent", x, f_q, f_c, f_p, labels_by_scale);

    // decoder
    for (int i = 0; i < 3; ++i) {
        x = tape.pixel_shuffle2(ups_[static_cast<std::size_t>(i)].forward(ctx, x));
        x = tape.concat_chan(x, skips[static_cast<std::size_t>(2 - i)]);
        if (i < 2) x = reduces_[static_cast<std::size_t>(i)].forward(ctx, x);
        for (const PtbBlock& b : decoders_[static_cast<std::size_t>(i)]) x = b.forward(ctx, x);
        x = apply_injection(ctx, "dec" + std::to_string(3 - i), x, f_q, f_c, f_p, labels_by_scale);
    }
    for (const PtbBlock& b : refinement_) x = b.forward(ctx, x);
    x = apply_injection(ctx, "refine", x, f_q, f_c, f_p, labels_by_scale);

    Value out = tape.clamp01(tape.add(x0, head_.forward(ctx, x)));
    if (pad_h || pad_w) out = tape.crop(out, 0, 0, h, w);
    return out;
}

ImageTensor Model::restore(const ImageTensor& img, const guidance::GuidanceBundle& bundle) const {
    Tape tape;
    LayerCtx ctx{tape, false};
    Value out = forward(ctx, img, bundle);
    return ImageTensor(out.val());
}

} // namespace clearair::backbone
