// SPDX-License-Identifier: Apache-2.0
//
// Guidance blocks: quality-guided per-channel modulation, mask average
// pooling with semantic cross-attention, and the degradation-aware block
// driven by a learnable prompt bank. All blocks are pure given their
// parameters and differentiable end to end.

#pragma once

#include <cstdint>
#include <vector>

#include "clearair/guidance.hpp"
#include "clearair/layers.hpp"

namespace clearair::modulation {

// Affine adapter applied to the raw quality embedding. Identity at init,
// so the stub's statistics pass through unchanged until trained.
struct QualityAdapter {
    nn::Linear map; // square [D_q, D_q]

    static QualityAdapter create(nn::ParamStore& store, const std::string& name, int d_q);
    ad::Value forward(nn::LayerCtx& ctx, ad::Value q) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

// X_out = X_in * scale(F_q) + shift(F_q), both projections broadcast per
// channel. Scale starts at one (weight ~N, bias 1), shift starts at zero.
struct QgmBlock {
    nn::Linear scale; // [C, D_fq]
    nn::Linear shift; // [C, D_fq]

    static QgmBlock create(nn::ParamStore& store, const std::string& name, int d_fq, int channels,
                           Rng& rng);
    ad::Value forward(nn::LayerCtx& ctx, ad::Value x, ad::Value f_q) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

// Mask average pooling: every pixel receives its region's mean feature.
// The mask set must be a strict partition at the feature resolution.
Tensor mask_average_pool(const Tensor& f_s, const guidance::SemanticMaskSet& ms);
ad::Value mask_average_pool(ad::Tape& tape, ad::Value f_s, const guidance::LabelMap& lm);

struct ScaResult {
    ad::Value out;
    std::vector<ad::Value> head_probs; // one [n_q, n_k] matrix per head
};

// Semantic cross-attention. Queries are the input features themselves
// (no query projection); keys/values are 1x1 projections of the pooled
// semantic map. The segment path is algebraically identical to dense
// attention when F_sem is constant on each segment, at S keys instead of
// H*W.
struct ScaBlock {
    nn::Conv1x1 w_k; // bias-free
    nn::Conv1x1 w_v; // bias-free
    int heads = 1;

    static ScaBlock create(nn::ParamStore& store, const std::string& name, int channels, int heads,
                           Rng& rng);
    ScaResult forward_dense(nn::LayerCtx& ctx, ad::Value f_in, ad::Value f_sem) const;
    ScaResult forward_segments(nn::LayerCtx& ctx, ad::Value f_in, ad::Value seg_means,
                               const std::vector<std::int64_t>& counts) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

struct PromptResult {
    ad::Value prompt;  // [D_p]
    ad::Value weights; // [1, N_p] softmax row
};

// Degradation prompt: softmax-gated mixture of a learnable prompt bank,
// followed by a second MLP.
struct PromptModule {
    nn::Parameter* bank = nullptr; // [N_p, D_p]
    nn::Mlp2 gate;                 // 512 -> N_p
    nn::Mlp2 out;                  // D_p -> D_p

    static PromptModule create(nn::ParamStore& store, const std::string& name, int n_prompts,
                               int d_p, Rng& rng);
    PromptResult forward(nn::LayerCtx& ctx, ad::Value f_d) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

struct DamResult {
    ad::Value out;
    ad::Value degradation_mask; // [1,h,w], sigmoid range
};

// Degradation-aware block: normalized 1x1 projection, content-embedding
// cross-attention (single key/value token by default), sigmoid
// degradation mask from the prompt, concat + bias-free fuse back to C.
struct DamBlock {
    nn::LayerNormChan norm;
    nn::Conv1x1 proj; // C -> C
    // default reading: F_c is the key/value source (one token)
    nn::Linear content_v; // [C, 512]
    // alternate reading: F_c is the query over spatial positions
    nn::Linear query_k;  // [512, C]
    nn::Conv1x1 query_v; // C -> C
    nn::Mlp2 mask_mlp;   // D_p -> base_h*base_w
    nn::Conv1x1 fuse;    // 2C -> C, bias-free
    int base_h = 8;
    int base_w = 8;
    bool content_as_query = false;

    static DamBlock create(nn::ParamStore& store, const std::string& name, int channels, int d_p,
                           int base, bool content_as_query, Rng& rng);
    DamResult forward(nn::LayerCtx& ctx, ad::Value x, ad::Value f_c, ad::Value f_p) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

} // namespace clearair::modulation
