// SPDX-License-Identifier: Apache-2.0
//
// Four-level encoder-decoder restoration transformer with guidance
// injection points. Blocks follow the Restormer convention: transposed
// channel attention plus gated depthwise feed-forward, pixel-shuffle
// resampling, skip concatenation, and a zero-initialized output head so
// the freshly built model is exactly the identity.

#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clearair/config.hpp"
#include "clearair/guidance.hpp"
#include "clearair/image.hpp"
#include "clearair/layers.hpp"
#include "clearair/modulation.hpp"

namespace clearair::backbone {

struct PipelineOrder {
    std::array<PerceptionStage, 3> order{PerceptionStage::how, PerceptionStage::where,
                                         PerceptionStage::what};

    void validate() const;
};

// Transposed-attention transformer block.
struct PtbBlock {
    nn::LayerNormChan norm1;
    nn::Conv1x1 qkv;
    nn::DwConv3x3 qkv_dw;
    nn::Parameter* temperature = nullptr; // [heads]
    nn::Conv1x1 attn_out;
    nn::LayerNormChan norm2;
    nn::Conv1x1 ffn_in;
    nn::DwConv3x3 ffn_dw;
    nn::Conv1x1 ffn_out;
    int heads = 1;
    int hidden = 0;

    static PtbBlock create(nn::ParamStore& store, const std::string& name, int channels, int heads,
                           Rng& rng);
    ad::Value forward(nn::LayerCtx& ctx, ad::Value x) const;
    void collect(std::vector<nn::Parameter*>& out) const;
};

class Model {
public:
    static std::unique_ptr<Model> build(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Named trainable parameters of the current binding, stable order.
    std::vector<nn::Parameter*> parameters() const;
    std::int64_t parameter_count() const;

    // Differentiable forward on a tape. Output equals input shape.
    ad::Value forward(nn::LayerCtx& ctx, const ImageTensor& img,
                      const guidance::GuidanceBundle& bundle) const;

    // Convenience forward returning a plain image (no gradients).
    ImageTensor restore(const ImageTensor& img, const guidance::GuidanceBundle& bundle) const;

    // Rebinds the three guidance families onto the canonical depth slots
    // (early = enc1, mid = latent, late = dec3+dec2) in the given order.
    // Block parameters are preserved when a family returns to a stage it
    // was bound to before (shapes always match per stage); new
    // family/stage pairs are initialized deterministically from the seed.
    void set_perception_order(const PipelineOrder& order);

    // Channel width at a named injection stage.
    int stage_channels(const std::string& stage) const;

    nn::ParamStore& param_store() { return store_; }

private:
    Model() = default;

    struct Bound {
        InjectionModule module = InjectionModule::none;
        modulation::QgmBlock* qgm = nullptr;
        modulation::ScaBlock* sca = nullptr;
        nn::Parameter* sem_free = nullptr; // learnable semantic prior (SGU ablated)
        modulation::DamBlock* dam = nullptr;
    };

    void bind_plan(const std::map<std::string, InjectionModule>& plan);
    Bound& ensure_block(const std::string& stage, InjectionModule module);

    ad::Value apply_injection(nn::LayerCtx& ctx, const std::string& stage, ad::Value x,
                              const std::optional<ad::Value>& f_q, const std::optional<ad::Value>& f_c,
                              const std::optional<ad::Value>& f_p,
                              const std::map<int, guidance::LabelMap>& labels_by_scale) const;

    ModelConfig cfg_;
    nn::ParamStore store_;

    nn::Conv3x3 embed_;
    std::vector<std::vector<PtbBlock>> encoders_; // levels 1..3
    std::vector<nn::Conv3x3> downs_;              // 3
    std::vector<PtbBlock> latent_;
    std::vector<nn::Conv3x3> ups_;                // 3 (latent->3, 3->2, 2->1)
    std::vector<nn::Conv1x1> reduces_;            // 2 (levels 3,2)
    std::vector<std::vector<PtbBlock>> decoders_; // levels 3,2,1
    std::vector<PtbBlock> refinement_;
    nn::Conv3x3 head_;

    // Global guidance modules (created on demand).
    std::optional<modulation::QualityAdapter> adapter_;
    std::optional<modulation::PromptModule> prompt_;
    nn::Parameter* fq_free_ = nullptr; // quality guidance ablated
    nn::Parameter* fp_free_ = nullptr; // task identifier ablated
    nn::Parameter* fc_free_ = nullptr;

    // Cache of guidance blocks per (module, stage); rebinding reuses them.
    std::map<std::string, modulation::QgmBlock> qgm_cache_;
    std::map<std::string, modulation::ScaBlock> sca_cache_;
    std::map<std::string, nn::Parameter*> sem_free_cache_;
    std::map<std::string, modulation::DamBlock> dam_cache_;
    std::map<std::string, Bound> bindings_; // stage -> bound block
};

// Stage scale (downsampling exponent): enc1/dec1/refine 0, enc2/dec2 1,
// enc3/dec3 2, latent 3.
int stage_scale_exponent(const std::string& stage);

} // namespace clearair::backbone
