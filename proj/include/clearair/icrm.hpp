// SPDX-License-Identifier: Apache-2.0
//
// Internal clue reuse: weak/strong photometric augmentation of the
// restored output and the consistency objective between the two branches,
// plus assembly of the total training loss.
//
// Augmentations are photometric only, so the pixelwise L2 compares
// aligned images. Clamping inside augmentation is active in training and
// disabled in test mode so analytic cases are exact.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clearair/autodiff.hpp"
#include "clearair/config.hpp"
#include "clearair/image.hpp"

namespace clearair::icrm {

enum class AugOpKind { brightness, contrast, gaussian_noise, gaussian_blur };

std::string to_string(AugOpKind k);
// Throws PolicyError for unknown or non-photometric op names.
AugOpKind aug_op_from_string(const std::string& name);

struct AugOp {
    AugOpKind kind = AugOpKind::brightness;
    double range = 0.0; // magnitude bound; see sample_plan for semantics
};

struct AugmentationPolicy {
    std::vector<AugOp> weak;
    std::vector<AugOp> strong;
    std::uint64_t seed = 0;

    // strong ranges must contain the weak ranges per op kind
    void validate() const;
};

// Default policy from the config's range fields.
AugmentationPolicy policy_from_config(const ModelConfig& cfg);

// Concrete parameters drawn for one application of an op list.
struct AugPlanOp {
    AugOpKind kind;
    double value = 0.0;  // brightness delta or contrast factor
    Tensor noise;        // pre-drawn noise field ([C,H,W], already scaled)
    Tensor blur_kernel;  // [3,3] normalized, empty when inactive
};

struct AugPlan {
    std::vector<AugPlanOp> ops;
    bool clamp = true;
};

AugPlan sample_plan(const std::vector<AugOp>& ops, const std::vector<int>& img_dims,
                    std::uint64_t seed, bool clamp);

// Differentiable application of a sampled plan.
ad::Value apply_plan(ad::Tape& tape, ad::Value img, const AugPlan& plan);

ImageTensor weak_augment(const ImageTensor& img, const AugmentationPolicy& policy,
                         std::uint64_t seed, bool clamp = true);
ImageTensor strong_augment(const ImageTensor& img, const AugmentationPolicy& policy,
                           std::uint64_t seed, bool clamp = true);

struct LossBreakdown {
    double l1 = 0.0;
    double internal = 0.0;
    double total = 0.0;
};

// total = l1 + alpha * internal must hold to 1e-9 relative.
void validate_breakdown(const LossBreakdown& lb, double alpha);

// Graph-level pieces used by both the public ops and the training loop.
struct LossValues {
    ad::Value l1;
    ad::Value internal;
    ad::Value total;
};

ad::Value internal_loss_value(ad::Tape& tape, ad::Value restored, double gamma,
                              const AugmentationPolicy& policy, std::uint64_t seed, bool clamp);
LossValues total_loss_value(ad::Tape& tape, ad::Value restored, ad::Value ground_truth,
                            double alpha, double gamma, const AugmentationPolicy& policy,
                            std::uint64_t seed, bool clamp);

double internal_loss(const ImageTensor& restored, double gamma, const AugmentationPolicy& policy,
                     std::uint64_t seed, bool clamp = true);
LossBreakdown total_loss(const ImageTensor& restored, const ImageTensor& ground_truth,
                         double alpha, double gamma, const AugmentationPolicy& policy,
                         std::uint64_t seed, bool clamp = true);

} // namespace clearair::icrm
