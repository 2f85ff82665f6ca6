// SPDX-License-Identifier: Apache-2.0

#include "clearair/icrm.hpp"

#include <cmath>

#include "clearair/errors.hpp"
#include "clearair/rng.hpp"

namespace clearair::icrm {

using ad::Tape;
using ad::Value;

std::string to_string(AugOpKind k) {
    switch (k) {
        case AugOpKind::brightness: return "brightness";
        case AugOpKind::contrast: return "contrast";
        case AugOpKind::gaussian_noise: return "gaussian_noise";
        case AugOpKind::gaussian_blur: return "gaussian_blur";
    }
    return "brightness";
}

AugOpKind aug_op_from_string(const std::string& name) {
    if (name == "brightness") return AugOpKind::brightness;
    if (name == "contrast") return AugOpKind::contrast;
    if (name == "gaussian_noise" || name == "noise") return AugOpKind::gaussian_noise;
    if (name == "gaussian_blur" || name == "blur") return AugOpKind::gaussian_blur;
    if (name == "flip" || name == "crop" || name == "rotate" || name == "translate" ||
        name == "scale") {
        throw PolicyError("augmentation op '" + name +
                          "' is geometric; the consistency loss requires photometric ops");
    }
    throw PolicyError("unknown augmentation op '" + name + "'");
}

void AugmentationPolicy::validate() const {
    for (const AugOp& op : weak) {
        if (op.range < 0.0) throw ValidationError("augment range must be >= 0");
        double strong_range = 0.0;
        for (const AugOp& s : strong) {
            if (s.kind == op.kind) strong_range = std::max(strong_range, s.range);
        }
        if (strong_range < op.range) {
            throw ValidationError("strong augment ranges must contain the weak ranges (" +
                                  to_string(op.kind) + ")");
        }
    }
    for (const AugOp& op : strong) {
        if (op.range < 0.0) throw ValidationError("augment range must be >= 0");
    }
}

namespace {

std::vector<AugOp> ops_from_ranges(const AugmentRanges& r) {
    std::vector<AugOp> ops;
    if (r.brightness > 0.0) ops.push_back({AugOpKind::brightness, r.brightness});
    if (r.contrast > 0.0) ops.push_back({AugOpKind::contrast, r.contrast});
    if (r.noise_sigma > 0.0) ops.push_back({AugOpKind::gaussian_noise, r.noise_sigma});
    if (r.blur_radius > 0.0) ops.push_back({AugOpKind::gaussian_blur, r.blur_radius});
    return ops;
}

} // namespace

AugmentationPolicy policy_from_config(const ModelConfig& cfg) {
    AugmentationPolicy p;
    p.weak = ops_from_ranges(cfg.weak_augment);
    p.strong = ops_from_ranges(cfg.strong_augment);
    p.seed = cfg.seed;
    p.validate();
    return p;
}

AugPlan sample_plan(const std::vector<AugOp>& ops, const std::vector<int>& img_dims,
                    std::uint64_t seed, bool clamp) {
    AugPlan plan;
    plan.clamp = clamp;
    Rng rng(seed);
    for (const AugOp& op : ops) {
        AugPlanOp out;
        out.kind = op.kind;
        switch (op.kind) {
            case AugOpKind::brightness:
                out.value = rng.uniform(-op.range, op.range);
                break;
            case AugOpKind::contrast:
                out.value = rng.uniform(1.0 - op.range, 1.0 + op.range);
                break;
            case AugOpKind::gaussian_noise: {
                const double sigma = rng.uniform(0.0, op.range) / 255.0;
                out.noise = Tensor(img_dims);
                for (std::int64_t i = 0; i < out.noise.size(); ++i) {
                    out.noise[i] = rng.normal() * sigma;
                }
                break;
            }
            case AugOpKind::gaussian_blur: {
                const double sigma = rng.uniform(0.0, op.range);
                if (sigma < 1e-6) break; // identity draw
                Tensor k({3, 3});
                double sum = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                        k.at(dy + 1, dx + 1) = v;
                        sum += v;
                    }
                }
                for (std::int64_t i = 0; i < 9; ++i) k[i] /= sum;
                out.blur_kernel = std::move(k);
                break;
            }
        }
        plan.ops.push_back(std::move(out));
    }
    return plan;
}

Value apply_plan(Tape& tape, Value img, const AugPlan& plan) {
    Value x = img;
    for (const AugPlanOp& op : plan.ops) {
        switch (op.kind) {
            case AugOpKind::brightness:
                x = tape.add_scalar(x, op.value);
                break;
            case AugOpKind::contrast:
                // pivot at mid-gray: 0.5 + f*(x - 0.5)
                x = tape.add_scalar(tape.scale(x, op.value), 0.5 * (1.0 - op.value));
                break;
            case AugOpKind::gaussian_noise:
                if (!op.noise.empty()) x = tape.add(x, tape.leaf(op.noise, false));
                break;
            case AugOpKind::gaussian_blur: {
                if (op.blur_kernel.empty()) break;
                const int c = x.val().dim(0);
                Tensor per_chan({c, 3, 3});
                for (int ci = 0; ci < c; ++ci) {
                    for (int i = 0; i < 9; ++i) {
                        per_chan[static_cast<std::int64_t>(ci) * 9 + i] = op.blur_kernel[i];
                    }
                }
                x = tape.dwconv3x3(x, tape.leaf(std::move(per_chan), false), Value{});
                break;
            }
        }
        if (plan.clamp) x = tape.clamp01(x);
    }
    return x;
}

namespace {

ImageTensor augment_with(const std::vector<AugOp>& ops, const ImageTensor& img,
                         std::uint64_t seed, bool clamp) {
    Tape tape;
    Value x = tape.leaf(img.tensor(), false);
    const AugPlan plan = sample_plan(ops, img.tensor().dims(), seed, clamp);
    Tensor out = apply_plan(tape, x, plan).val();
    if (clamp) return ImageTensor(std::move(out));
    // test mode may leave values outside [0,1]; wrap without validating range
    ImageTensor res;
    res.tensor() = std::move(out);
    return res;
}

} // namespace

ImageTensor weak_augment(const ImageTensor& img, const AugmentationPolicy& policy,
                         std::uint64_t seed, bool clamp) {
    policy.validate();
    return augment_with(policy.weak, img, derive_seed(seed, "weak"), clamp);
}

ImageTensor strong_augment(const ImageTensor& img, const AugmentationPolicy& policy,
                           std::uint64_t seed, bool clamp) {
    policy.validate();
    return augment_with(policy.strong, img, derive_seed(seed, "strong"), clamp);
}

void validate_breakdown(const LossBreakdown& lb, double alpha) {
    const double expect = lb.l1 + alpha * lb.internal;
    const double scale = std::max({std::fabs(expect), std::fabs(lb.total), 1e-300});
    if (std::fabs(lb.total - expect) > 1e-9 * scale) {
        throw ValidationError("loss breakdown violates total = l1 + alpha * internal");
    }
    if (lb.l1 < 0.0 || lb.internal < 0.0 || lb.total < 0.0) {
        throw ValidationError("loss components must be non-negative");
    }
}

Value internal_loss_value(Tape& tape, Value restored, double gamma,
                          const AugmentationPolicy& policy, std::uint64_t seed, bool clamp) {
    if (gamma < 0.0) throw ParameterError("internal_loss: gamma must be >= 0");
    policy.validate();
    const std::vector<int> dims = restored.val().dims();
    const AugPlan weak_plan = sample_plan(policy.weak, dims, derive_seed(seed, "weak"), clamp);
    const AugPlan strong_plan = sample_plan(policy.strong, dims, derive_seed(seed, "strong"), clamp);
    Value weak = apply_plan(tape, restored, weak_plan);
    Value strong = apply_plan(tape, weak, strong_plan);
    return tape.scale(tape.mean_sq_diff(weak, strong), gamma);
}

LossValues total_loss_value(Tape& tape, Value restored, Value ground_truth, double alpha,
                            double gamma, const AugmentationPolicy& policy, std::uint64_t seed,
                            bool clamp) {
    if (alpha < 0.0) throw ParameterError("total_loss: alpha must be >= 0");
    if (!restored.val().same_shape(ground_truth.val())) {
        throw ShapeError("total_loss: restored and ground truth shapes differ");
    }
    LossValues out;
    out.l1 = tape.mean_abs_diff(restored, ground_truth);
    out.internal = internal_loss_value(tape, restored, gamma, policy, seed, clamp);
    out.total = tape.add(out.l1, tape.scale(out.internal, alpha));
    return out;
}

double internal_loss(const ImageTensor& restored, double gamma, const AugmentationPolicy& policy,
                     std::uint64_t seed, bool clamp) {
    Tape tape;
    Value x = tape.leaf(restored.tensor(), false);
    return internal_loss_value(tape, x, gamma, policy, seed, clamp).val()[0];
}

LossBreakdown total_loss(const ImageTensor& restored, const ImageTensor& ground_truth,
                         double alpha, double gamma, const AugmentationPolicy& policy,
                         std::uint64_t seed, bool clamp) {
    Tape tape;
    Value r = tape.leaf(restored.tensor(), false);
    Value g = tape.leaf(ground_truth.tensor(), false);
    const LossValues v = total_loss_value(tape, r, g, alpha, gamma, policy, seed, clamp);
    LossBreakdown lb{v.l1.val()[0], v.internal.val()[0], v.total.val()[0]};
    validate_breakdown(lb, alpha);
    return lb;
}

} // namespace clearair::icrm
