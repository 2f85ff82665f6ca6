// SPDX-License-Identifier: Apache-2.0
//
// Synthetic degradation operators: deterministic, parameterized, and
// simple enough that every one has a closed-form or counting oracle.
// All operators clamp to [0,1] and preserve shape.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clearair/image.hpp"
#include "clearair/manifest.hpp"

namespace clearair::degrade {

enum class Kind { gaussian_noise, haze, rain, motion_blur, low_light, snow };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

struct DegradationSpec {
    Kind kind = Kind::gaussian_noise;
    double sigma = 0.0;        // gaussian_noise, 0-255 scale
    double transmission = 1.0; // haze t
    double airlight = 0.0;     // haze A
    double density = 0.0;      // rain / snow coverage fraction
    int length = 1;            // rain streak length / blur kernel length
    double angle_deg = 0.0;    // rain streak / blur direction
    double gamma = 1.0;        // low_light exponent
    double gain = 1.0;         // low_light gain
    double size = 3.0;         // snow flake diameter in pixels
    std::uint64_t seed = 0;

    void validate() const; // throws ParameterError
};

struct CompositeSpec {
    std::vector<DegradationSpec> stages;

    void validate() const;
    std::string tag() const; // stage kinds joined with '+'
};

ImageTensor add_gaussian_noise(const ImageTensor& img, double sigma, std::uint64_t seed);
ImageTensor apply_haze(const ImageTensor& img, double transmission, double airlight);
ImageTensor apply_rain(const ImageTensor& img, double density, int length, double angle_deg,
                       std::uint64_t seed);
ImageTensor apply_motion_blur(const ImageTensor& img, int length, double angle_deg);
ImageTensor apply_low_light(const ImageTensor& img, double gamma, double gain);
ImageTensor apply_snow(const ImageTensor& img, double density, double size, std::uint64_t seed);

ImageTensor apply_stage(const ImageTensor& img, const DegradationSpec& spec);
ImageTensor compose(const ImageTensor& img, const CompositeSpec& spec);

// JSON recipe file: an array of {"stages": [{"kind": ..., ...}, ...]}.
std::vector<CompositeSpec> load_degradation_specs(const std::string& path);
std::vector<CompositeSpec> parse_degradation_specs(const std::string& json_text);

// Degrades images from clean_dir into out_dir and writes manifest.tsv.
// Output i uses clean image i % n and spec i % specs.size(); stage seeds
// mix the global seed with the output and stage indices.
std::vector<ManifestRow> generate_dataset(const std::string& clean_dir,
                                          const std::string& out_dir,
                                          const std::vector<CompositeSpec>& specs, int count,
                                          std::uint64_t seed);

} // namespace clearair::degrade
