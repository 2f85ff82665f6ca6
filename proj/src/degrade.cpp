// SPDX-License-Identifier: Apache-2.0

#include "clearair/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "clearair/errors.hpp"
#include "clearair/image_io.hpp"
#include "clearair/rng.hpp"

namespace clearair::degrade {

namespace fs = std::filesystem;

std::string to_string(Kind k) {
    switch (k) {
        case Kind::gaussian_noise: return "gaussian_noise";
        case Kind::haze: return "haze";
        case Kind::rain: return "rain";
        case Kind::motion_blur: return "motion_blur";
        case Kind::low_light: return "low_light";
        case Kind::snow: return "snow";
    }
    return "gaussian_noise";
}

Kind kind_from_string(const std::string& s) {
    if (s == "gaussian_noise" || s == "noise") return Kind::gaussian_noise;
    if (s == "haze") return Kind::haze;
    if (s == "rain") return Kind::rain;
    if (s == "motion_blur" || s == "blur") return Kind::motion_blur;
    if (s == "low_light") return Kind::low_light;
    if (s == "snow") return Kind::snow;
    throw ParameterError("unknown degradation kind '" + s + "'");
}

void DegradationSpec::validate() const {
    switch (kind) {
        case Kind::gaussian_noise:
            if (sigma < 0.0) throw ParameterError("gaussian_noise: sigma must be >= 0");
            break;
        case Kind::haze:
            if (transmission < 0.0 || transmission > 1.0) {
                throw ParameterError("haze: transmission must lie in [0,1]");
            }
            if (airlight < 0.0 || airlight > 1.0) {
                throw ParameterError("haze: airlight must lie in [0,1]");
            }
            break;
        case Kind::rain:
            if (density < 0.0 || density > 1.0) {
                throw ParameterError("rain: density must lie in [0,1]");
            }
            if (length < 1) throw ParameterError("rain: length must be >= 1");
            break;
        case Kind::motion_blur:
            if (length < 1) throw ParameterError("motion_blur: length must be >= 1");
            break;
        case Kind::low_light:
            if (gamma <= 0.0) throw ParameterError("low_light: gamma must be > 0");
            if (gain <= 0.0) throw ParameterError("low_light: gain must be > 0");
            break;
        case Kind::snow:
            if (density < 0.0 || density > 1.0) {
                throw ParameterError("snow: density must lie in [0,1]");
            }
            if (size <= 0.0) throw ParameterError("snow: size must be > 0");
            break;
    }
}

void CompositeSpec::validate() const {
    if (stages.empty()) throw ParameterError("composite spec must have at least one stage");
    for (const DegradationSpec& s : stages) s.validate();
}

std::string CompositeSpec::tag() const {
    std::string t;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i) t += "+";
        t += to_string(stages[i].kind);
    }
    return t;
}

ImageTensor add_gaussian_noise(const ImageTensor& img, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ParameterError("add_gaussian_noise: sigma must be >= 0");
    if (sigma == 0.0) return img;
    Rng rng(seed);
    Tensor t = img.tensor();
    for (std::int64_t i = 0; i < t.size(); ++i) {
        t[i] += rng.normal() * sigma / 255.0;
    }
    return clamp_to_image(std::move(t));
}

ImageTensor apply_haze(const ImageTensor& img, double transmission, double airlight) {
    if (transmission < 0.0 || transmission > 1.0) {
        throw ParameterError("apply_haze: transmission must lie in [0,1]");
    }
    if (airlight < 0.0 || airlight > 1.0) {
        throw ParameterError("apply_haze: airlight must lie in [0,1]");
    }
    Tensor t = img.tensor();
    const double add = airlight * (1.0 - transmission);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = t[i] * transmission + add;
    return clamp_to_image(std::move(t));
}

namespace {

// Bilinearly splats `value` at a fractional position into a [H,W] layer.
void splat(Tensor& layer, double y, double x, double value) {
    const int h = layer.dim(0), w = layer.dim(1);
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
    const double w10 = fy * (1 - fx), w11 = fy * fx;
    auto put = [&](int yy, int xx, double v) {
        if (yy >= 0 && yy < h && xx >= 0 && xx < w) layer.at(yy, xx) += v;
    };
    put(y0, x0, value * w00);
    put(y0, x0 + 1, value * w01);
    put(y0 + 1, x0, value * w10);
    put(y0 + 1, x0 + 1, value * w11);
}

ImageTensor add_layer(const ImageTensor& img, const Tensor& layer) {
    Tensor t = img.tensor();
    const std::int64_t hw = static_cast<std::int64_t>(img.height()) * img.width();
    for (int c = 0; c < img.channels(); ++c) {
        double* plane = t.data() + c * hw;
        for (std::int64_t i = 0; i < hw; ++i) plane[i] += layer[i];
    }
    return clamp_to_image(std::move(t));
}

} // namespace

ImageTensor apply_rain(const ImageTensor& img, double density, int length, double angle_deg,
                       std::uint64_t seed) {
    if (density < 0.0 || density > 1.0) {
        throw ParameterError("apply_rain: density must lie in [0,1]");
    }
    if (length < 1) throw ParameterError("apply_rain: length must be >= 1");
    if (density == 0.0) return img;
    const int h = img.height(), w = img.width();
    const double rad = angle_deg * M_PI / 180.0;
    const double dy = -std::sin(rad), dx = std::cos(rad);
    const std::int64_t streaks = std::llround(density * h * w / length);
    Rng rng(seed);
    Tensor layer({h, w});
    for (std::int64_t s = 0; s < streaks; ++s) {
        const double y0 = rng.uniform(0.0, h);
        const double x0 = rng.uniform(0.0, w);
        const double intensity = rng.uniform(0.1, 0.3);
        for (int i = 0; i < length; ++i) {
            splat(layer, y0 + i * dy, x0 + i * dx, intensity);
        }
    }
    return add_layer(img, layer);
}

ImageTensor apply_motion_blur(const ImageTensor& img, int length, double angle_deg) {
    if (length < 1) throw ParameterError("apply_motion_blur: length must be >= 1");
    if (length == 1) return img;
    const double rad = angle_deg * M_PI / 180.0;
    const double dy = -std::sin(rad), dx = std::cos(rad);
    const int radius = static_cast<int>(std::ceil((length - 1) / 2.0)) + 1;
    const int k = 2 * radius + 1;
    Tensor kernel({k, k});
    for (int i = 0; i < length; ++i) {
        const double t = i - (length - 1) / 2.0;
        splat(kernel, radius + t * dy, radius + t * dx, 1.0 / length);
    }
    const int h = img.height(), w = img.width(), c = img.channels();
    if (radius >= h || radius >= w) {
        throw ParameterError("apply_motion_blur: kernel larger than image");
    }
    // Reflect-padded convolution (kernel is symmetric around its center).
    auto refl = [](int i, int n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int ky = 0; ky < k; ++ky) {
                    const int sy = refl(y + ky - radius, h);
                    for (int kx = 0; kx < k; ++kx) {
                        const double kv = kernel.at(ky, kx);
                        if (kv == 0.0) continue;
                        acc += kv * img.at(ci, sy, refl(x + kx - radius, w));
                    }
                }
                out.at(ci, y, x) = acc;
            }
        }
    }
    return clamp_to_image(std::move(out));
}

ImageTensor apply_low_light(const ImageTensor& img, double gamma, double gain) {
    if (gamma <= 0.0) throw ParameterError("apply_low_light: gamma must be > 0");
    if (gain <= 0.0) throw ParameterError("apply_low_light: gain must be > 0");
    Tensor t = img.tensor();
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gain * std::pow(t[i], gamma);
    return clamp_to_image(std::move(t));
}

ImageTensor apply_snow(const ImageTensor& img, double density, double size, std::uint64_t seed) {
    if (density < 0.0 || density > 1.0) {
        throw ParameterError("apply_snow: density must lie in [0,1]");
    }
    if (size <= 0.0) throw ParameterError("apply_snow: size must be > 0");
    if (density == 0.0) return img;
    const int h = img.height(), w = img.width();
    const double radius = std::max(size / 2.0, 0.5);
    const double area = M_PI * radius * radius;
    const std::int64_t flakes = std::llround(density * h * w / area);
    Rng rng(seed);
    Tensor layer({h, w});
    for (std::int64_t f = 0; f < flakes; ++f) {
        const double cy = rng.uniform(0.0, h);
        const double cx = rng.uniform(0.0, w);
        const double bright = rng.uniform(0.4, 0.7);
        const int y_lo = std::max(0, static_cast<int>(std::floor(cy - radius)));
        const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(cy + radius)));
        const int x_lo = std::max(0, static_cast<int>(std::floor(cx - radius)));
        const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(cx + radius)));
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                if (d2 <= radius * radius) {
                    // soft falloff toward the rim
                    layer.at(y, x) += bright * (1.0 - 0.5 * d2 / (radius * radius));
                }
            }
        }
    }
    return add_layer(img, layer);
}

ImageTensor apply_stage(const ImageTensor& img, const DegradationSpec& s) {
    s.validate();
    switch (s.kind) {
        case Kind::gaussian_noise: return add_gaussian_noise(img, s.sigma, s.seed);
        case Kind::haze: return apply_haze(img, s.transmission, s.airlight);
        case Kind::rain: return apply_rain(img, s.density, s.length, s.angle_deg, s.seed);
        case Kind::motion_blur: return apply_motion_blur(img, s.length, s.angle_deg);
        case Kind::low_light: return apply_low_light(img, s.gamma, s.gain);
        case Kind::snow: return apply_snow(img, s.density, s.size, s.seed);
    }
    throw ParameterError("apply_stage: unhandled kind");
}

ImageTensor compose(const ImageTensor& img, const CompositeSpec& spec) {
    if (spec.stages.empty()) throw ParameterError("compose: spec must have at least one stage");
    ImageTensor out = img;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        try {
            out = apply_stage(out, spec.stages[i]);
        } catch (const ParameterError& e) {
            throw ParameterError("stage " + std::to_string(i) + ": " + e.what());
        }
    }
    return out;
}

std::vector<CompositeSpec> parse_degradation_specs(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParameterError(std::string("degradation spec: invalid JSON: ") + e.what());
    }
    if (!j.is_array()) throw ParameterError("degradation spec: expected a JSON array");
    std::vector<CompositeSpec> specs;
    for (const auto& item : j) {
        CompositeSpec comp;
        const auto& stages = item.contains("stages") ? item.at("stages") : item;
        if (!stages.is_array()) throw ParameterError("degradation spec: 'stages' must be an array");
        for (const auto& st : stages) {
            DegradationSpec d;
            d.kind = kind_from_string(st.at("kind").get<std::string>());
            if (st.contains("sigma")) d.sigma = st.at("sigma").get<double>();
            if (st.contains("transmission")) d.transmission = st.at("transmission").get<double>();
            if (st.contains("airlight")) d.airlight = st.at("airlight").get<double>();
            if (st.contains("density")) d.density = st.at("density").get<double>();
            if (st.contains("length")) d.length = st.at("length").get<int>();
            if (st.contains("angle")) d.angle_deg = st.at("angle").get<double>();
            if (st.contains("gamma")) d.gamma = st.at("gamma").get<double>();
            if (st.contains("gain")) d.gain = st.at("gain").get<double>();
            if (st.contains("size")) d.size = st.at("size").get<double>();
            if (st.contains("seed")) d.seed = st.at("seed").get<std::uint64_t>();
            d.validate();
            comp.stages.push_back(d);
        }
        comp.validate();
        specs.push_back(std::move(comp));
    }
    return specs;
}

std::vector<CompositeSpec> load_degradation_specs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open degradation spec: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_degradation_specs(text);
}

std::vector<ManifestRow> generate_dataset(const std::string& clean_dir,
                                          const std::string& out_dir,
                                          const std::vector<CompositeSpec>& specs, int count,
                                          std::uint64_t seed) {
    if (specs.empty()) throw DatasetError("generate_dataset: no degradation specs");
    for (const CompositeSpec& s : specs) s.validate();
    std::vector<std::string> clean_paths;
    if (fs::is_directory(clean_dir)) {
        for (const auto& entry : fs::directory_iterator(clean_dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") {
                clean_paths.push_back(entry.path().string());
            }
        }
    }
    std::sort(clean_paths.begin(), clean_paths.end());
    if (clean_paths.empty()) {
        throw DatasetError("generate_dataset: no readable PNG images in " + clean_dir);
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("generate_dataset: cannot create " + out_dir + ": " + ec.message());

    std::vector<ManifestRow> rows;
    for (int i = 0; i < count; ++i) {
        const std::string& src = clean_paths[static_cast<std::size_t>(i) % clean_paths.size()];
        CompositeSpec spec = specs[static_cast<std::size_t>(i) % specs.size()];
        // Independent stage streams per output image.
        for (std::size_t si = 0; si < spec.stages.size(); ++si) {
            spec.stages[si].seed ^=
                derive_seed(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(si));
        }
        const ImageTensor clean = read_png(src);
        const ImageTensor degraded = compose(clean, spec);

        char name[64];
        std::snprintf(name, sizeof(name), "deg_%05d.png", i);
        const std::string deg_name = name;
        std::snprintf(name, sizeof(name), "clean_%05d.png", i);
        const std::string clean_name = name;
        write_png((fs::path(out_dir) / deg_name).string(), degraded);
        write_png((fs::path(out_dir) / clean_name).string(), clean);
        rows.push_back({deg_name, clean_name, spec.tag()});
    }
    write_manifest((fs::path(out_dir) / "manifest.tsv").string(), rows);
    return rows;
}

} // namespace clearair::degrade
