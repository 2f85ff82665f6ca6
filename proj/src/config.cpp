// SPDX-License-Identifier: Apache-2.0

#include "clearair/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "clearair/errors.hpp"

namespace clearair {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const std::string& part : split(v, ',')) {
        out.push_back(static_cast<int>(parse_int(key, part)));
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

} // namespace

std::string to_string(InjectionModule m) {
    switch (m) {
        case InjectionModule::none: return "none";
        case InjectionModule::qgm: return "qgm";
        case InjectionModule::sca: return "sca";
        case InjectionModule::dam: return "dam";
    }
    return "none";
}

std::string to_string(PerceptionStage s) {
    switch (s) {
        case PerceptionStage::how: return "how";
        case PerceptionStage::where: return "where";
        case PerceptionStage::what: return "what";
    }
    return "how";
}

InjectionModule injection_module_from_string(const std::string& s) {
    if (s == "none") return InjectionModule::none;
    if (s == "qgm") return InjectionModule::qgm;
    if (s == "sca") return InjectionModule::sca;
    if (s == "dam") return InjectionModule::dam;
    throw ConfigError("unknown injection module '" + s + "'");
}

PerceptionStage perception_stage_from_string(const std::string& s) {
    if (s == "how") return PerceptionStage::how;
    if (s == "where") return PerceptionStage::where;
    if (s == "what") return PerceptionStage::what;
    throw ConfigError("unknown perception stage '" + s + "'");
}

const std::vector<std::string>& injection_stage_names() {
    static const std::vector<std::string> names = {"enc1", "enc2", "enc3",  "latent",
                                                   "dec3", "dec2", "dec1", "refine"};
    return names;
}

std::map<std::string, InjectionModule> ModelConfig::default_injection_plan() {
    // Semantic pooling operates on shallow features, the quality signal is
    // global (bottleneck), degradation-specific synthesis happens during
    // reconstruction.
    return {
        {"enc1", InjectionModule::sca},
        {"latent", InjectionModule::qgm},
        {"dec3", InjectionModule::dam},
        {"dec2", InjectionModule::dam},
    };
}

void ModelConfig::validate() const {
    auto check_list4 = [](const std::vector<int>& v, const char* name) {
        if (v.size() != 4) {
            throw ValidationError(std::string(name) + " must have exactly 4 entries");
        }
        for (int x : v) {
            if (x < 1) throw ValidationError(std::string(name) + " entries must be positive");
        }
    };
    check_list4(level_depths, "level_depths");
    check_list4(level_heads, "level_heads");
    check_list4(level_channels, "level_channels");
    for (int i = 1; i < 4; ++i) {
        if (level_channels[i] < level_channels[i - 1]) {
            throw ValidationError("level_channels must be non-decreasing");
        }
        if (level_channels[i] % 4 != 0) {
            throw ValidationError("level_channels beyond level 1 must be divisible by 4");
        }
    }
    for (int i = 0; i < 4; ++i) {
        if (level_channels[i] % level_heads[i] != 0) {
            throw ValidationError("level_heads must divide level_channels at every level");
        }
    }
    if (refinement_blocks < 0) throw ValidationError("refinement_blocks must be >= 0");
    {
        std::set<PerceptionStage> seen(perception_order.begin(), perception_order.end());
        if (seen.size() != 3) {
            throw ValidationError("perception_order must be a permutation of how,where,what");
        }
    }
    for (const auto& [stage, mod] : injection_plan) {
        const auto& names = injection_stage_names();
        if (std::find(names.begin(), names.end(), stage) == names.end()) {
            throw ValidationError("unknown injection stage '" + stage + "'");
        }
        (void)mod;
    }
    if (loss_alpha < 0.0) throw ValidationError("loss_alpha must be >= 0");
    if (loss_gamma < 0.0) throw ValidationError("loss_gamma must be >= 0");
    if (optimizer.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (optimizer.total_iterations < 0) throw ValidationError("total_iterations must be >= 0");
    if (optimizer.learning_rate < 0.0) throw ValidationError("learning_rate must be >= 0");
    if (optimizer.weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
    if (crop_size < 1) throw ValidationError("crop_size must be positive");
    if (mask_dropout_rate < 0.0 || mask_dropout_rate > 1.0) {
        throw ValidationError("mask_dropout_rate must lie in [0,1]");
    }
    if (prompt_count < 1) throw ValidationError("prompt_count must be >= 1");
    if (embed_dims.quality < 1) throw ValidationError("embed.quality must be >= 1");
    if (embed_dims.clip != 512) throw ValidationError("embed.clip must be exactly 512");
    if (embed_dims.prompt < 1) throw ValidationError("embed.prompt must be >= 1");
    if (mask_base < 1) throw ValidationError("mask_base must be >= 1");
    if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
    if (mask_mode != "grid" && mask_mode != "quantile") {
        throw ValidationError("mask_mode must be 'grid' or 'quantile'");
    }
    if (mask_cells < 1) throw ValidationError("mask_cells must be >= 1");
    if (quality_text.empty()) throw ValidationError("quality_text must be non-empty");
    auto check_ranges = [](const AugmentRanges& r, const char* name) {
        if (r.brightness < 0 || r.contrast < 0 || r.noise_sigma < 0 || r.blur_radius < 0) {
            throw ValidationError(std::string(name) + " augment ranges must be >= 0");
        }
    };
    check_ranges(weak_augment, "weak");
    check_ranges(strong_augment, "strong");
    // Strong ranges must contain the weak ones.
    if (strong_augment.brightness < weak_augment.brightness ||
        strong_augment.contrast < weak_augment.contrast ||
        strong_augment.noise_sigma < weak_augment.noise_sigma ||
        strong_augment.blur_radius < weak_augment.blur_radius) {
        throw ValidationError("strong augment ranges must contain the weak ranges");
    }
}

ModelConfig paper_preset() {
    return ModelConfig{};
}

ModelConfig desk_scale_preset() {
    ModelConfig cfg;
    cfg.level_depths = {1, 1, 1, 1};
    cfg.level_heads = {1, 1, 2, 2};
    cfg.level_channels = {8, 16, 16, 32};
    cfg.refinement_blocks = 1;
    cfg.crop_size = 64;
    cfg.optimizer.batch_size = 2;
    cfg.optimizer.total_iterations = 2000;
    cfg.optimizer.learning_rate = 2e-3;
    cfg.prompt_count = 4;
    cfg.embed_dims.prompt = 32;
    cfg.mask_base = 8;
    cfg.checkpoint_every = 500;
    return cfg;
}

namespace {

// One assignment target per key keeps parse/serialize in lockstep.
struct KeyHandlers {
    std::function<void(ModelConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const ModelConfig&)> get;
};

std::map<std::string, KeyHandlers> build_key_table() {
    std::map<std::string, KeyHandlers> t;
    auto add = [&t](const std::string& key, auto set, auto get) {
        t[key] = KeyHandlers{set, get};
    };

    add("model.level_depths",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.level_depths = parse_int_list(k, v);
        },
        [](const ModelConfig& c) { return fmt_int_list(c.level_depths); });
    add("model.level_heads",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.level_heads = parse_int_list(k, v);
        },
        [](const ModelConfig& c) { return fmt_int_list(c.level_heads); });
    add("model.level_channels",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.level_channels = parse_int_list(k, v);
        },
        [](const ModelConfig& c) { return fmt_int_list(c.level_channels); });
    add("model.refinement_blocks",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.refinement_blocks = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.refinement_blocks); });
    for (const std::string& stage : injection_stage_names()) {
        add("model.injection." + stage,
            [stage](ModelConfig& c, const std::string&, const std::string& v) {
                const InjectionModule m = injection_module_from_string(v);
                if (m == InjectionModule::none) {
                    c.injection_plan.erase(stage);
                } else {
                    c.injection_plan[stage] = m;
                }
            },
            [stage](const ModelConfig& c) {
                auto it = c.injection_plan.find(stage);
                return to_string(it == c.injection_plan.end() ? InjectionModule::none : it->second);
            });
    }
    add("model.perception_order",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            const auto parts = split(v, ',');
            if (parts.size() != 3) {
                throw ConfigError("config key '" + k + "': expected three stages");
            }
            for (int i = 0; i < 3; ++i) {
                c.perception_order[static_cast<std::size_t>(i)] =
                    perception_stage_from_string(parts[static_cast<std::size_t>(i)]);
            }
        },
        [](const ModelConfig& c) {
            return to_string(c.perception_order[0]) + "," + to_string(c.perception_order[1]) +
                   "," + to_string(c.perception_order[2]);
        });
    add("model.prompt_count",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.prompt_count = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.prompt_count); });
    add("model.embed.quality",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.embed_dims.quality = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.embed_dims.quality); });
    add("model.embed.clip",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.embed_dims.clip = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.embed_dims.clip); });
    add("model.embed.prompt",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.embed_dims.prompt = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.embed_dims.prompt); });
    add("model.mask_base",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.mask_base = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.mask_base); });
    add("model.dam_content_as_query",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.dam_content_as_query = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.dam_content_as_query ? "true" : "false"; });

    add("guidance.use_iqa",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.use_iqa = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.use_iqa ? "true" : "false"; });
    add("guidance.use_sgu",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.use_sgu = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.use_sgu ? "true" : "false"; });
    add("guidance.use_ti",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.use_ti = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.use_ti ? "true" : "false"; });
    add("guidance.quality_text",
        [](ModelConfig& c, const std::string&, const std::string& v) { c.quality_text = v; },
        [](const ModelConfig& c) { return c.quality_text; });
    add("guidance.mask_mode",
        [](ModelConfig& c, const std::string&, const std::string& v) { c.mask_mode = v; },
        [](const ModelConfig& c) { return c.mask_mode; });
    add("guidance.mask_cells",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.mask_cells = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.mask_cells); });

    add("loss.alpha",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.loss_alpha = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.loss_alpha); });
    add("loss.gamma",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.loss_gamma = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.loss_gamma); });
    add("loss.gamma_linear_decay",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.gamma_linear_decay = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.gamma_linear_decay ? "true" : "false"; });
    add("loss.use_icrm",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.use_icrm = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.use_icrm ? "true" : "false"; });
    add("loss.lambda1",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.experimental_lambda1 = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.experimental_lambda1); });
    add("loss.lambda2",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.experimental_lambda2 = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.experimental_lambda2); });

    add("optimizer.beta1",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.beta1 = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.optimizer.beta1); });
    add("optimizer.beta2",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.beta2 = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.optimizer.beta2); });
    add("optimizer.learning_rate",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.learning_rate = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.optimizer.learning_rate); });
    add("optimizer.weight_decay",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.weight_decay = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.optimizer.weight_decay); });
    add("optimizer.batch_size",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.batch_size = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.optimizer.batch_size); });
    add("optimizer.total_iterations",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.total_iterations = parse_int(k, v);
        },
        [](const ModelConfig& c) { return std::to_string(c.optimizer.total_iterations); });
    add("optimizer.grad_clip",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.grad_clip = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.optimizer.grad_clip); });
    add("optimizer.cosine_lr",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.optimizer.cosine_lr = parse_bool(k, v);
        },
        [](const ModelConfig& c) { return c.optimizer.cosine_lr ? "true" : "false"; });

    add("train.crop_size",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.crop_size = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.crop_size); });
    add("train.mask_dropout_rate",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.mask_dropout_rate = parse_double(k, v);
        },
        [](const ModelConfig& c) { return fmt_double(c.mask_dropout_rate); });
    add("train.checkpoint_every",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.checkpoint_every = static_cast<int>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.checkpoint_every); });
    add("train.seed",
        [](ModelConfig& c, const std::string& k, const std::string& v) {
            c.seed = static_cast<std::uint64_t>(parse_int(k, v));
        },
        [](const ModelConfig& c) { return std::to_string(c.seed); });

    auto add_aug = [&add](const std::string& prefix, AugmentRanges ModelConfig::* field) {
        add(prefix + ".brightness",
            [field](ModelConfig& c, const std::string& k, const std::string& v) {
                (c.*field).brightness = parse_double(k, v);
            },
            [field](const ModelConfig& c) { return fmt_double((c.*field).brightness); });
        add(prefix + ".contrast",
            [field](ModelConfig& c, const std::string& k, const std::string& v) {
                (c.*field).contrast = parse_double(k, v);
            },
            [field](const ModelConfig& c) { return fmt_double((c.*field).contrast); });
        add(prefix + ".noise_sigma",
            [field](ModelConfig& c, const std::string& k, const std::string& v) {
                (c.*field).noise_sigma = parse_double(k, v);
            },
            [field](const ModelConfig& c) { return fmt_double((c.*field).noise_sigma); });
        add(prefix + ".blur_radius",
            [field](ModelConfig& c, const std::string& k, const std::string& v) {
                (c.*field).blur_radius = parse_double(k, v);
            },
            [field](const ModelConfig& c) { return fmt_double((c.*field).blur_radius); });
    };
    add_aug("augment.weak", &ModelConfig::weak_augment);
    add_aug("augment.strong", &ModelConfig::strong_augment);

    return t;
}

const std::map<std::string, KeyHandlers>& key_table() {
    static const std::map<std::string, KeyHandlers> t = build_key_table();
    return t;
}

} // namespace

ModelConfig parse_config(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line.substr(0, line.find('#')));
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        auto it = key_table().find(key);
        if (it == key_table().end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        it->second.set(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

ModelConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const ModelConfig& cfg) {
    std::string out;
    for (const auto& [key, h] : key_table()) {
        out += key;
        out += " = ";
        out += h.get(cfg);
        out += "\n";
    }
    return out;
}

void save_config(const ModelConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path);
    out << serialize_config(cfg);
}

std::string first_config_difference(const ModelConfig& a, const ModelConfig& b) {
    for (const auto& [key, h] : key_table()) {
        if (h.get(a) != h.get(b)) return key;
    }
    return "";
}

} // namespace clearair
