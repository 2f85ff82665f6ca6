// SPDX-License-Identifier: Apache-2.0

#include "clearair/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "clearair/errors.hpp"
#include "clearair/rng.hpp"

namespace clearair::guidance {

void QualityQuery::validate() const {
    image.validate();
    if (text.empty()) throw ValidationError("quality query text must be non-empty");
}

void QualityEmbedding::validate(int expected_dim) const {
    if (q.ndim() != 1 || q.dim(0) != expected_dim) {
        throw ValidationError("quality embedding must have length " + std::to_string(expected_dim) +
                              ", got " + std::to_string(q.size()));
    }
    if (!q.all_finite()) throw ValidationError("quality embedding must be finite");
}

void ClipEmbeddings::validate() const {
    if (content.ndim() != 1 || content.dim(0) != 512) {
        throw ValidationError("content embedding must have length 512");
    }
    if (degradation.ndim() != 1 || degradation.dim(0) != 512) {
        throw ValidationError("degradation embedding must have length 512");
    }
    if (!content.all_finite() || !degradation.all_finite()) {
        throw ValidationError("clip embeddings must be finite");
    }
}

void SemanticMaskSet::validate() const {
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].size() != hw) {
            throw ValidationError("mask " + std::to_string(i) + " has wrong size");
        }
        bool any = false;
        for (std::uint8_t v : masks[i]) {
            if (v > 1) throw ValidationError("masks must be binary");
            any = any || v == 1;
        }
        if (!any) throw ValidationError("mask " + std::to_string(i) + " has no active pixel");
    }
}

void LabelMap::validate() const {
    if (static_cast<std::int64_t>(labels.size()) != static_cast<std::int64_t>(height) * width) {
        throw ValidationError("label map size mismatch");
    }
    for (int l : labels) {
        if (l < 0 || l >= n_segments) throw ValidationError("label out of range");
    }
}

LabelMap resolve_partition(const SemanticMaskSet& ms) {
    ms.validate();
    const std::size_t hw = static_cast<std::size_t>(ms.height) * ms.width;
    std::vector<std::int64_t> areas(ms.masks.size(), 0);
    for (std::size_t m = 0; m < ms.masks.size(); ++m) {
        for (std::uint8_t v : ms.masks[m]) areas[m] += v;
    }
    const int background = static_cast<int>(ms.masks.size());
    std::vector<int> raw(hw, background);
    for (std::size_t p = 0; p < hw; ++p) {
        std::int64_t best_area = -1;
        for (std::size_t m = 0; m < ms.masks.size(); ++m) {
            if (ms.masks[m][p] && (best_area < 0 || areas[m] < best_area)) {
                best_area = areas[m];
                raw[p] = static_cast<int>(m);
            }
        }
    }
    // Compact to non-empty segments, keeping mask order, background last.
    std::vector<int> remap(ms.masks.size() + 1, -1);
    int next = 0;
    for (std::size_t p = 0; p < hw; ++p) {
        (void)p;
    }
    for (std::size_t m = 0; m <= ms.masks.size(); ++m) {
        const bool used = std::any_of(raw.begin(), raw.end(),
                                      [&](int l) { return l == static_cast<int>(m); });
        if (used) remap[m] = next++;
    }
    LabelMap lm;
    lm.height = ms.height;
    lm.width = ms.width;
    lm.n_segments = next;
    lm.labels.resize(hw);
    for (std::size_t p = 0; p < hw; ++p) lm.labels[p] = remap[static_cast<std::size_t>(raw[p])];
    lm.validate();
    return lm;
}

bool is_strict_partition(const SemanticMaskSet& ms) {
    const std::size_t hw = static_cast<std::size_t>(ms.height) * ms.width;
    std::vector<int> cover(hw, 0);
    for (const auto& m : ms.masks) {
        if (m.size() != hw) return false;
        for (std::size_t p = 0; p < hw; ++p) cover[p] += m[p];
    }
    return std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; });
}

LabelMap downsample_labels(const LabelMap& lm, int h, int w) {
    if (h == lm.height && w == lm.width) return lm;
    LabelMap out;
    out.height = h;
    out.width = w;
    out.n_segments = lm.n_segments;
    out.labels.resize(static_cast<std::size_t>(h) * w);
    std::vector<int> counts(static_cast<std::size_t>(lm.n_segments));
    for (int y = 0; y < h; ++y) {
        const int sy0 = static_cast<int>(static_cast<std::int64_t>(y) * lm.height / h);
        const int sy1 = std::max(sy0 + 1, static_cast<int>(static_cast<std::int64_t>(y + 1) *
                                                           lm.height / h));
        for (int x = 0; x < w; ++x) {
            const int sx0 = static_cast<int>(static_cast<std::int64_t>(x) * lm.width / w);
            const int sx1 = std::max(sx0 + 1, static_cast<int>(static_cast<std::int64_t>(x + 1) *
                                                               lm.width / w));
            std::fill(counts.begin(), counts.end(), 0);
            for (int yy = sy0; yy < sy1; ++yy) {
                for (int xx = sx0; xx < sx1; ++xx) {
                    ++counts[static_cast<std::size_t>(
                        lm.labels[static_cast<std::size_t>(yy) * lm.width + xx])];
                }
            }
            int best = 0;
            for (int s = 1; s < lm.n_segments; ++s) {
                if (counts[static_cast<std::size_t>(s)] > counts[static_cast<std::size_t>(best)]) {
                    best = s;
                }
            }
            out.labels[static_cast<std::size_t>(y) * w + x] = best;
        }
    }
    // Compact away segments that lost every pixel.
    std::vector<int> remap(static_cast<std::size_t>(lm.n_segments), -1);
    int next = 0;
    for (int s = 0; s < lm.n_segments; ++s) {
        if (std::find(out.labels.begin(), out.labels.end(), s) != out.labels.end()) {
            remap[static_cast<std::size_t>(s)] = next++;
        }
    }
    for (int& l : out.labels) l = remap[static_cast<std::size_t>(l)];
    out.n_segments = next;
    out.validate();
    return out;
}

LabelMap pad_labels(const LabelMap& lm, int h, int w) {
    if (h == lm.height && w == lm.width) return lm;
    if (h < lm.height || w < lm.width) throw ShapeError("pad_labels: target smaller than source");
    auto refl = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
    LabelMap out;
    out.height = h;
    out.width = w;
    out.n_segments = lm.n_segments;
    out.labels.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        const int sy = refl(y, lm.height);
        for (int x = 0; x < w; ++x) {
            out.labels[static_cast<std::size_t>(y) * w + x] =
                lm.labels[static_cast<std::size_t>(sy) * lm.width + refl(x, lm.width)];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// stubs

namespace {

constexpr std::uint64_t kStubProjectionSeed = 0xC1EA9A12AD05E11ULL;

// Fixed seeded projection matrix, rows scaled by 1/sqrt(in_dim).
Tensor fixed_projection(int out_dim, int in_dim, const char* tag) {
    Rng rng(derive_seed(kStubProjectionSeed, tag));
    Tensor p({out_dim, in_dim});
    const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (std::int64_t i = 0; i < p.size(); ++i) p[i] = rng.normal() * s;
    return p;
}

Tensor project(const Tensor& p, const std::vector<double>& f) {
    Tensor out({p.dim(0)});
    for (int i = 0; i < p.dim(0); ++i) {
        double acc = 0.0;
        for (int j = 0; j < p.dim(1); ++j) acc += p.at(i, j) * f[static_cast<std::size_t>(j)];
        out[i] = acc;
    }
    return out;
}

void l2_normalize(Tensor& v) {
    double s = 0.0;
    for (std::int64_t i = 0; i < v.size(); ++i) s += v[i] * v[i];
    const double inv = 1.0 / std::sqrt(s + 1e-12);
    for (std::int64_t i = 0; i < v.size(); ++i) v[i] *= inv;
}

struct ChannelStats {
    double mean = 0.0;
    double var = 0.0;
    double grad_mean = 0.0;
    double lap_energy = 0.0;
};

ChannelStats channel_stats(const ImageTensor& img, int c) {
    const int h = img.height(), w = img.width();
    ChannelStats st;
    double acc = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) acc += img.at(c, y, x);
    }
    st.mean = acc / (static_cast<double>(h) * w);
    double var = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double d = img.at(c, y, x) - st.mean;
            var += d * d;
        }
    }
    st.var = var / (static_cast<double>(h) * w);
    double grad = 0.0;
    std::int64_t grad_n = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x + 1 < w; ++x) {
            grad += std::fabs(img.at(c, y, x + 1) - img.at(c, y, x));
            ++grad_n;
        }
    }
    for (int y = 0; y + 1 < h; ++y) {
        for (int x = 0; x < w; ++x) {
            grad += std::fabs(img.at(c, y + 1, x) - img.at(c, y, x));
            ++grad_n;
        }
    }
    st.grad_mean = grad_n ? grad / static_cast<double>(grad_n) : 0.0;
    double lap = 0.0;
    std::int64_t lap_n = 0;
    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            const double v = 4.0 * img.at(c, y, x) - img.at(c, y - 1, x) - img.at(c, y + 1, x) -
                             img.at(c, y, x - 1) - img.at(c, y, x + 1);
            lap += v * v;
            ++lap_n;
        }
    }
    st.lap_energy = lap_n ? lap / static_cast<double>(lap_n) : 0.0;
    return st;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace

QualityEmbedding quality_embed_stub(const QualityQuery& query, int d_q) {
    query.validate();
    // 12 image statistics (3 channels, replicated for grayscale) plus
    // 4 values derived from the text hash.
    std::vector<double> f(16, 0.0);
    const int c = query.image.channels();
    for (int i = 0; i < 3; ++i) {
        const ChannelStats st = channel_stats(query.image, std::min(i, c - 1));
        f[static_cast<std::size_t>(4 * i) + 0] = st.mean;
        f[static_cast<std::size_t>(4 * i) + 1] = st.var;
        f[static_cast<std::size_t>(4 * i) + 2] = st.grad_mean;
        f[static_cast<std::size_t>(4 * i) + 3] = st.lap_energy;
    }
    const std::uint64_t h = fnv1a(query.text);
    for (int k = 0; k < 4; ++k) {
        f[static_cast<std::size_t>(12 + k)] =
            static_cast<double>((h >> (16 * k)) & 0xFFFF) / 65535.0;
    }
    QualityEmbedding out;
    out.q = project(fixed_projection(d_q, 16, "quality"), f);
    out.source = EmbeddingSource::stub;
    return out;
}

SemanticMaskSet semantic_masks_stub(const ImageTensor& img, MaskStubMode mode, int cells_or_bins) {
    if (cells_or_bins < 1) throw ParameterError("semantic_masks_stub: need >= 1 cell/bin");
    const int h = img.height(), w = img.width();
    SemanticMaskSet out;
    out.height = h;
    out.width = w;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    if (mode == MaskStubMode::grid) {
        int rows = std::max(1, static_cast<int>(std::floor(std::sqrt(cells_or_bins))));
        while (cells_or_bins % rows != 0) --rows;
        const int cols = cells_or_bins / rows;
        for (int r = 0; r < rows; ++r) {
            const int y0 = static_cast<int>(static_cast<std::int64_t>(r) * h / rows);
            const int y1 = static_cast<int>(static_cast<std::int64_t>(r + 1) * h / rows);
            for (int cc = 0; cc < cols; ++cc) {
                const int x0 = static_cast<int>(static_cast<std::int64_t>(cc) * w / cols);
                const int x1 = static_cast<int>(static_cast<std::int64_t>(cc + 1) * w / cols);
                if (y1 <= y0 || x1 <= x0) continue; // cell fell below pixel size
                std::vector<std::uint8_t> m(hw, 0);
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) m[static_cast<std::size_t>(y) * w + x] = 1;
                }
                out.masks.push_back(std::move(m));
            }
        }
    } else {
        const Tensor luma = luminance(img);
        std::vector<double> sorted(luma.data(), luma.data() + luma.size());
        std::sort(sorted.begin(), sorted.end());
        const int bins = cells_or_bins;
        std::vector<double> thresholds(static_cast<std::size_t>(bins));
        for (int b = 0; b < bins; ++b) {
            thresholds[static_cast<std::size_t>(b)] =
                sorted[static_cast<std::size_t>(static_cast<std::int64_t>(b) * luma.size() / bins)];
        }
        std::vector<std::vector<std::uint8_t>> bins_masks(
            static_cast<std::size_t>(bins), std::vector<std::uint8_t>(hw, 0));
        for (std::size_t p = 0; p < hw; ++p) {
            const double v = luma[static_cast<std::int64_t>(p)];
            int b = 0;
            for (int k = bins - 1; k >= 0; --k) {
                if (v >= thresholds[static_cast<std::size_t>(k)]) {
                    b = k;
                    break;
                }
            }
            bins_masks[static_cast<std::size_t>(b)][p] = 1;
        }
        for (auto& m : bins_masks) {
            if (std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) {
                out.masks.push_back(std::move(m));
            }
        }
    }
    out.validate();
    return out;
}

ClipEmbeddings clip_embed_stub(const ImageTensor& img) {
    const int h = img.height(), w = img.width(), c = img.channels();
    // Content: 8x8 per-channel block means plus channel moments.
    std::vector<double> content_f;
    content_f.reserve(200);
    for (int ci = 0; ci < 3; ++ci) {
        const int src_c = std::min(ci, c - 1);
        for (int by = 0; by < 8; ++by) {
            const int y0 = static_cast<int>(static_cast<std::int64_t>(by) * h / 8);
            const int y1 = std::max(y0 + 1, static_cast<int>(static_cast<std::int64_t>(by + 1) * h / 8));
            for (int bx = 0; bx < 8; ++bx) {
                const int x0 = static_cast<int>(static_cast<std::int64_t>(bx) * w / 8);
                const int x1 =
                    std::max(x0 + 1, static_cast<int>(static_cast<std::int64_t>(bx + 1) * w / 8));
                double acc = 0.0;
                for (int y = std::min(y0, h - 1); y < std::min(y1, h); ++y) {
                    for (int x = std::min(x0, w - 1); x < std::min(x1, w); ++x) {
                        acc += img.at(src_c, y, x);
                    }
                }
                const int n = std::max(1, (std::min(y1, h) - std::min(y0, h - 1)) *
                                              (std::min(x1, w) - std::min(x0, w - 1)));
                content_f.push_back(acc / n);
            }
        }
        const ChannelStats st = channel_stats(img, src_c);
        content_f.push_back(st.mean);
        content_f.push_back(std::sqrt(st.var));
    }
    content_f.resize(200, 0.0);

    // Degradation: statistics of the high-frequency residual x - box3(x).
    std::vector<double> deg_f;
    auto box3_residual = [&](int ci, std::vector<double>& r) {
        auto refl = [](int i, int n) {
            if (i < 0) return -i;
            if (i >= n) return 2 * n - 2 - i;
            return i;
        };
        r.resize(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        acc += img.at(ci, refl(y + dy, h), refl(x + dx, w));
                    }
                }
                r[static_cast<std::size_t>(y) * w + x] = img.at(ci, y, x) - acc / 9.0;
            }
        }
    };
    std::vector<double> lum_r;
    for (int ci = 0; ci < 3; ++ci) {
        std::vector<double> r;
        box3_residual(std::min(ci, c - 1), r);
        if (ci == 0) lum_r = r;
        double mean_abs = 0.0, rms = 0.0;
        for (double v : r) {
            mean_abs += std::fabs(v);
            rms += v * v;
        }
        mean_abs /= static_cast<double>(r.size());
        rms = std::sqrt(rms / static_cast<double>(r.size()));
        double grad = 0.0;
        std::int64_t gn = 0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x + 1 < w; ++x) {
                grad += std::fabs(r[static_cast<std::size_t>(y) * w + x + 1] -
                                  r[static_cast<std::size_t>(y) * w + x]);
                ++gn;
            }
        }
        deg_f.push_back(mean_abs);
        deg_f.push_back(rms);
        deg_f.push_back(gn ? grad / static_cast<double>(gn) : 0.0);
    }
    // Histogram of |residual| magnitudes on the first plane.
    std::vector<double> hist(8, 0.0);
    for (double v : lum_r) {
        const double a = std::min(std::fabs(v), 0.5 - 1e-12);
        hist[static_cast<std::size_t>(a / 0.5 * 8)] += 1.0;
    }
    for (double& v : hist) v /= static_cast<double>(lum_r.size());
    deg_f.insert(deg_f.end(), hist.begin(), hist.end());
    deg_f.resize(20, 0.0);

    ClipEmbeddings out;
    out.content = project(fixed_projection(512, 200, "clip_content"), content_f);
    out.degradation = project(fixed_projection(512, 20, "clip_degradation"), deg_f);
    l2_normalize(out.content);
    l2_normalize(out.degradation);
    return out;
}

SemanticMaskSet mask_dropout(const SemanticMaskSet& ms, double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate > 1.0) throw ParameterError("mask_dropout: rate must lie in [0,1]");
    if (rate == 0.0) return ms;
    const std::size_t hw = static_cast<std::size_t>(ms.height) * ms.width;
    Rng rng(derive_seed(seed, "mask_dropout"));
    SemanticMaskSet out;
    out.height = ms.height;
    out.width = ms.width;
    std::vector<std::uint8_t> covered(hw, 0);
    std::vector<std::uint8_t> background(hw, 0);
    for (const auto& m : ms.masks) {
        const bool drop = rng.bernoulli(rate);
        for (std::size_t p = 0; p < hw; ++p) {
            if (m[p]) covered[p] = 1;
        }
        if (drop) {
            for (std::size_t p = 0; p < hw; ++p) {
                if (m[p]) background[p] = 1;
            }
        } else {
            out.masks.push_back(m);
        }
    }
    // Previously uncovered pixels also belong to the background segment.
    for (std::size_t p = 0; p < hw; ++p) {
        if (!covered[p]) background[p] = 1;
    }
    if (std::any_of(background.begin(), background.end(), [](std::uint8_t v) { return v != 0; })) {
        out.masks.push_back(std::move(background));
    }
    return out;
}

// ---------------------------------------------------------------------------
// artifact files

namespace {

void write_u16(std::ofstream& out, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ofstream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

std::uint16_t read_u16(std::ifstream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

float read_f32(std::ifstream& in) {
    const std::uint32_t bits = read_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

constexpr char kEmbMagic[9] = "CAIREMB1";
constexpr char kMskMagic[9] = "CAIRMSK1";

} // namespace

void write_embedding_file(const std::string& path, int dim,
                          const std::map<std::string, std::vector<float>>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write embedding file: " + path);
    out.write(kEmbMagic, 8);
    write_u32(out, static_cast<std::uint32_t>(dim));
    write_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& [id, vec] : records) {
        if (static_cast<int>(vec.size()) != dim) {
            throw ValidationError("embedding for '" + id + "' has wrong length");
        }
        write_u16(out, static_cast<std::uint16_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
        for (float v : vec) write_f32(out, v);
    }
}

EmbeddingFile::EmbeddingFile(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embedding file: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kEmbMagic, 8) != 0) {
        throw ValidationError("not an embedding artifact file: " + path);
    }
    dim_ = static_cast<int>(read_u32(in));
    const std::uint32_t count = read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t id_len = read_u16(in);
        std::string id(id_len, '\0');
        in.read(id.data(), id_len);
        std::vector<float> vec(static_cast<std::size_t>(dim_));
        for (int j = 0; j < dim_; ++j) vec[static_cast<std::size_t>(j)] = read_f32(in);
        if (!in) throw ValidationError("truncated embedding file: " + path);
        records_[id] = std::move(vec);
    }
}

Tensor EmbeddingFile::lookup(const std::string& id) const {
    auto it = records_.find(id);
    if (it == records_.end()) {
        throw ProviderError("embedding artifact '" + path_ + "' has no record for id '" + id + "'");
    }
    Tensor t({dim_});
    for (int i = 0; i < dim_; ++i) t[i] = static_cast<double>(it->second[static_cast<std::size_t>(i)]);
    return t;
}

QualityEmbedding quality_embed_file(const QualityQuery& query, const std::string& artifact_path,
                                    const std::string& image_id, int expected_dim) {
    query.validate();
    const EmbeddingFile file(artifact_path);
    if (file.dim() != expected_dim) {
        throw ValidationError("quality artifact dimension " + std::to_string(file.dim()) +
                              " does not match configured D_q " + std::to_string(expected_dim));
    }
    QualityEmbedding out;
    out.q = file.lookup(image_id);
    out.source = EmbeddingSource::file;
    return out;
}

ClipEmbeddings clip_embed_file(const std::string& image_id, const std::string& artifact_path) {
    const EmbeddingFile file(artifact_path);
    // One record per image: content followed by degradation.
    if (file.dim() != 1024) {
        throw ValidationError("clip artifact must store 1024-d records (content ++ degradation), got " +
                              std::to_string(file.dim()));
    }
    const Tensor both = file.lookup(image_id);
    ClipEmbeddings out;
    out.content = Tensor({512});
    out.degradation = Tensor({512});
    for (int i = 0; i < 512; ++i) {
        out.content[i] = both[i];
        out.degradation[i] = both[512 + i];
    }
    out.validate();
    return out;
}

void write_mask_file(const std::string& path,
                     const std::map<std::string, SemanticMaskSet>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write mask file: " + path);
    out.write(kMskMagic, 8);
    write_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& [id, ms] : records) {
        write_u16(out, static_cast<std::uint16_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
        write_u32(out, static_cast<std::uint32_t>(ms.height));
        write_u32(out, static_cast<std::uint32_t>(ms.width));
        write_u32(out, static_cast<std::uint32_t>(ms.masks.size()));
        for (const auto& m : ms.masks) {
            // run-length encode, alternating zero/one runs
            std::vector<std::uint32_t> runs;
            std::uint8_t cur = 0;
            std::uint32_t len = 0;
            for (std::uint8_t v : m) {
                if (v == cur) {
                    ++len;
                } else {
                    runs.push_back(len);
                    cur = v;
                    len = 1;
                }
            }
            runs.push_back(len);
            write_u32(out, static_cast<std::uint32_t>(runs.size()));
            for (std::uint32_t r : runs) write_u32(out, r);
        }
    }
}

SemanticMaskSet read_mask_record(const std::string& path, const std::string& id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open mask file: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMskMagic, 8) != 0) {
        throw ValidationError("not a mask artifact file: " + path);
    }
    const std::uint32_t count = read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t id_len = read_u16(in);
        std::string rec_id(id_len, '\0');
        in.read(rec_id.data(), id_len);
        SemanticMaskSet ms;
        ms.height = static_cast<int>(read_u32(in));
        ms.width = static_cast<int>(read_u32(in));
        const std::uint32_t n_masks = read_u32(in);
        const std::size_t hw = static_cast<std::size_t>(ms.height) * ms.width;
        for (std::uint32_t m = 0; m < n_masks; ++m) {
            const std::uint32_t n_runs = read_u32(in);
            std::vector<std::uint8_t> mask(hw, 0);
            std::size_t pos = 0;
            std::uint8_t cur = 0;
            for (std::uint32_t r = 0; r < n_runs; ++r) {
                const std::uint32_t len = read_u32(in);
                if (pos + len > hw) throw ValidationError("mask runs overflow: " + path);
                if (cur) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(pos), len, 1);
                pos += len;
                cur = cur ? 0 : 1;
            }
            if (pos != hw) throw ValidationError("mask runs do not cover the image: " + path);
            ms.masks.push_back(std::move(mask));
        }
        if (!in) throw ValidationError("truncated mask file: " + path);
        if (rec_id == id) return ms;
    }
    throw ProviderError("mask artifact '" + path + "' has no record for id '" + id + "'");
}

GuidanceBundle GuidanceProviders::bundle_for(const ImageTensor& img, const std::string& image_id,
                                             const std::string& quality_text) const {
    GuidanceBundle b;
    if (quality) {
        QualityQuery q{img, quality_text};
        b.quality = quality->embed(q, image_id);
    }
    if (mask) b.masks = mask->masks(img, image_id);
    if (clip) b.clip = clip->embed(img, image_id);
    return b;
}

GuidanceProviders stub_providers(int d_q, MaskStubMode mode, int cells) {
    GuidanceProviders p;
    p.quality = std::make_shared<StubQualityProvider>(d_q);
    p.mask = std::make_shared<StubMaskProvider>(mode, cells);
    p.clip = std::make_shared<StubClipProvider>();
    return p;
}

} // namespace clearair::guidance
