// SPDX-License-Identifier: Apache-2.0
//
// Conditioning-signal providers. The real external models (an MLLM-based
// IQA scorer, a segmentation foundation model, a degradation-aware CLIP)
// run offline; this module supplies deterministic stubs and file-backed
// ingestion of their precomputed artifacts.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clearair/image.hpp"
#include "clearair/tensor.hpp"

namespace clearair::guidance {

struct QualityQuery {
    ImageTensor image;
    std::string text; // task description; must be non-empty

    void validate() const;
};

enum class EmbeddingSource { stub, file };

struct QualityEmbedding {
    Tensor q; // [D_q]
    EmbeddingSource source = EmbeddingSource::stub;

    void validate(int expected_dim) const;
};

struct ClipEmbeddings {
    Tensor content;     // [512]
    Tensor degradation; // [512]

    void validate() const;
};

// Uncovered pixels always fall into an appended background segment;
// overlaps resolve to the smallest-area containing mask.
enum class BackgroundPolicy { smallest_area_then_background };

struct SemanticMaskSet {
    int height = 0;
    int width = 0;
    std::vector<std::vector<std::uint8_t>> masks; // each H*W, values in {0,1}
    BackgroundPolicy background_policy = BackgroundPolicy::smallest_area_then_background;

    int count() const { return static_cast<int>(masks.size()); }
    void validate() const; // each mask has >= 1 active pixel
};

// Exact partition of the H*W grid into n_segments labeled regions.
struct LabelMap {
    int height = 0;
    int width = 0;
    int n_segments = 0;
    std::vector<int> labels; // H*W entries in [0, n_segments)

    void validate() const;
};

// Assigns every pixel to exactly one segment: smallest-area containing
// mask wins; uncovered pixels form a trailing background segment. Labels
// are compacted to the non-empty segments.
LabelMap resolve_partition(const SemanticMaskSet& ms);

// True iff the mask set is a strict partition (each pixel active in
// exactly one mask).
bool is_strict_partition(const SemanticMaskSet& ms);

// Majority-vote downsampling of a label map to (h, w); ties pick the
// smaller label.
LabelMap downsample_labels(const LabelMap& lm, int h, int w);

// Reflect-pads a label map on the bottom/right to (h, w).
LabelMap pad_labels(const LabelMap& lm, int h, int w);

// --- stub providers ------------------------------------------------------

QualityEmbedding quality_embed_stub(const QualityQuery& query, int d_q);

enum class MaskStubMode { grid, quantile };

SemanticMaskSet semantic_masks_stub(const ImageTensor& img, MaskStubMode mode, int cells_or_bins);

ClipEmbeddings clip_embed_stub(const ImageTensor& img);

// Drops each mask independently with probability `rate`; dropped pixels
// (plus any previously uncovered ones) join a single appended background
// segment. rate 0 returns the input unchanged.
SemanticMaskSet mask_dropout(const SemanticMaskSet& ms, double rate, std::uint64_t seed);

// --- embedding artifact container ----------------------------------------
//
// Binary layout (little-endian):
//   magic "CAIREMB1" | u32 dim | u32 count
//   count records of: u16 id_len | id bytes | dim float32 values

void write_embedding_file(const std::string& path, int dim,
                          const std::map<std::string, std::vector<float>>& records);

class EmbeddingFile {
public:
    explicit EmbeddingFile(const std::string& path);
    int dim() const { return dim_; }
    // Throws ProviderError when the id is absent.
    Tensor lookup(const std::string& id) const;

private:
    int dim_ = 0;
    std::string path_;
    std::map<std::string, std::vector<float>> records_;
};

QualityEmbedding quality_embed_file(const QualityQuery& query, const std::string& artifact_path,
                                    const std::string& image_id, int expected_dim);
ClipEmbeddings clip_embed_file(const std::string& image_id, const std::string& artifact_path);

// --- mask artifact container ----------------------------------------------
//
// Binary layout (little-endian):
//   magic "CAIRMSK1" | u32 count
//   count records of: u16 id_len | id | u32 H | u32 W | u32 n_masks,
//   each mask: u32 n_runs | n_runs u32 run lengths, row-major,
//   alternating zero-runs and one-runs starting with zeros.

void write_mask_file(const std::string& path, const std::map<std::string, SemanticMaskSet>& records);
SemanticMaskSet read_mask_record(const std::string& path, const std::string& id);

// --- provider interfaces ----------------------------------------------------

class QualityProvider {
public:
    virtual ~QualityProvider() = default;
    virtual QualityEmbedding embed(const QualityQuery& query, const std::string& image_id) = 0;
};

class MaskProvider {
public:
    virtual ~MaskProvider() = default;
    virtual SemanticMaskSet masks(const ImageTensor& img, const std::string& image_id) = 0;
};

class ClipProvider {
public:
    virtual ~ClipProvider() = default;
    virtual ClipEmbeddings embed(const ImageTensor& img, const std::string& image_id) = 0;
};

class StubQualityProvider : public QualityProvider {
public:
    explicit StubQualityProvider(int d_q) : d_q_(d_q) {}
    QualityEmbedding embed(const QualityQuery& query, const std::string&) override {
        return quality_embed_stub(query, d_q_);
    }

private:
    int d_q_;
};

class FileQualityProvider : public QualityProvider {
public:
    FileQualityProvider(std::string path, int d_q) : path_(std::move(path)), d_q_(d_q) {}
    QualityEmbedding embed(const QualityQuery& query, const std::string& image_id) override {
        return quality_embed_file(query, path_, image_id, d_q_);
    }

private:
    std::string path_;
    int d_q_;
};

class StubMaskProvider : public MaskProvider {
public:
    StubMaskProvider(MaskStubMode mode, int cells) : mode_(mode), cells_(cells) {}
    SemanticMaskSet masks(const ImageTensor& img, const std::string&) override {
        return semantic_masks_stub(img, mode_, cells_);
    }

private:
    MaskStubMode mode_;
    int cells_;
};

class FileMaskProvider : public MaskProvider {
public:
    explicit FileMaskProvider(std::string path) : path_(std::move(path)) {}
    SemanticMaskSet masks(const ImageTensor&, const std::string& image_id) override {
        return read_mask_record(path_, image_id);
    }

private:
    std::string path_;
};

class StubClipProvider : public ClipProvider {
public:
    ClipEmbeddings embed(const ImageTensor& img, const std::string&) override {
        return clip_embed_stub(img);
    }
};

class FileClipProvider : public ClipProvider {
public:
    explicit FileClipProvider(std::string path) : path_(std::move(path)) {}
    ClipEmbeddings embed(const ImageTensor&, const std::string& image_id) override {
        return clip_embed_file(image_id, path_);
    }

private:
    std::string path_;
};

// Per-image conditioning handed to the backbone. Components are optional;
// a missing component only matters at its enabled injection points.
struct GuidanceBundle {
    std::optional<QualityEmbedding> quality;
    std::optional<SemanticMaskSet> masks;
    std::optional<ClipEmbeddings> clip;
};

// Provider triple used by training/evaluation.
struct GuidanceProviders {
    std::shared_ptr<QualityProvider> quality;
    std::shared_ptr<MaskProvider> mask;
    std::shared_ptr<ClipProvider> clip;

    GuidanceBundle bundle_for(const ImageTensor& img, const std::string& image_id,
                              const std::string& quality_text) const;
};

// Stub triple configured from the model config fields.
GuidanceProviders stub_providers(int d_q, MaskStubMode mode, int cells);

} // namespace clearair::guidance
