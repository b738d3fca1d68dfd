#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "timnet/common.hpp"

namespace timnet {

// Finding kinds, fixed order everywhere (multi-hot index = kind).
enum FindingKind : int { kOpacity = 0, kEffusion = 1, kDevice = 2 };
constexpr int kNumFindingKinds = 3;

struct DatagenConfig {
    std::int64_t n = 1000;
    std::uint64_t seed = 1;
    int height = 32;
    int width = 32;
    double noise_sigma = 0.05;
    double p_abnormal = 0.5;
    double omission_epsilon = 0.05;  // chance a finding is left out of the report
    double hedge_prob = 0.25;
    int max_len = 32;
};

struct FindingSpec {
    int kind = 0;      // FindingKind
    int side = 0;      // 0 left, 1 right
    int vert = 0;      // 0 upper, 1 lower (effusions always lower)
    int severity = 0;  // 0 mild, 1 moderate, 2 severe
    double jitter_y = 0.0, jitter_x = 0.0;
    double angle = 0.0;  // device line orientation
};

struct BlobSpec {
    double cy = 0.0, cx = 0.0;
    double ry = 1.0, rx = 1.0;
    double intensity = 0.0;
};

/// Full procedural description of one synthetic radiograph; render_scene is a
/// pure function of this.
struct SceneSpec {
    int height = 32, width = 32;
    double noise_sigma = 0.05;
    double base_brightness = 0.18;  // per-scene jitter defeats mean-intensity shortcuts
    std::uint64_t noise_seed = 0;
    std::vector<BlobSpec> blobs;         // normal structures, 0..3
    std::vector<FindingSpec> findings;   // 0..3, distinct (kind, location)
};

/// Token ids: 0 = pad, 1 = unknown, >= 2 from the corpus, contiguous.
class Vocabulary {
public:
    Vocabulary();
    static Vocabulary build(const std::vector<std::string>& texts);
    static Vocabulary load_tsv(const std::string& path);
    void save_tsv(const std::string& path) const;

    int id(const std::string& token) const;  // 1 for unknown tokens
    std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
    const std::vector<std::string>& id_to_token() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> map_;
};

struct PairedItem {
    std::string id;
    SceneSpec scene;
    std::vector<float> image;  // H*W in [0,1], quantized to the 8-bit grid
    std::string report;
    std::vector<int> tokens;   // length max_len
    int binary_label = 0;
    std::array<int, kNumFindingKinds> multihot{0, 0, 0};
};

struct Corpus {
    int height = 0, width = 0;
    int max_len = 0;
    Vocabulary vocab;
    std::vector<PairedItem> items;
    std::int64_t size() const { return static_cast<std::int64_t>(items.size()); }
};

/// Renders pixel values in [0,1], snapped to k/255 so PGM round trips are
/// exact.
std::vector<float> render_scene(const SceneSpec& scene);

/// Lowercases, strips punctuation to spaces, splits on whitespace, maps
/// unknown tokens to id 1, truncates to max_len, right-pads with id 0.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

std::vector<std::string> split_tokens(const std::string& text);

/// Deterministic corpus: n scenes with P(abnormal) = p_abnormal, reports from
/// the template grammar, vocabulary built over the generated reports.
Corpus generate_corpus(const DatagenConfig& cfg);

Corpus slice_corpus(const Corpus& corpus, std::int64_t start, std::int64_t count);

/// Writes <dir>/images/<id>.pgm, reports.tsv, labels.tsv, vocab.tsv,
/// manifest.json.
void export_corpus(const Corpus& corpus, const std::string& out_dir, const DatagenConfig* config_echo = nullptr);

struct IngestResult {
    Corpus corpus;
    int n_skipped = 0;
    std::vector<std::string> warnings;
};

/// Loads <id>.pgm images plus id<TAB>text reports (and optional
/// id<TAB>class,indices labels). Ids missing a counterpart in any provided
/// file are skipped with a warning. vocab_tsv empty -> vocabulary is built
/// from the ingested reports.
IngestResult ingest_external(const std::string& image_dir, const std::string& reports_tsv,
                             const std::string& labels_tsv = "", const std::string& vocab_tsv = "",
                             int max_len = 32);

}  // namespace timnet
