#include "timnet/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "timnet/pgm.hpp"

namespace fs = std::filesystem;

namespace timnet {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
    tokens_ = {"<pad>", "<unk>"};
    map_["<pad>"] = 0;
    map_["<unk>"] = 1;
}

std::vector<std::string> split_tokens(const std::string& text) {
    std::string norm;
    norm.reserve(text.size());
    for (char c : text) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            norm.push_back(static_cast<char>(std::tolower(u)));
        } else {
            norm.push_back(' ');
        }
    }
    std::vector<std::string> out;
    std::istringstream iss(norm);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
    std::set<std::string> uniq;
    for (const auto& t : texts)
        for (auto& tok : split_tokens(t)) uniq.insert(tok);
    Vocabulary v;
    for (const auto& tok : uniq) {
        v.map_[tok] = static_cast<int>(v.tokens_.size());
        v.tokens_.push_back(tok);
    }
    return v;
}

Vocabulary Vocabulary::load_tsv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("vocabulary: cannot open " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.map_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("vocabulary: " + path + ":" + std::to_string(lineno) + ": missing tab");
        const std::string tok = line.substr(0, tab);
        const int id = std::stoi(line.substr(tab + 1));
        if (id != static_cast<int>(v.tokens_.size()))
            throw std::runtime_error("vocabulary: " + path + ":" + std::to_string(lineno) + ": ids must be contiguous");
        v.tokens_.push_back(tok);
        v.map_[tok] = id;
    }
    if (v.tokens_.size() < 2 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<unk>")
        throw std::runtime_error("vocabulary: " + path + ": ids 0/1 must be <pad>/<unk>");
    return v;
}

void Vocabulary::save_tsv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("vocabulary: cannot open " + path + " for writing");
    for (std::size_t i = 0; i < tokens_.size(); ++i) f << tokens_[i] << "\t" << i << "\n";
}

int Vocabulary::id(const std::string& token) const {
    const auto it = map_.find(token);
    return it == map_.end() ? 1 : it->second;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(max_len));
    for (const auto& tok : split_tokens(text)) {
        if (static_cast<int>(ids.size()) >= max_len) break;
        ids.push_back(vocab.id(tok));
    }
    ids.resize(static_cast<std::size_t>(max_len), 0);
    return ids;
}

// ---------------------------------------------------------------------------
// Scene sampling and rendering
// ---------------------------------------------------------------------------

namespace {

struct SeverityParams {
    double radius;      // opacity
    double wedge;       // effusion height
    double line_len;    // device
    double intensity;
};

const SeverityParams kSeverity[3] = {
    {3.0, 5.0, 9.0, 0.38},
    {3.8, 7.0, 12.0, 0.52},
    {4.8, 9.0, 15.0, 0.68},
};

double quadrant_y(const SceneSpec& s, int vert) { return (vert == 0 ? 0.30 : 0.68) * s.height; }
double quadrant_x(const SceneSpec& s, int side) { return (side == 0 ? 0.28 : 0.72) * s.width; }

void add_opacity(std::vector<double>& img, const SceneSpec& s, const FindingSpec& f) {
    const SeverityParams& p = kSeverity[f.severity];
    const double cy = quadrant_y(s, f.vert) + f.jitter_y;
    const double cx = quadrant_x(s, f.side) + f.jitter_x;
    const double r = p.radius;
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const double d2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (r * r);
            if (d2 < 1.0) img[static_cast<std::size_t>(y * s.width + x)] += p.intensity * std::sqrt(1.0 - d2);
        }
    }
}

void add_effusion(std::vector<double>& img, const SceneSpec& s, const FindingSpec& f) {
    const SeverityParams& p = kSeverity[f.severity];
    const double h = p.wedge + f.jitter_y;
    const int y0 = std::max(0, s.height - static_cast<int>(std::lround(h)));
    const int half = s.width / 2;
    for (int y = y0; y < s.height; ++y) {
        // Wedge widens toward the bottom row.
        const double depth = static_cast<double>(y - y0 + 1) / (s.height - y0);
        const int span = std::max(1, static_cast<int>(std::lround(depth * half * 0.9)));
        for (int k = 0; k < span; ++k) {
            const int x = f.side == 0 ? k : s.width - 1 - k;
            img[static_cast<std::size_t>(y * s.width + x)] += p.intensity * (0.6 + 0.4 * depth);
        }
    }
}

void add_device(std::vector<double>& img, const SceneSpec& s, const FindingSpec& f) {
    const SeverityParams& p = kSeverity[f.severity];
    const double cy = quadrant_y(s, f.vert) + f.jitter_y;
    const double cx = quadrant_x(s, f.side) + f.jitter_x;
    const double dy = std::sin(f.angle), dx = std::cos(f.angle);
    const double half_len = p.line_len / 2.0;
    const double thickness = 1.0;
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            // Distance from (x,y) to the segment.
            const double vy = y - cy, vx = x - cx;
            double t = vy * dy + vx * dx;
            t = std::clamp(t, -half_len, half_len);
            const double py = cy + t * dy, px = cx + t * dx;
            const double dist = std::sqrt((y - py) * (y - py) + (x - px) * (x - px));
            if (dist < thickness + 1.0) {
                const double fall = std::max(0.0, 1.0 - dist / (thickness + 1.0));
                img[static_cast<std::size_t>(y * s.width + x)] += p.intensity * fall;
            }
        }
    }
}

}  // namespace

std::vector<float> render_scene(const SceneSpec& s) {
    const std::size_t n = static_cast<std::size_t>(s.height) * static_cast<std::size_t>(s.width);
    std::vector<double> img(n, 0.0);

    // Soft torso-like background.
    const double cy = s.height * 0.5, cx = s.width * 0.5;
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const double e = ((y - cy) * (y - cy)) / (0.36 * s.height * s.height) +
                             ((x - cx) * (x - cx)) / (0.30 * s.width * s.width);
            img[static_cast<std::size_t>(y * s.width + x)] = s.base_brightness + 0.15 * std::exp(-e);
        }
    }

    for (const auto& b : s.blobs) {
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                const double e = ((y - b.cy) * (y - b.cy)) / (2.0 * b.ry * b.ry) +
                                 ((x - b.cx) * (x - b.cx)) / (2.0 * b.rx * b.rx);
                img[static_cast<std::size_t>(y * s.width + x)] += b.intensity * std::exp(-e);
            }
        }
    }

    for (const auto& f : s.findings) {
        switch (f.kind) {
            case kOpacity: add_opacity(img, s, f); break;
            case kEffusion: add_effusion(img, s, f); break;
            case kDevice: add_device(img, s, f); break;
            default: throw std::invalid_argument("render_scene: unknown finding kind");
        }
    }

    Rng noise(s.noise_seed);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double v = img[i] + noise.normal(0.0, s.noise_sigma);
        v = std::clamp(v, 0.0, 1.0);
        const int q = static_cast<int>(std::lround(v * 255.0));
        out[i] = static_cast<float>(q) / 255.0f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report grammar
// ---------------------------------------------------------------------------

namespace {

const char* kSeverityWords[3] = {"mild", "moderate", "severe"};
const char* kSideWords[2] = {"left", "right"};
const char* kVertWords[2] = {"upper", "lower"};

const std::vector<std::string> kHedges = {"likely", "possibly present", "cannot be excluded"};

// Normal-health statements. None of these may contain a finding kind word.
const std::vector<std::string> kBoilerplate = {
    "the lungs are well expanded.",
    "the cardiomediastinal silhouette is within normal limits.",
    "no acute osseous abnormality is seen.",
    "the visualized soft tissues are unremarkable.",
    "the costophrenic angles are sharp.",
    "the heart size is normal.",
    "pulmonary vascularity is within normal limits.",
    "no free air is seen below the diaphragm.",
    "the trachea is midline.",
    "degenerative changes are noted in the spine.",
};

std::string finding_sentence(const FindingSpec& f, Rng& rng, double hedge_prob) {
    const std::string sev = kSeverityWords[f.severity];
    const std::string side = kSideWords[f.side];
    const std::string vert = kVertWords[f.vert];
    const bool hedged = rng.uniform01() < hedge_prob;
    const std::string hedge = kHedges[static_cast<std::size_t>(rng.uniform_int(kHedges.size()))];
    const std::uint64_t variant = rng.uniform_int(2);
    switch (f.kind) {
        case kOpacity:
            if (hedged) return "a " + sev + " opacity in the " + vert + " " + side + " lung is " + hedge + ".";
            return variant == 0 ? "there is a " + sev + " opacity in the " + vert + " " + side + " lung."
                                : "a " + sev + " opacity is seen in the " + vert + " " + side + " lung.";
        case kEffusion:
            if (hedged) return "a " + sev + " effusion in the " + vert + " " + side + " hemithorax is " + hedge + ".";
            return variant == 0 ? "there is a " + sev + " effusion layering in the " + vert + " " + side + " hemithorax."
                                : "a " + sev + " effusion is seen at the " + vert + " " + side + " costophrenic angle.";
        case kDevice:
            if (hedged) return "a " + sev + " device over the " + vert + " " + side + " chest is " + hedge + ".";
            return variant == 0 ? "a " + sev + " support device projects over the " + vert + " " + side + " chest."
                                : "there is a " + sev + " device overlying the " + vert + " " + side + " chest.";
        default:
            throw std::invalid_argument("finding_sentence: unknown kind");
    }
}

std::string make_report(const std::vector<FindingSpec>& findings, Rng& rng, const DatagenConfig& cfg) {
    std::vector<std::string> sentences;
    for (const auto& f : findings) {
        const bool omit = rng.uniform01() < cfg.omission_epsilon;
        const std::string sent = finding_sentence(f, rng, cfg.hedge_prob);  // rng advances even when omitted
        if (!omit) sentences.push_back(sent);
    }
    // Roughly 3 boilerplate sentences per finding sentence.
    std::vector<std::size_t> pool(kBoilerplate.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    rng.shuffle(pool.begin(), pool.end());
    const std::size_t n_boiler = 3;
    for (std::size_t i = 0; i < n_boiler && i < pool.size(); ++i) sentences.push_back(kBoilerplate[pool[i]]);

    std::string report;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        if (i) report += " ";
        report += sentences[i];
    }
    return report;
}

SceneSpec sample_scene(Rng& rng, const DatagenConfig& cfg) {
    SceneSpec s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.noise_sigma = cfg.noise_sigma;
    s.base_brightness = 0.13 + rng.uniform01() * 0.10;
    s.noise_seed = rng.next_u64();

    const std::uint64_t n_blobs = 1 + rng.uniform_int(3);  // 1..3
    for (std::uint64_t i = 0; i < n_blobs; ++i) {
        BlobSpec b;
        b.cy = 4.0 + rng.uniform01() * (cfg.height - 8);
        b.cx = 4.0 + rng.uniform01() * (cfg.width - 8);
        b.ry = 1.8 + rng.uniform01() * 4.0;
        b.rx = 1.8 + rng.uniform01() * 4.0;
        b.intensity = 0.10 + rng.uniform01() * 0.26;
        s.blobs.push_back(b);
    }

    const bool abnormal = rng.uniform01() < cfg.p_abnormal;
    if (abnormal) {
        // Distinct (kind, location) slots; effusions only occur at the bottom.
        struct Slot { int kind, side, vert; };
        std::vector<Slot> slots;
        for (int side = 0; side < 2; ++side)
            for (int vert = 0; vert < 2; ++vert) {
                slots.push_back({kOpacity, side, vert});
                slots.push_back({kDevice, side, vert});
            }
        for (int side = 0; side < 2; ++side) slots.push_back({kEffusion, side, 1});
        rng.shuffle(slots.begin(), slots.end());
        const std::uint64_t n_findings = 1 + rng.uniform_int(3);  // 1..3
        for (std::uint64_t i = 0; i < n_findings; ++i) {
            const Slot& sl = slots[i];
            FindingSpec f;
            f.kind = sl.kind;
            f.side = sl.side;
            f.vert = sl.vert;
            f.severity = static_cast<int>(rng.uniform_int(3));
            f.jitter_y = (rng.uniform01() - 0.5) * 3.0;
            f.jitter_x = (rng.uniform01() - 0.5) * 3.0;
            f.angle = rng.uniform01() * 3.14159265358979323846;
            s.findings.push_back(f);
        }
    }
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

Corpus generate_corpus(const DatagenConfig& cfg) {
    if (cfg.n < 2) throw std::invalid_argument("generate_corpus: need n >= 2");
    Corpus corpus;
    corpus.height = cfg.height;
    corpus.width = cfg.width;
    corpus.max_len = cfg.max_len;
    corpus.items.resize(static_cast<std::size_t>(cfg.n));

    for (std::int64_t i = 0; i < cfg.n; ++i) {
        // Per-item derived seed keeps generation order-independent.
        Rng rng(mix64(cfg.seed, static_cast<std::uint64_t>(i)));
        auto& item = corpus.items[static_cast<std::size_t>(i)];
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "%06d", static_cast<int>(i));
        item.id = idbuf;
        item.scene = sample_scene(rng, cfg);
        item.image = render_scene(item.scene);
        item.report = make_report(item.scene.findings, rng, cfg);
        item.binary_label = item.scene.findings.empty() ? 0 : 1;
        item.multihot = {0, 0, 0};
        for (const auto& f : item.scene.findings) item.multihot[static_cast<std::size_t>(f.kind)] = 1;
    }

    std::vector<std::string> reports;
    reports.reserve(corpus.items.size());
    for (const auto& it : corpus.items) reports.push_back(it.report);
    corpus.vocab = Vocabulary::build(reports);
    for (auto& it : corpus.items) it.tokens = tokenize(it.report, corpus.vocab, cfg.max_len);
    return corpus;
}

Corpus slice_corpus(const Corpus& corpus, std::int64_t start, std::int64_t count) {
    if (start < 0 || count < 0 || start + count > corpus.size())
        throw std::invalid_argument("slice_corpus: range [" + std::to_string(start) + "," +
                                    std::to_string(start + count) + ") out of bounds for size " +
                                    std::to_string(corpus.size()));
    Corpus out;
    out.height = corpus.height;
    out.width = corpus.width;
    out.max_len = corpus.max_len;
    out.vocab = corpus.vocab;
    out.items.assign(corpus.items.begin() + start, corpus.items.begin() + start + count);
    return out;
}

// ---------------------------------------------------------------------------
// Export / ingest
// ---------------------------------------------------------------------------

void export_corpus(const Corpus& corpus, const std::string& out_dir, const DatagenConfig* config_echo) {
    fs::create_directories(fs::path(out_dir) / "images");
    std::ofstream reports(fs::path(out_dir) / "reports.tsv");
    std::ofstream labels(fs::path(out_dir) / "labels.tsv");
    if (!reports || !labels) throw std::runtime_error("export_corpus: cannot write under " + out_dir);

    int abnormal = 0;
    for (const auto& item : corpus.items) {
        PgmImage img;
        img.height = corpus.height;
        img.width = corpus.width;
        img.pixels.resize(item.image.size());
        for (std::size_t i = 0; i < item.image.size(); ++i)
            img.pixels[i] = static_cast<std::uint8_t>(std::lround(item.image[i] * 255.0f));
        write_pgm((fs::path(out_dir) / "images" / (item.id + ".pgm")).string(), img);

        reports << item.id << "\t" << item.report << "\n";
        labels << item.id << "\t";
        bool first = true;
        for (int k = 0; k < kNumFindingKinds; ++k) {
            if (item.multihot[static_cast<std::size_t>(k)]) {
                if (!first) labels << ",";
                labels << k;
                first = false;
            }
        }
        labels << "\n";
        abnormal += item.binary_label;
    }
    corpus.vocab.save_tsv((fs::path(out_dir) / "vocab.tsv").string());

    nlohmann::json manifest;
    manifest["n"] = corpus.size();
    manifest["abnormal"] = abnormal;
    manifest["height"] = corpus.height;
    manifest["width"] = corpus.width;
    manifest["max_len"] = corpus.max_len;
    manifest["vocab_size"] = corpus.vocab.size();
    if (config_echo) {
        manifest["config"] = {
            {"n", config_echo->n},
            {"seed", config_echo->seed},
            {"height", config_echo->height},
            {"width", config_echo->width},
            {"noise_sigma", config_echo->noise_sigma},
            {"p_abnormal", config_echo->p_abnormal},
            {"omission_epsilon", config_echo->omission_epsilon},
            {"hedge_prob", config_echo->hedge_prob},
            {"max_len", config_echo->max_len},
        };
    }
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

IngestResult ingest_external(const std::string& image_dir, const std::string& reports_tsv,
                             const std::string& labels_tsv, const std::string& vocab_tsv, int max_len) {
    IngestResult result;

    std::map<std::string, std::string> reports;
    {
        std::ifstream f(reports_tsv);
        if (!f) throw std::runtime_error("ingest: cannot open " + reports_tsv);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("ingest: " + reports_tsv + ":" + std::to_string(lineno) +
                                         ": missing tab separator");
            reports[line.substr(0, tab)] = line.substr(tab + 1);
        }
    }

    std::map<std::string, std::array<int, kNumFindingKinds>> labels;
    const bool have_labels = !labels_tsv.empty();
    if (have_labels) {
        std::ifstream f(labels_tsv);
        if (!f) throw std::runtime_error("ingest: cannot open " + labels_tsv);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("ingest: " + labels_tsv + ":" + std::to_string(lineno) +
                                         ": missing tab separator");
            const std::string id = line.substr(0, tab);
            std::array<int, kNumFindingKinds> hot{0, 0, 0};
            std::string rest = line.substr(tab + 1);
            std::istringstream iss(rest);
            std::string field;
            while (std::getline(iss, field, ',')) {
                if (field.empty()) continue;
                int k = -1;
                try {
                    k = std::stoi(field);
                } catch (const std::exception&) {
                    throw std::runtime_error("ingest: " + labels_tsv + ":" + std::to_string(lineno) +
                                             ": malformed class index '" + field + "'");
                }
                if (k < 0 || k >= kNumFindingKinds)
                    throw std::runtime_error("ingest: " + labels_tsv + ":" + std::to_string(lineno) +
                                             ": class index " + std::to_string(k) + " out of range");
                hot[static_cast<std::size_t>(k)] = 1;
            }
            labels[id] = hot;
        }
    }

    std::map<std::string, fs::path> images;
    if (!fs::is_directory(image_dir)) throw std::runtime_error("ingest: not a directory: " + image_dir);
    for (const auto& entry : fs::directory_iterator(image_dir)) {
        if (entry.path().extension() == ".pgm") images[entry.path().stem().string()] = entry.path();
    }

    // Keyed join over all provided sources.
    std::set<std::string> all_ids;
    for (const auto& [id, _] : reports) all_ids.insert(id);
    for (const auto& [id, _] : images) all_ids.insert(id);
    if (have_labels)
        for (const auto& [id, _] : labels) all_ids.insert(id);

    Corpus& corpus = result.corpus;
    corpus.max_len = max_len;
    for (const auto& id : all_ids) {
        const bool has_r = reports.count(id) > 0;
        const bool has_i = images.count(id) > 0;
        const bool has_l = !have_labels || labels.count(id) > 0;
        if (!has_r || !has_i || !has_l) {
            ++result.n_skipped;
            std::string missing;
            if (!has_i) missing += " image";
            if (!has_r) missing += " report";
            if (!has_l) missing += " label";
            result.warnings.push_back("id " + id + " skipped: missing" + missing);
            continue;
        }
        PgmImage img = read_pgm(images[id].string());
        if (corpus.items.empty()) {
            corpus.height = img.height;
            corpus.width = img.width;
        } else if (img.height != corpus.height || img.width != corpus.width) {
            throw std::runtime_error("ingest: image " + id + " has size " + std::to_string(img.width) + "x" +
                                     std::to_string(img.height) + ", expected " + std::to_string(corpus.width) + "x" +
                                     std::to_string(corpus.height));
        }
        PairedItem item;
        item.id = id;
        item.image.resize(img.pixels.size());
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            item.image[i] = static_cast<float>(img.pixels[i]) / 255.0f;
        item.report = reports[id];
        if (have_labels) {
            item.multihot = labels[id];
            item.binary_label = (item.multihot[0] || item.multihot[1] || item.multihot[2]) ? 1 : 0;
        }
        corpus.items.push_back(std::move(item));
    }

    if (!vocab_tsv.empty()) {
        corpus.vocab = Vocabulary::load_tsv(vocab_tsv);
    } else {
        std::vector<std::string> texts;
        for (const auto& it : corpus.items) texts.push_back(it.report);
        corpus.vocab = Vocabulary::build(texts);
    }
    for (auto& it : corpus.items) it.tokens = tokenize(it.report, corpus.vocab, max_len);
    return result;
}

}  // namespace timnet
