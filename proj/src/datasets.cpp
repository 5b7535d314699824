#include "canet/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <json.hpp>

#include "canet/error.hpp"

namespace canet::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCorpusVersion = 1;
constexpr std::size_t kRecordBytes = 14;

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// stem -> path for the image files directly inside `dir`.
std::map<std::string, fs::path> list_images(const fs::path& dir, const std::string& strip_suffix = "") {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        std::string stem = entry.path().stem().string();
        if (!strip_suffix.empty() && stem.size() > strip_suffix.size() &&
            stem.compare(stem.size() - strip_suffix.size(), strip_suffix.size(), strip_suffix) == 0) {
            stem.resize(stem.size() - strip_suffix.size());
        }
        out.emplace(stem, entry.path());
    }
    return out;
}

bool sizes_agree(const SampleRecord& r) {
    const auto a = imaging::load_image(r.shadow_path);
    const auto b = imaging::load_image(r.shadow_free_path);
    const auto m = imaging::load_mask(r.mask_path);
    return a.height() == b.height() && a.width() == b.width() && a.height() == m.height() &&
           a.width() == m.width();
}

void put_u16(std::string& buf, int v) {
    if (v < 0 || v > 0xFFFF) throw ValidationError("patch coordinate out of u16 range");
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

int get_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }

double dot_patch(const imaging::ImagePlane& img, const PatchRef& a, const PatchRef& b) {
    double s = 0.0;
    for (int y = 0; y < kPatchSize; ++y)
        for (int x = 0; x < kPatchSize; ++x)
            for (int c = 0; c < 3; ++c) s += img.at(a.row + y, a.col + x, c) * img.at(b.row + y, b.col + x, c);
    return s;
}

PatchRef random_patch(std::uint32_t image_id, const imaging::ImagePlane& img, Rng& rng) {
    return PatchRef{image_id, rng.uniform_int(0, img.height() - kPatchSize), rng.uniform_int(0, img.width() - kPatchSize)};
}

}  // namespace

Layout parse_layout(const std::string& name) {
    std::string upper = name;
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    if (upper == "ISTD") return Layout::ISTD;
    if (upper == "SRD") return Layout::SRD;
    throw ConfigError("unknown dataset layout: " + name);
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

IngestResult ingest_dataset(const fs::path& root, Layout layout, const IngestOptions& options) {
    if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
    IngestResult result;
    for (Split split : {Split::Train, Split::Test}) {
        const std::string s = to_string(split);
        const fs::path dir = root / s;
        if (!fs::is_directory(dir)) continue;
        std::map<std::string, fs::path> shadow, free, mask;
        if (layout == Layout::ISTD) {
            shadow = list_images(dir / (s + "_A"));
            mask = list_images(dir / (s + "_B"));
            free = list_images(dir / (s + "_C"));
        } else {
            shadow = list_images(dir / "shadow");
            free = list_images(dir / "shadow_free", "_free");
            const fs::path mask_dir = options.mask_root ? *options.mask_root / s : dir / "mask";
            mask = list_images(mask_dir);
        }
        for (const auto& [stem, shadow_path] : shadow) {
            auto f = free.find(stem);
            if (f == free.end()) continue;
            auto m = mask.find(stem);
            if (m == mask.end()) {
                ++result.skipped_missing_mask;
                continue;
            }
            SampleRecord rec{stem, shadow_path, f->second, m->second, split};
            if (options.check_sizes && !sizes_agree(rec)) {
                ++result.rejected_size_mismatch;
                continue;
            }
            result.records.push_back(std::move(rec));
        }
    }
    if (result.skipped_missing_mask > 0) {
        std::cerr << "warning: skipped " << result.skipped_missing_mask << " record(s) without a mask\n";
    }
    if (result.rejected_size_mismatch > 0) {
        std::cerr << "warning: rejected " << result.rejected_size_mismatch << " record(s) with mismatched sizes\n";
    }
    return result;
}

std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split) {
    std::vector<SampleRecord> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r);
    return out;
}

LoadedSample load_sample(const SampleRecord& record) {
    LoadedSample s{record.name, imaging::load_image(record.shadow_path), imaging::load_image(record.shadow_free_path),
                   imaging::load_mask(record.mask_path)};
    if (s.shadow.height() != s.shadow_free.height() || s.shadow.width() != s.shadow_free.width() ||
        s.shadow.height() != s.mask.height() || s.shadow.width() != s.mask.width()) {
        throw ValidationError("size mismatch in record " + record.name);
    }
    return s;
}

bool patch_inside(const PatchRef& p, int height, int width) {
    return p.row >= 0 && p.col >= 0 && p.row + kPatchSize <= height && p.col + kPatchSize <= width;
}

double patch_shadow_fraction(const PatchRef& patch, const imaging::Mask& mask) {
    if (!patch_inside(patch, mask.height(), mask.width())) throw ValidationError("patch outside mask raster");
    int count = 0;
    for (int y = 0; y < kPatchSize; ++y)
        for (int x = 0; x < kPatchSize; ++x) count += mask.at(patch.row + y, patch.col + x) ? 1 : 0;
    return static_cast<double>(count) / (kPatchSize * kPatchSize);
}

bool patch_is_shadow(const PatchRef& patch, const imaging::Mask& mask, double tau) {
    return patch_shadow_fraction(patch, mask) >= tau;
}

int ground_truth_type(const PatchRef& first, const PatchRef& second, const imaging::Mask& mask, double tau) {
    const bool a = patch_is_shadow(first, mask, tau);
    const bool b = patch_is_shadow(second, mask, tau);
    if (a == b) return 0;
    return a ? 1 : -1;
}

std::optional<double> patch_cosine(const PatchRef& first, const PatchRef& second, const imaging::ImagePlane& img) {
    if (!patch_inside(first, img.height(), img.width()) || !patch_inside(second, img.height(), img.width())) {
        throw ValidationError("patch outside image");
    }
    const double na = dot_patch(img, first, first);
    const double nb = dot_patch(img, second, second);
    if (na <= 0.0 || nb <= 0.0) return std::nullopt;
    return dot_patch(img, first, second) / std::sqrt(na * nb);
}

std::optional<double> ground_truth_correlation(const PatchRef& first, const PatchRef& second,
                                               const imaging::ImagePlane& shadow_free) {
    const auto cosine = patch_cosine(first, second, shadow_free);
    if (!cosine) return std::nullopt;
    if (*cosine > kMatchCosine) return 1.0;
    if (*cosine < kNonMatchCosine) return 0.0;
    return std::nullopt;
}

int PairCorpus::match_count() const {
    return static_cast<int>(std::count_if(pairs.begin(), pairs.end(), [](const PatchPair& p) { return p.label.correlation == 1.0; }));
}

int PairCorpus::non_match_count() const { return static_cast<int>(pairs.size()) - match_count(); }

int PairCorpus::way1_count() const {
    return static_cast<int>(std::count_if(pairs.begin(), pairs.end(), [](const PatchPair& p) { return p.cross_image(); }));
}

PairLabel relabel(const PatchPair& pair, const LoadedSample& sample) {
    if (pair.cross_image()) {
        // The shadow-free patch counts as non-shadow.
        const bool shadow = patch_is_shadow(pair.first, sample.mask);
        return PairLabel{shadow ? 1 : 0, 1.0};
    }
    const auto corr = ground_truth_correlation(pair.first, pair.second, sample.shadow_free);
    if (!corr) throw ValidationError("pair falls in the discarded cosine band");
    return PairLabel{ground_truth_type(pair.first, pair.second, sample.mask), *corr};
}

PairCorpus build_pair_corpus(const std::vector<SampleRecord>& records, const std::vector<LoadedSample>& samples,
                             int n_pairs, std::uint64_t seed, const CorpusOptions& options) {
    if (records.empty() || samples.size() != records.size()) throw ValidationError("pair corpus needs loaded records");
    if (n_pairs <= 0 || n_pairs % 2 != 0) throw ConfigError("n_pairs must be a positive even number");
    for (const auto& s : samples) {
        if (s.shadow.height() < kPatchSize || s.shadow.width() < kPatchSize) {
            throw ValidationError("image " + s.name + " is smaller than a patch");
        }
    }
    Rng rng(seed);
    const int half = n_pairs / 2;
    const int way1_quota = static_cast<int>(std::lround(half * std::clamp(options.way1_fraction, 0.0, 1.0)));
    const int way2_match_quota = half - way1_quota;
    const auto image_count = static_cast<int>(samples.size());

    std::vector<PatchPair> matches, non_matches;
    const long long max_attempts = static_cast<long long>(options.max_attempts_per_pair) * n_pairs;
    for (long long attempt = 0; attempt < max_attempts; ++attempt) {
        if (static_cast<int>(non_matches.size()) >= half && static_cast<int>(matches.size()) >= way2_match_quota) break;
        const auto id = static_cast<std::uint32_t>(rng.uniform_int(0, image_count - 1));
        const LoadedSample& s = samples[id];
        const PatchRef a = random_patch(id, s.shadow, rng);
        const PatchRef b = random_patch(id, s.shadow, rng);
        if (a.row == b.row && a.col == b.col) continue;
        const auto corr = ground_truth_correlation(a, b, s.shadow_free);
        if (!corr) continue;
        const PatchPair pair{a, b, PairLabel{ground_truth_type(a, b, s.mask), *corr}};
        if (*corr == 1.0) {
            if (static_cast<int>(matches.size()) < way2_match_quota) matches.push_back(pair);
        } else if (static_cast<int>(non_matches.size()) < half) {
            non_matches.push_back(pair);
        }
    }
    if (static_cast<int>(non_matches.size()) < half) {
        throw ValidationError("insufficient valid pairs: found " + std::to_string(non_matches.size()) + " of " +
                              std::to_string(half) + " non-match pairs and " + std::to_string(matches.size()) +
                              " way-2 match pairs");
    }

    // Way 1 fills the rest of the match half: a shadow patch (when the image
    // has one) against the same location in the shadow-free image.
    while (static_cast<int>(matches.size()) < half) {
        const auto id = static_cast<std::uint32_t>(rng.uniform_int(0, image_count - 1));
        const LoadedSample& s = samples[id];
        PatchRef p = random_patch(id, s.shadow, rng);
        if (s.mask.count() > 0) {
            for (int tries = 0; tries < 64 && !patch_is_shadow(p, s.mask); ++tries) p = random_patch(id, s.shadow, rng);
        }
        const PatchPair pair{p, p, PairLabel{}};
        matches.push_back(PatchPair{p, p, relabel(pair, s)});
    }

    PairCorpus corpus;
    corpus.seed = seed;
    corpus.images = records;
    corpus.pairs = std::move(matches);
    corpus.pairs.insert(corpus.pairs.end(), non_matches.begin(), non_matches.end());
    std::shuffle(corpus.pairs.begin(), corpus.pairs.end(), rng.engine());
    return corpus;
}

PairCorpus build_pair_corpus(const std::vector<SampleRecord>& records, int n_pairs, std::uint64_t seed,
                             const CorpusOptions& options) {
    std::vector<LoadedSample> samples;
    samples.reserve(records.size());
    for (const auto& r : records) samples.push_back(load_sample(r));
    return build_pair_corpus(records, samples, n_pairs, seed, options);
}

void write_corpus(const PairCorpus& corpus, const fs::path& path) {
    json header;
    header["format"] = "canet-pair-corpus";
    header["version"] = kCorpusVersion;
    header["seed"] = corpus.seed;
    header["pairs"] = corpus.pairs.size();
    header["match"] = corpus.match_count();
    header["non_match"] = corpus.non_match_count();
    header["way1"] = corpus.way1_count();
    header["patch_size"] = kPatchSize;
    header["shadow_fraction_threshold"] = kShadowFraction;
    header["match_cosine"] = kMatchCosine;
    header["non_match_cosine"] = kNonMatchCosine;
    header["record_bytes"] = kRecordBytes;
    json images = json::array();
    for (const auto& r : corpus.images) {
        images.push_back({{"name", r.name},
                          {"shadow", r.shadow_path.generic_string()},
                          {"shadow_free", r.shadow_free_path.generic_string()},
                          {"mask", r.mask_path.generic_string()},
                          {"split", to_string(r.split)}});
    }
    header["images"] = images;

    std::string buf = header.dump();
    buf.push_back('\n');
    for (const auto& p : corpus.pairs) {
        const std::uint32_t id = p.first.image_id;
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((id >> (8 * i)) & 0xFF));
        put_u16(buf, p.first.row);
        put_u16(buf, p.first.col);
        put_u16(buf, p.second.row);
        put_u16(buf, p.second.col);
        buf.push_back(static_cast<char>(static_cast<std::int8_t>(p.label.type)));
        buf.push_back(static_cast<char>(p.label.correlation >= 0.5 ? 1 : 0));
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

PairCorpus read_corpus(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DecodeError("missing corpus header in " + path.string());
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw DecodeError("corrupt corpus header in " + path.string() + ": " + e.what());
    }
    if (header.value("format", "") != "canet-pair-corpus") throw DecodeError("not a pair corpus: " + path.string());
    PairCorpus corpus;
    corpus.seed = header.at("seed").get<std::uint64_t>();
    for (const auto& im : header.at("images")) {
        corpus.images.push_back(SampleRecord{im.at("name"), im.at("shadow").get<std::string>(),
                                             im.at("shadow_free").get<std::string>(), im.at("mask").get<std::string>(),
                                             im.at("split") == "test" ? Split::Test : Split::Train});
    }
    const auto n = header.at("pairs").get<std::size_t>();
    std::vector<unsigned char> rec(kRecordBytes);
    for (std::size_t i = 0; i < n; ++i) {
        if (!in.read(reinterpret_cast<char*>(rec.data()), kRecordBytes)) {
            throw DecodeError("truncated corpus " + path.string());
        }
        PatchPair p;
        const std::uint32_t id = rec[0] | (rec[1] << 8) | (rec[2] << 16) | (static_cast<std::uint32_t>(rec[3]) << 24);
        p.first = PatchRef{id, get_u16(&rec[4]), get_u16(&rec[6])};
        p.second = PatchRef{id, get_u16(&rec[8]), get_u16(&rec[10])};
        p.label.type = static_cast<std::int8_t>(rec[12]);
        p.label.correlation = rec[13] ? 1.0 : 0.0;
        if (p.label.type < -1 || p.label.type > 1 || id >= corpus.images.size()) {
            throw DecodeError("invalid record in corpus " + path.string());
        }
        corpus.pairs.push_back(p);
    }
    return corpus;
}

imaging::ImagePlane extract_patch(const imaging::ImagePlane& img, int row, int col, int size) {
    if (row < 0 || col < 0 || row + size > img.height() || col + size > img.width()) {
        throw ValidationError("patch outside image");
    }
    imaging::ImagePlane patch(size, size, img.colorspace());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) patch.at(y, x, c) = img.at(row + y, col + x, c);
    return patch;
}

void paste_patch(imaging::ImagePlane& img, const imaging::ImagePlane& patch, int row, int col) {
    if (row < 0 || col < 0 || row + patch.height() > img.height() || col + patch.width() > img.width()) {
        throw ValidationError("patch outside image");
    }
    for (int y = 0; y < patch.height(); ++y)
        for (int x = 0; x < patch.width(); ++x)
            for (int c = 0; c < 3; ++c) img.at(row + y, col + x, c) = patch.at(y, x, c);
}

}  // namespace canet::data
