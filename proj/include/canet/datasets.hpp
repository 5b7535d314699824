#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "canet/imaging.hpp"
#include "canet/rng.hpp"

namespace canet::data {

enum class Layout { ISTD, SRD };
enum class Split { Train, Test };

Layout parse_layout(const std::string& name);
std::string to_string(Split split);

struct SampleRecord {
    std::string name;
    std::filesystem::path shadow_path;
    std::filesystem::path shadow_free_path;
    std::filesystem::path mask_path;
    Split split = Split::Train;
};

struct IngestResult {
    std::vector<SampleRecord> records;
    int skipped_missing_mask = 0;
    int rejected_size_mismatch = 0;
};

struct IngestOptions {
    // SRD only: directory holding <split>/<stem>.png masks. Defaults to
    // <root>/<split>/mask.
    std::optional<std::filesystem::path> mask_root;
    // Decode every raster to check that dimensions agree.
    bool check_sizes = true;
};

// Layouts (file stems must agree across subdirectories):
//   ISTD: <root>/{train,test}/{train_A,train_B,train_C} (shadow, mask, shadow-free)
//         with test_* names under test/.
//   SRD:  <root>/{train,test}/shadow and <root>/{train,test}/shadow_free
//         (a trailing "_free" in shadow-free stems is ignored); masks external.
// Records are ordered by split (train first) then lexicographically by name.
IngestResult ingest_dataset(const std::filesystem::path& root, Layout layout, const IngestOptions& options = {});

std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split);

struct LoadedSample {
    std::string name;
    imaging::ImagePlane shadow;
    imaging::ImagePlane shadow_free;
    imaging::Mask mask;
};

LoadedSample load_sample(const SampleRecord& record);

constexpr int kPatchSize = 32;

struct PatchRef {
    std::uint32_t image_id = 0;
    int row = 0;
    int col = 0;
    bool operator==(const PatchRef&) const = default;
};

bool patch_inside(const PatchRef& p, int height, int width);

// Ground truth: type in {-1, 0, +1}; correlation 0 or 1 (continuous at inference).
struct PairLabel {
    int type = 0;
    double correlation = 0.0;
    bool operator==(const PairLabel&) const = default;
};

// Pairs with identical coordinates are "way 1" pairs: the first patch comes
// from the shadow image and the second from the shadow-free image. All other
// pairs take both patches from the shadow image.
struct PatchPair {
    PatchRef first;
    PatchRef second;
    PairLabel label;
    bool cross_image() const { return first.row == second.row && first.col == second.col; }
    bool operator==(const PatchPair&) const = default;
};

constexpr double kShadowFraction = 0.5;
constexpr double kMatchCosine = 0.95;
constexpr double kNonMatchCosine = 0.6;

double patch_shadow_fraction(const PatchRef& patch, const imaging::Mask& mask);
bool patch_is_shadow(const PatchRef& patch, const imaging::Mask& mask, double tau = kShadowFraction);

// -1 for (non-shadow, shadow), +1 for (shadow, non-shadow), 0 otherwise.
int ground_truth_type(const PatchRef& first, const PatchRef& second, const imaging::Mask& mask,
                      double tau = kShadowFraction);

// Cosine of flattened RGB patch vectors; nullopt when either vector is zero.
std::optional<double> patch_cosine(const PatchRef& first, const PatchRef& second, const imaging::ImagePlane& img);

// 1 above 0.95, 0 below 0.6, nullopt (discard) in between or when undefined.
std::optional<double> ground_truth_correlation(const PatchRef& first, const PatchRef& second,
                                               const imaging::ImagePlane& shadow_free);

struct CorpusOptions {
    // Minimum share of the match half drawn from way-1 (same-position) pairs.
    double way1_fraction = 0.5;
    int max_attempts_per_pair = 200;
};

struct PairCorpus {
    std::uint64_t seed = 0;
    std::vector<SampleRecord> images;
    std::vector<PatchPair> pairs;

    int match_count() const;
    int non_match_count() const;
    int way1_count() const;
};

// Balanced 50/50 match/non-match corpus. Pure function of its inputs.
PairCorpus build_pair_corpus(const std::vector<SampleRecord>& records, const std::vector<LoadedSample>& samples,
                             int n_pairs, std::uint64_t seed, const CorpusOptions& options = {});
PairCorpus build_pair_corpus(const std::vector<SampleRecord>& records, int n_pairs, std::uint64_t seed,
                             const CorpusOptions& options = {});

// Recomputes the label of `pair` from the source rasters.
PairLabel relabel(const PatchPair& pair, const LoadedSample& sample);

// JSON header line terminated by '\n', followed by little-endian 14-byte
// records {image_id u32, r1 c1 r2 c2 u16, type i8, corr u8}.
void write_corpus(const PairCorpus& corpus, const std::filesystem::path& path);
PairCorpus read_corpus(const std::filesystem::path& path);

// Copies a patch region and pastes it back; used by the corpus invariants.
imaging::ImagePlane extract_patch(const imaging::ImagePlane& img, int row, int col, int size = kPatchSize);
void paste_patch(imaging::ImagePlane& img, const imaging::ImagePlane& patch, int row, int col);

}  // namespace canet::data
