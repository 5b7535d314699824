#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canet/archive.hpp"
#include "canet/canet.hpp"
#include "canet/cpm.hpp"
#include "canet/datasets.hpp"
#include "canet/nn/adam.hpp"
#include "canet/rng.hpp"

namespace canet::train {

struct CpmTrainSettings {
    double width_scale = 1.0;
    // Adam step size for the CPM; zero falls back to the shared lr.
    double lr = 0.0;
    cpm::RegressionLoss regression = cpm::RegressionLoss::Absolute;
    // Corpus size used when the trainer builds its own corpus.
    int pairs = 2000;
    // Share of the corpus held out for reporting.
    double holdout = 0.1;
    // Early stop once held-out accuracy >= stop_accuracy and held-out
    // L_reg < stop_reg. Zero disables.
    double stop_accuracy = 0.0;
    double stop_reg = 0.0;
    // Trained CPM checkpoint consumed by the removal network.
    std::string checkpoint;
};

struct TrainConfig {
    double lr = 1e-4;
    std::array<double, 2> betas{0.9, 0.999};
    double weight_decay = 5e-4;
    int batch_size = 2;
    int epochs_cpm = 30;
    int epochs_canet = 50;
    std::array<int, 2> input_size{400, 400};
    std::uint64_t seed = 0;
    net::LossWeights loss_weights;
    net::RemNorm rem_norm = net::RemNorm::MeanSquared;
    bool stage_one_loss = true;
    cft::CftConfig cft;
    net::Variant variant = net::Variant::Full;
    std::string checkpoint_dir = "checkpoints";
    std::string dataset_root;
    data::Layout layout = data::Layout::ISTD;
    // Hard cap on optimizer steps of the removal network (0: no cap).
    long long max_steps = 0;
    net::NetworkConfig network;
    CpmTrainSettings cpm;
    cpm::MatchOptions match;
    std::string log_path;

    void validate() const;
};

// Desk-scale profile: 64x64 inputs, short schedules, higher learning rate.
TrainConfig desk_profile();

nlohmann::json to_json(const TrainConfig& config);
// Keys absent from `j` keep their defaults; unknown keys are a ConfigError.
TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base = {});
TrainConfig load_config(const std::filesystem::path& path);
// "a.b=value": value is parsed as JSON, falling back to a plain string.
void apply_override(TrainConfig& config, const std::string& assignment);
// Hash of the settings that shape a run; schedule lengths and output
// locations are excluded so a finished run can be extended.
std::uint64_t config_hash(const TrainConfig& config);

net::VariantOptions variant_options(const TrainConfig& config, std::shared_ptr<const cpm::CpmNet> cpm);
nn::AdamOptions adam_options(const TrainConfig& config);

struct Checkpoint {
    std::string kind;  // "cpm" or "canet"
    long long step = 0;
    int epoch = 0;
    std::uint64_t config_hash = 0;
    nlohmann::json config = nlohmann::json::object();
    std::string rng_state;
    nlohmann::json extra = nlohmann::json::object();
    // Parameters under their own names, optimizer moments under
    // "adam.m/<name>" and "adam.v/<name>".
    std::vector<std::pair<std::string, Tensor>> weights;
    long long adam_step = 0;
    std::map<std::string, Tensor> adam_m, adam_v;
};

Archive to_archive(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_archive(const Archive& archive);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint capture(const std::string& kind, const TrainConfig& config, long long step, int epoch, const Rng& rng,
                   const nn::ParamSet& params, const nn::Adam* adam);
// Copies every checkpoint tensor whose name starts with `prefix` into `params`.
void restore_weights(const Checkpoint& checkpoint, nn::ParamSet& params, const std::string& prefix = "");
void restore_adam(const Checkpoint& checkpoint, nn::Adam& adam);
// Throws ConfigError when the checkpoint was written under other settings.
void check_resumable(const Checkpoint& checkpoint, const TrainConfig& config, const std::string& kind);

// Append-only JSON-lines log; a default-constructed log discards records.
class JsonlLog {
public:
    JsonlLog() = default;
    explicit JsonlLog(std::filesystem::path path);
    void write(const nlohmann::json& record);
    const std::vector<nlohmann::json>& records() const { return records_; }

private:
    std::filesystem::path path_;
    std::vector<nlohmann::json> records_;
};

struct TrainOptions {
    // Written after every epoch and at the end of the run.
    std::filesystem::path checkpoint_path;
    std::optional<Checkpoint> resume;
    JsonlLog* log = nullptr;
};

struct CpmEpoch {
    int epoch = 0;
    double l_reg = 0, l_cls = 0, accuracy = 0;
    std::optional<double> heldout_reg, heldout_cls, heldout_accuracy;
    double seconds = 0;
};

struct CpmTrainResult {
    std::shared_ptr<cpm::CpmNet> net;
    std::vector<CpmEpoch> history;
    Checkpoint checkpoint;
    bool early_stopped = false;
};

// `samples[i]` holds the rasters of corpus.images[i]. A non-finite loss
// throws TrainingAborted and leaves the last finite checkpoint on disk.
CpmTrainResult train_cpm(const TrainConfig& config, const data::PairCorpus& corpus,
                         const std::vector<data::LoadedSample>& samples, const TrainOptions& options = {});
CpmTrainResult train_cpm(const TrainConfig& config, const data::PairCorpus& corpus, const TrainOptions& options = {});

std::shared_ptr<cpm::CpmNet> load_cpm(const Checkpoint& checkpoint);

// MatchSets per (image content, matcher identity, grid settings).
class MatchCache {
public:
    struct Key {
        std::uint64_t content = 0;
        std::uint64_t matcher = 0;
        std::uint64_t grid = 0;
        auto operator<=>(const Key&) const = default;
    };
    static Key key(const imaging::ImagePlane& img, const net::Pipeline& pipeline, const cpm::MatchOptions& options);

    MatchSet get(const imaging::ImagePlane& img, const net::Pipeline& pipeline, const cpm::MatchOptions& options);
    std::size_t size() const;
    int computed() const { return computed_; }

private:
    mutable std::mutex mutex_;
    std::map<Key, MatchSet> entries_;
    int computed_ = 0;
};

struct CanetStep {
    long long step = 0;
    int epoch = 0;
    net::LossValues loss;
};

struct CanetEpoch {
    int epoch = 0;
    net::LossValues mean_loss;
    std::optional<double> val_rmse;
    double seconds = 0;
};

struct CanetTrainResult {
    std::shared_ptr<net::Pipeline> pipeline;
    std::vector<CanetStep> steps;
    std::vector<CanetEpoch> history;
    Checkpoint checkpoint;
    int matches_computed = 0;
};

// `cpm` may be null for variants that do not need it. The CPM stays frozen.
CanetTrainResult train_canet(const TrainConfig& config, const std::vector<data::LoadedSample>& train,
                             const std::vector<data::LoadedSample>& val, std::shared_ptr<const cpm::CpmNet> cpm,
                             const TrainOptions& options = {});

// Rebuilds a trained pipeline (and its frozen CPM, when stored alongside).
// `expected` guards against evaluating a checkpoint as another variant.
std::shared_ptr<net::Pipeline> load_pipeline(const Checkpoint& checkpoint,
                                             std::optional<net::Variant> expected = std::nullopt);

// Whole-image LAB RMSE of `pipeline` on `samples`, averaged over images.
double mean_rmse(const net::Pipeline& pipeline, const std::vector<data::LoadedSample>& samples, MatchCache* cache,
                 const cpm::MatchOptions& options);

}  // namespace canet::train
