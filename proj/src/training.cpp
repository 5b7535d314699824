#include "canet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "canet/error.hpp"
#include "canet/evaluation.hpp"
#include "canet/nn/ops.hpp"

namespace canet::train {

using nlohmann::json;

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv(const std::string& s, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent stream for (seed, purpose, index) so any step can be replayed.
std::uint64_t derive(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
    return splitmix(splitmix(splitmix(seed) ^ purpose) ^ index);
}

constexpr std::uint64_t kSplitStream = 1, kCpmEpochStream = 2, kCanetEpochStream = 3, kCropStream = 4;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename E>
E parse_enum(const std::string& value, const std::vector<std::pair<E, std::string>>& names, const std::string& what) {
    for (const auto& [e, n] : names)
        if (n == value) return e;
    throw ConfigError("unknown " + what + ": " + value);
}

template <typename E>
std::string enum_name(E value, const std::vector<std::pair<E, std::string>>& names) {
    for (const auto& [e, n] : names)
        if (e == value) return n;
    return "unknown";
}

const std::vector<std::pair<net::RemNorm, std::string>> kRemNorms{{net::RemNorm::MeanSquared, "mean_squared"},
                                                                  {net::RemNorm::L2Norm, "l2"}};
const std::vector<std::pair<cft::WindowMode, std::string>> kWindows{{cft::WindowMode::Centered, "centered"},
                                                                    {cft::WindowMode::Anchored, "anchored"}};
const std::vector<std::pair<data::Layout, std::string>> kLayouts{{data::Layout::ISTD, "ISTD"},
                                                                 {data::Layout::SRD, "SRD"}};
const std::vector<std::pair<net::RefineBase, std::string>> kRefineBases{
    {net::RefineBase::Input, "input"}, {net::RefineBase::StageOne, "stage_one"}};
const std::vector<std::pair<net::BackboneKind, std::string>> kBackbones{
    {net::BackboneKind::ToyDense, "toy_dense"}, {net::BackboneKind::PretrainedDense, "pretrained_dense"}};
const std::vector<std::pair<cpm::RegressionLoss, std::string>> kRegressions{
    {cpm::RegressionLoss::Absolute, "absolute"}, {cpm::RegressionLoss::Squared, "squared"}};
const std::vector<std::pair<cpm::QuerySelection, std::string>> kSelections{
    {cpm::QuerySelection::Lightness, "lightness"}, {cpm::QuerySelection::AnchorVote, "anchor_vote"}};

void check_known_keys(const json& given, const json& known, const std::string& path) {
    for (auto it = given.begin(); it != given.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!known.contains(it.key())) throw ConfigError("unknown config key: " + key);
        if (known[it.key()].is_object()) {
            if (!it.value().is_object()) throw ConfigError("config key " + key + " must be an object");
            check_known_keys(it.value(), known[it.key()], key);
        }
    }
}

std::pair<int, int> crop_size(const imaging::ImagePlane& img, const TrainConfig& config, int stride) {
    const int h = std::min(config.input_size[0], img.height()) / stride * stride;
    const int w = std::min(config.input_size[1], img.width()) / stride * stride;
    if (h == 0 || w == 0) {
        throw ShapeError("image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                         " is smaller than the network stride " + std::to_string(stride));
    }
    return {h, w};
}

imaging::ImagePlane crop_plane(const imaging::ImagePlane& img, int top, int left, int h, int w) {
    imaging::ImagePlane out(h, w, img.colorspace());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
    return out;
}

data::LoadedSample crop_sample(const data::LoadedSample& s, const TrainConfig& config, int stride, Rng& rng) {
    const auto [h, w] = crop_size(s.shadow, config, stride);
    if (h == s.shadow.height() && w == s.shadow.width()) return s;
    const int top = rng.uniform_int(0, s.shadow.height() - h), left = rng.uniform_int(0, s.shadow.width() - w);
    data::LoadedSample out{s.name, crop_plane(s.shadow, top, left, h, w), crop_plane(s.shadow_free, top, left, h, w),
                           imaging::Mask(h, w)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.mask.set(y, x, s.mask.at(top + y, left + x));
    return out;
}

void require_finite(double v, const std::string& where, const std::filesystem::path& checkpoint) {
    if (std::isfinite(v)) return;
    std::string msg = "non-finite loss at " + where;
    msg += checkpoint.empty() ? "" : "; last finite checkpoint kept at " + checkpoint.string();
    throw TrainingAborted(msg);
}

json loss_json(const net::LossValues& v) {
    return {{"rem", v.rem}, {"per", v.per}, {"grad", v.grad}, {"total", v.total}};
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    for (double b : betas)
        if (!(b >= 0.0 && b < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs_cpm < 0 || epochs_canet < 0) throw ConfigError("epoch counts must be non-negative");
    if (input_size[0] < 1 || input_size[1] < 1) throw ConfigError("input_size must be positive");
    if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
    if (cpm.width_scale <= 0.0) throw ConfigError("cpm.width_scale must be positive");
    if (cpm.lr < 0.0) throw ConfigError("cpm.lr must be non-negative");
    if (cpm.pairs < 2) throw ConfigError("cpm.pairs must be >= 2");
    if (cpm.holdout < 0.0 || cpm.holdout >= 1.0) throw ConfigError("cpm.holdout must lie in [0, 1)");
    if (match.grid_stride < 1) throw ConfigError("match.grid_stride must be >= 1");
    if (match.k_candidates < 1) throw ConfigError("match.k_candidates must be >= 1");
    cft.validate();
}

TrainConfig desk_profile() {
    TrainConfig c;
    c.lr = 1e-3;
    c.input_size = {64, 64};
    c.epochs_cpm = 200;
    c.epochs_canet = 250;
    c.cpm.width_scale = 0.25;
    c.cpm.lr = 3e-4;
    c.cpm.pairs = 600;
    c.cpm.holdout = 0.2;
    c.cpm.stop_accuracy = 0.95;
    c.cpm.stop_reg = 0.05;
    // Stride 16 leaves only 9 heavily overlapping patches on a 64x64 image.
    c.match.grid_stride = 8;
    return c;
}

json to_json(const TrainConfig& c) {
    return {
        {"lr", c.lr},
        {"betas", c.betas},
        {"weight_decay", c.weight_decay},
        {"batch_size", c.batch_size},
        {"epochs_cpm", c.epochs_cpm},
        {"epochs_canet", c.epochs_canet},
        {"input_size", c.input_size},
        {"seed", c.seed},
        {"loss_weights", {{"rem", c.loss_weights.rem}, {"per", c.loss_weights.per}, {"grad", c.loss_weights.grad}}},
        {"rem_norm", enum_name(c.rem_norm, kRemNorms)},
        {"stage_one_loss", c.stage_one_loss},
        {"cft", {{"k", c.cft.k}, {"n", c.cft.n}, {"sigma", c.cft.sigma}, {"window", enum_name(c.cft.window, kWindows)}}},
        {"variant", net::to_string(c.variant)},
        {"checkpoint_dir", c.checkpoint_dir},
        {"dataset_root", c.dataset_root},
        {"layout", enum_name(c.layout, kLayouts)},
        {"max_steps", c.max_steps},
        {"network",
         {{"backbone", enum_name(c.network.backbone.kind, kBackbones)},
          {"backbone_weights", c.network.backbone.weights_path},
          {"widths", c.network.backbone.widths},
          {"strides", c.network.backbone.strides},
          {"cft_levels", c.network.cft_levels},
          {"decoder_width", c.network.decoder_width},
          {"unet_width", c.network.unet_width},
          {"unet_growth", c.network.unet_growth},
          {"refine_base", enum_name(c.network.refine_base, kRefineBases)}}},
        {"cpm",
         {{"width_scale", c.cpm.width_scale},
          {"lr", c.cpm.lr},
          {"regression", enum_name(c.cpm.regression, kRegressions)},
          {"pairs", c.cpm.pairs},
          {"holdout", c.cpm.holdout},
          {"stop_accuracy", c.cpm.stop_accuracy},
          {"stop_reg", c.cpm.stop_reg},
          {"checkpoint", c.cpm.checkpoint}}},
        {"match",
         {{"grid_stride", c.match.grid_stride},
          {"k_candidates", c.match.k_candidates},
          {"score_floor", c.match.score_floor},
          {"selection", enum_name(c.match.selection, kSelections)},
          {"lightness_ratio", c.match.lightness_ratio},
          {"type_gate", c.match.type_gate}}},
        {"log_path", c.log_path},
    };
}

TrainConfig config_from_json(const json& given, const TrainConfig& base) {
    if (!given.is_object()) throw ConfigError("config must be a JSON object");
    json j = to_json(base);
    check_known_keys(given, j, "");
    j.merge_patch(given);
    TrainConfig c;
    try {
        c.lr = j["lr"].get<double>();
        c.betas = j["betas"].get<std::array<double, 2>>();
        c.weight_decay = j["weight_decay"].get<double>();
        c.batch_size = j["batch_size"].get<int>();
        c.epochs_cpm = j["epochs_cpm"].get<int>();
        c.epochs_canet = j["epochs_canet"].get<int>();
        c.input_size = j["input_size"].get<std::array<int, 2>>();
        c.seed = j["seed"].get<std::uint64_t>();
        c.loss_weights = {j["loss_weights"]["rem"].get<double>(), j["loss_weights"]["per"].get<double>(),
                          j["loss_weights"]["grad"].get<double>()};
        c.rem_norm = parse_enum(j["rem_norm"].get<std::string>(), kRemNorms, "rem_norm");
        c.stage_one_loss = j["stage_one_loss"].get<bool>();
        const json& f = j["cft"];
        c.cft = {f["k"].get<int>(), f["n"].get<int>(), f["sigma"].get<double>(),
                 parse_enum(f["window"].get<std::string>(), kWindows, "cft.window")};
        c.variant = net::parse_variant(j["variant"].get<std::string>());
        c.checkpoint_dir = j["checkpoint_dir"].get<std::string>();
        c.dataset_root = j["dataset_root"].get<std::string>();
        c.layout = parse_enum(j["layout"].get<std::string>(), kLayouts, "layout");
        c.max_steps = j["max_steps"].get<long long>();
        const json& n = j["network"];
        c.network.backbone.kind = parse_enum(n["backbone"].get<std::string>(), kBackbones, "network.backbone");
        c.network.backbone.weights_path = n["backbone_weights"].get<std::string>();
        c.network.backbone.widths = n["widths"].get<std::vector<int>>();
        c.network.backbone.strides = n["strides"].get<std::vector<int>>();
        c.network.cft_levels = n["cft_levels"].get<std::vector<int>>();
        c.network.decoder_width = n["decoder_width"].get<int>();
        c.network.unet_width = n["unet_width"].get<int>();
        c.network.unet_growth = n["unet_growth"].get<int>();
        c.network.refine_base = parse_enum(n["refine_base"].get<std::string>(), kRefineBases, "network.refine_base");
        const json& p = j["cpm"];
        c.cpm.width_scale = p["width_scale"].get<double>();
        c.cpm.lr = p["lr"].get<double>();
        c.cpm.regression = parse_enum(p["regression"].get<std::string>(), kRegressions, "cpm.regression");
        c.cpm.pairs = p["pairs"].get<int>();
        c.cpm.holdout = p["holdout"].get<double>();
        c.cpm.stop_accuracy = p["stop_accuracy"].get<double>();
        c.cpm.stop_reg = p["stop_reg"].get<double>();
        c.cpm.checkpoint = p["checkpoint"].get<std::string>();
        const json& m = j["match"];
        c.match.grid_stride = m["grid_stride"].get<int>();
        c.match.k_candidates = m["k_candidates"].get<int>();
        c.match.score_floor = m["score_floor"].get<double>();
        c.match.selection = parse_enum(m["selection"].get<std::string>(), kSelections, "match.selection");
        c.match.lightness_ratio = m["lightness_ratio"].get<double>();
        c.match.type_gate = m["type_gate"].get<bool>();
        c.log_path = j["log_path"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    // A config may start from the desk profile.
    TrainConfig base;
    if (j.is_object() && j.contains("profile")) {
        const std::string profile = j["profile"].is_string() ? j["profile"].get<std::string>() : "";
        if (profile == "desk") {
            base = desk_profile();
        } else if (profile != "default") {
            throw ConfigError("unknown profile in " + path.string());
        }
        j.erase("profile");
    }
    return config_from_json(j, base);
}

void apply_override(TrainConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
        parts.push_back(rest.substr(0, pos));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    config = config_from_json(patch, config);
}

std::uint64_t config_hash(const TrainConfig& config) {
    json j = to_json(config);
    for (const char* k : {"epochs_cpm", "epochs_canet", "max_steps", "checkpoint_dir", "log_path"}) j.erase(k);
    j["cpm"].erase("checkpoint");
    return fnv(j.dump());
}

net::VariantOptions variant_options(const TrainConfig& config, std::shared_ptr<const cpm::CpmNet> cpm) {
    net::VariantOptions o;
    o.cft = config.cft;
    o.match = config.match;
    o.cpm = std::move(cpm);
    return o;
}

nn::AdamOptions adam_options(const TrainConfig& config) {
    nn::AdamOptions o;
    o.lr = config.lr;
    o.beta1 = config.betas[0];
    o.beta2 = config.betas[1];
    o.weight_decay = config.weight_decay;
    return o;
}

Archive to_archive(const Checkpoint& c) {
    Archive a;
    a.header = {{"format", "canet-checkpoint"}, {"kind", c.kind},
                {"step", c.step},               {"epoch", c.epoch},
                {"config_hash", c.config_hash}, {"config", c.config},
                {"rng_state", c.rng_state},     {"extra", c.extra},
                {"adam_step", c.adam_step},     {"patch_size", data::kPatchSize}};
    for (const auto& [name, t] : c.weights) a.add(name, t);
    for (const auto& [name, t] : c.adam_m) a.add("adam.m/" + name, t);
    for (const auto& [name, t] : c.adam_v) a.add("adam.v/" + name, t);
    return a;
}

Checkpoint checkpoint_from_archive(const Archive& a) {
    const json& h = a.header;
    if (!h.is_object() || h.value("format", "") != "canet-checkpoint") throw DecodeError("not a checkpoint archive");
    Checkpoint c;
    try {
        c.kind = h.at("kind").get<std::string>();
        c.step = h.at("step").get<long long>();
        c.epoch = h.at("epoch").get<int>();
        c.config_hash = h.at("config_hash").get<std::uint64_t>();
        c.config = h.at("config");
        c.rng_state = h.at("rng_state").get<std::string>();
        c.extra = h.at("extra");
        c.adam_step = h.at("adam_step").get<long long>();
    } catch (const json::exception& e) {
        throw DecodeError(std::string("checkpoint header: ") + e.what());
    }
    for (const auto& [name, t] : a.tensors) {
        if (name.rfind("adam.m/", 0) == 0) {
            c.adam_m.emplace(name.substr(7), t);
        } else if (name.rfind("adam.v/", 0) == 0) {
            c.adam_v.emplace(name.substr(7), t);
        } else {
            c.weights.emplace_back(name, t);
        }
    }
    return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_archive(to_archive(checkpoint), path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_archive(load_archive(path)); }

Checkpoint capture(const std::string& kind, const TrainConfig& config, long long step, int epoch, const Rng& rng,
                   const nn::ParamSet& params, const nn::Adam* adam) {
    Checkpoint c;
    c.kind = kind;
    c.step = step;
    c.epoch = epoch;
    c.config_hash = config_hash(config);
    c.config = to_json(config);
    c.rng_state = rng.state();
    for (const auto& p : params.all()) c.weights.emplace_back(p.name, p.value);
    if (adam) {
        c.adam_step = adam->steps();
        c.adam_m = adam->first_moments();
        c.adam_v = adam->second_moments();
    }
    return c;
}

void restore_weights(const Checkpoint& checkpoint, nn::ParamSet& params, const std::string& prefix) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : checkpoint.weights) by_name[name] = &t;
    for (auto& p : params.all()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        const auto it = by_name.find(p.name);
        if (it == by_name.end()) throw DecodeError("checkpoint lacks parameter " + p.name);
        if (it->second->shape() != p.value.shape()) {
            throw DecodeError("checkpoint parameter " + p.name + " has shape " + shape_string(it->second->shape()) +
                              ", expected " + shape_string(p.value.shape()));
        }
        p.value = *it->second;
    }
}

void restore_adam(const Checkpoint& checkpoint, nn::Adam& adam) {
    adam.first_moments() = checkpoint.adam_m;
    adam.second_moments() = checkpoint.adam_v;
    adam.set_steps(checkpoint.adam_step);
}

void check_resumable(const Checkpoint& checkpoint, const TrainConfig& config, const std::string& kind) {
    if (checkpoint.kind != kind) throw ConfigError("checkpoint holds a " + checkpoint.kind + " run, not " + kind);
    if (checkpoint.config_hash != config_hash(config)) {
        throw ConfigError("checkpoint was written with a different configuration; refusing to resume");
    }
}

JsonlLog::JsonlLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void JsonlLog::write(const json& record) {
    records_.push_back(record);
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to log " + path_.string());
    out << record.dump() << '\n';
}

CpmTrainResult train_cpm(const TrainConfig& config, const data::PairCorpus& corpus,
                         const std::vector<data::LoadedSample>& samples, const TrainOptions& options) {
    config.validate();
    if (corpus.pairs.empty()) throw ValidationError("train_cpm: empty corpus");
    if (samples.size() != corpus.images.size()) throw ValidationError("train_cpm: one sample per corpus image needed");

    std::vector<imaging::ImagePlane> unaware_shadow, unaware_free;
    for (const auto& s : samples) {
        unaware_shadow.push_back(imaging::shadow_unaware_image(s.shadow));
        unaware_free.push_back(imaging::shadow_unaware_image(s.shadow_free));
    }
    std::vector<std::pair<Tensor, Tensor>> inputs;
    for (const auto& p : corpus.pairs) {
        if (p.first.image_id >= samples.size()) throw ValidationError("train_cpm: pair refers to a missing image");
        const auto& s = samples[p.first.image_id];
        Tensor a = cpm::make_input(s.shadow, unaware_shadow[p.first.image_id], p.first.row, p.first.col);
        Tensor b = p.cross_image()
                       ? cpm::make_input(s.shadow_free, unaware_free[p.first.image_id], p.second.row, p.second.col)
                       : cpm::make_input(s.shadow, unaware_shadow[p.first.image_id], p.second.row, p.second.col);
        inputs.emplace_back(std::move(a), std::move(b));
    }

    const std::size_t n = corpus.pairs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive(config.seed, kSplitStream));
    std::shuffle(order.begin(), order.end(), split_rng.engine());
    std::size_t held = 0;
    if (config.cpm.holdout > 0.0 && n >= 2) {
        held = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(config.cpm.holdout * n)), 1, n - 1);
    }
    const std::vector<std::size_t> heldout(order.begin(), order.begin() + static_cast<long>(held));
    const std::vector<std::size_t> training(order.begin() + static_cast<long>(held), order.end());

    auto net = std::make_shared<cpm::CpmNet>(config.seed, cpm::CpmConfig{config.cpm.width_scale, config.cpm.regression});
    nn::AdamOptions cpm_adam = adam_options(config);
    if (config.cpm.lr > 0.0) cpm_adam.lr = config.cpm.lr;
    nn::Adam adam(cpm_adam);
    Rng rng(config.seed);
    long long step = 0;
    int start_epoch = 0;
    CpmTrainResult result;
    if (options.resume) {
        check_resumable(*options.resume, config, "cpm");
        restore_weights(*options.resume, net->params());
        restore_adam(*options.resume, adam);
        rng.restore(options.resume->rng_state);
        step = options.resume->step;
        start_epoch = options.resume->epoch;
    }
    auto snapshot = [&](int epoch) {
        result.checkpoint = capture("cpm", config, step, epoch, rng, net->params(), &adam);
        result.checkpoint.extra = {{"cpm_hash", net->weights_hash()}};
        if (!options.checkpoint_path.empty()) save_checkpoint(result.checkpoint, options.checkpoint_path);
    };
    if (!options.resume) snapshot(0);

    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    for (int epoch = start_epoch + 1; epoch <= config.epochs_cpm; ++epoch) {
        std::vector<std::size_t> perm = training;
        Rng epoch_rng(derive(config.seed, kCpmEpochStream, static_cast<std::uint64_t>(epoch)));
        std::shuffle(perm.begin(), perm.end(), epoch_rng.engine());
        double reg = 0, cls = 0;
        int correct = 0;
        for (std::size_t b = 0; b < perm.size(); b += batch) {
            const std::size_t end = std::min(b + batch, perm.size());
            net->params().zero_grad();
            for (std::size_t i = b; i < end; ++i) {
                const std::size_t k = perm[i];
                const auto& label = corpus.pairs[k].label;
                nn::Graph g;
                const auto h = net->heads(g, net->features(g, g.constant(inputs[k].first)),
                                          net->features(g, g.constant(inputs[k].second)));
                const auto loss = cpm::cpm_loss(g, h, label, config.cpm.regression);
                require_finite(g.value(loss.total)[0], "cpm epoch " + std::to_string(epoch), options.checkpoint_path);
                g.backward(nn::scale(g, loss.total, 1.0 / static_cast<double>(end - b)));
                reg += g.value(loss.reg)[0];
                cls += g.value(loss.cls)[0];
                const Tensor& probs = g.value(h.probs);
                const int predicted = static_cast<int>(std::max_element(probs.values().begin(), probs.values().end()) -
                                                       probs.values().begin());
                correct += predicted == cpm::type_to_class(label.type);
            }
            adam.step(net->params());
            ++step;
        }
        CpmEpoch e;
        e.epoch = epoch;
        const double m = static_cast<double>(std::max<std::size_t>(1, perm.size()));
        e.l_reg = reg / m;
        e.l_cls = cls / m;
        e.accuracy = correct / m;
        if (!heldout.empty()) {
            double hr = 0, hc = 0;
            int hcorrect = 0;
            for (std::size_t k : heldout) {
                const auto pred =
                    net->predict(net->extract_features(inputs[k].first), net->extract_features(inputs[k].second));
                const auto loss = cpm::cpm_loss(pred, corpus.pairs[k].label, config.cpm.regression);
                hr += loss.reg;
                hc += loss.cls;
                hcorrect += pred.type() == corpus.pairs[k].label.type;
            }
            const double hm = static_cast<double>(heldout.size());
            e.heldout_reg = hr / hm;
            e.heldout_cls = hc / hm;
            e.heldout_accuracy = hcorrect / hm;
        }
        e.seconds = seconds_since(t0);
        result.history.push_back(e);
        if (options.log) {
            json rec{{"kind", "cpm"}, {"epoch", epoch}, {"step", step}, {"l_reg", e.l_reg}, {"l_cls", e.l_cls},
                     {"accuracy", e.accuracy}, {"lr", cpm_adam.lr}, {"wall", e.seconds}};
            if (e.heldout_accuracy) {
                rec["heldout"] = {{"l_reg", *e.heldout_reg}, {"l_cls", *e.heldout_cls}, {"accuracy", *e.heldout_accuracy}};
            }
            options.log->write(rec);
        }
        snapshot(epoch);
        // Stop rule reads the held-out slice, or the training epoch without one.
        const double acc = e.heldout_accuracy.value_or(e.accuracy), lreg = e.heldout_reg.value_or(e.l_reg);
        if (config.cpm.stop_accuracy > 0.0 && acc >= config.cpm.stop_accuracy && lreg < config.cpm.stop_reg) {
            result.early_stopped = true;
            break;
        }
    }
    result.net = net;
    return result;
}

CpmTrainResult train_cpm(const TrainConfig& config, const data::PairCorpus& corpus, const TrainOptions& options) {
    std::vector<data::LoadedSample> samples;
    for (const auto& r : corpus.images) samples.push_back(data::load_sample(r));
    return train_cpm(config, corpus, samples, options);
}

std::shared_ptr<cpm::CpmNet> load_cpm(const Checkpoint& checkpoint) {
    const TrainConfig config = config_from_json(checkpoint.config);
    cpm::CpmConfig layout{config.cpm.width_scale, config.cpm.regression};
    if (checkpoint.extra.contains("cpm")) {
        const json& c = checkpoint.extra["cpm"];
        layout.width_scale = c.at("width_scale").get<double>();
        layout.regression = parse_enum(c.at("regression").get<std::string>(), kRegressions, "cpm.regression");
    }
    auto net = std::make_shared<cpm::CpmNet>(config.seed, layout);
    restore_weights(checkpoint, net->params(), "cpm.");
    return net;
}

MatchCache::Key MatchCache::key(const imaging::ImagePlane& img, const net::Pipeline& pipeline,
                                const cpm::MatchOptions& o) {
    Key k;
    k.content = imaging::content_hash(img);
    const auto* learned = dynamic_cast<const net::CpmMatcher*>(&pipeline.matcher());
    k.matcher = learned ? learned->net().weights_hash() : fnv(pipeline.matcher().name());
    std::ostringstream grid;
    grid << o.grid_stride << ' ' << o.k_candidates << ' ' << o.score_floor << ' ' << static_cast<int>(o.selection)
         << ' ' << o.lightness_ratio << ' ' << o.type_gate;
    k.grid = fnv(grid.str());
    return k;
}

MatchSet MatchCache::get(const imaging::ImagePlane& img, const net::Pipeline& pipeline,
                         const cpm::MatchOptions& options) {
    const Key k = key(img, pipeline, options);
    {
        std::lock_guard lock(mutex_);
        const auto it = entries_.find(k);
        if (it != entries_.end()) return it->second;
    }
    MatchSet m = pipeline.match(img);
    std::lock_guard lock(mutex_);
    ++computed_;
    return entries_.emplace(k, std::move(m)).first->second;
}

std::size_t MatchCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

double mean_rmse(const net::Pipeline& pipeline, const std::vector<data::LoadedSample>& samples, MatchCache* cache,
                 const cpm::MatchOptions& options) {
    if (samples.empty()) throw ValidationError("mean_rmse: no samples");
    double total = 0.0;
    for (const auto& s : samples) {
        const MatchSet m = cache ? cache->get(s.shadow, pipeline, options) : pipeline.match(s.shadow);
        total += *eval::rmse_lab(pipeline.remove(s.shadow, m), s.shadow_free, s.mask).all;
    }
    return total / static_cast<double>(samples.size());
}

CanetTrainResult train_canet(const TrainConfig& config, const std::vector<data::LoadedSample>& train,
                             const std::vector<data::LoadedSample>& val, std::shared_ptr<const cpm::CpmNet> cpm,
                             const TrainOptions& options) {
    config.validate();
    if (train.empty()) throw ValidationError("train_canet: no training images");
    if (net::needs_cpm(config.variant) && !cpm) {
        throw ConfigError("variant " + net::to_string(config.variant) + " needs a trained CPM checkpoint");
    }
    if (!net::needs_cpm(config.variant)) cpm.reset();
    const std::uint64_t cpm_hash = cpm ? cpm->weights_hash() : 0;

    auto pipeline = std::make_shared<net::Pipeline>(
        net::make_variant(config.variant, config.network, config.seed, variant_options(config, cpm)));
    nn::ParamSet& params = pipeline->net().params();
    nn::Adam adam(adam_options(config));
    const net::RandomConvExtractor extractor;
    const net::LossOptions loss_options{config.loss_weights, config.rem_norm, config.stage_one_loss};
    Rng rng(config.seed);
    long long step = 0;
    CanetTrainResult result;
    if (options.resume) {
        check_resumable(*options.resume, config, "canet");
        restore_weights(*options.resume, params);
        restore_adam(*options.resume, adam);
        rng.restore(options.resume->rng_state);
        step = options.resume->step;
    }

    const int stride = pipeline->net().max_stride();
    const long long batch = config.batch_size;
    const long long per_epoch = (static_cast<long long>(train.size()) + batch - 1) / batch;
    long long last = per_epoch * config.epochs_canet;
    if (config.max_steps > 0) last = std::min(last, config.max_steps);

    auto snapshot = [&](int epoch) {
        result.checkpoint = capture("canet", config, step, epoch, rng, params, &adam);
        result.checkpoint.extra = {{"variant", net::to_string(config.variant)}, {"cpm_hash", cpm_hash}};
        if (cpm) {
            // The CPM may come from a run with a different config; keep its layout.
            result.checkpoint.extra["cpm"] = {{"width_scale", cpm->config().width_scale},
                                              {"regression", enum_name(cpm->config().regression, kRegressions)}};
            for (const auto& p : cpm->params().all()) result.checkpoint.weights.emplace_back(p.name, p.value);
        }
        if (!options.checkpoint_path.empty()) save_checkpoint(result.checkpoint, options.checkpoint_path);
    };

    MatchCache cache;
    const auto t0 = std::chrono::steady_clock::now();
    net::LossValues epoch_sum;
    int epoch_steps = 0;
    while (step < last) {
        const int epoch = static_cast<int>(step / per_epoch) + 1;
        const long long offset = step % per_epoch;
        std::vector<std::size_t> perm(train.size());
        std::iota(perm.begin(), perm.end(), 0);
        Rng epoch_rng(derive(config.seed, kCanetEpochStream, static_cast<std::uint64_t>(epoch)));
        std::shuffle(perm.begin(), perm.end(), epoch_rng.engine());
        Rng crop_rng(derive(config.seed, kCropStream, static_cast<std::uint64_t>(step)));

        const std::size_t begin = static_cast<std::size_t>(offset * batch);
        const std::size_t end = std::min(perm.size(), begin + static_cast<std::size_t>(batch));
        params.zero_grad();
        net::LossValues step_loss;
        for (std::size_t i = begin; i < end; ++i) {
            const data::LoadedSample s = crop_sample(train[perm[i]], config, stride, crop_rng);
            const MatchSet m = cache.get(s.shadow, *pipeline, config.match);
            nn::Graph g;
            const auto r = pipeline->forward(g, g.constant(imaging::to_chw(s.shadow)), m);
            const auto terms = net::canet_loss(g, r.stage_one ? &*r.stage_one : nullptr, r.out,
                                               imaging::to_chw(s.shadow_free), extractor, loss_options);
            const auto v = net::loss_values(g, terms);
            require_finite(v.total, "step " + std::to_string(step + 1), options.checkpoint_path);
            const double w = 1.0 / static_cast<double>(end - begin);
            g.backward(nn::scale(g, terms.total, w));
            step_loss.rem += w * v.rem;
            step_loss.per += w * v.per;
            step_loss.grad += w * v.grad;
            step_loss.total += w * v.total;
        }
        adam.step(params);
        ++step;
        result.steps.push_back({step, epoch, step_loss});
        if (options.log) {
            options.log->write({{"kind", "canet"}, {"step", step}, {"epoch", epoch}, {"loss", loss_json(step_loss)},
                                {"lr", config.lr}, {"wall", seconds_since(t0)}});
        }
        epoch_sum.rem += step_loss.rem;
        epoch_sum.per += step_loss.per;
        epoch_sum.grad += step_loss.grad;
        epoch_sum.total += step_loss.total;
        ++epoch_steps;

        if (offset == per_epoch - 1 || step == last) {
            CanetEpoch e;
            e.epoch = epoch;
            e.mean_loss = {epoch_sum.rem / epoch_steps, epoch_sum.per / epoch_steps, epoch_sum.grad / epoch_steps,
                           epoch_sum.total / epoch_steps};
            if (!val.empty()) e.val_rmse = mean_rmse(*pipeline, val, &cache, config.match);
            e.seconds = seconds_since(t0);
            result.history.push_back(e);
            if (options.log) {
                json rec{{"kind", "canet_epoch"}, {"epoch", epoch}, {"step", step}, {"loss", loss_json(e.mean_loss)},
                         {"wall", e.seconds}};
                if (e.val_rmse) rec["val_rmse"] = *e.val_rmse;
                options.log->write(rec);
            }
            snapshot(epoch);
            epoch_sum = {};
            epoch_steps = 0;
        }
    }
    if (step == 0 || result.checkpoint.kind.empty()) snapshot(static_cast<int>(step / per_epoch));
    if (cpm && cpm->weights_hash() != cpm_hash) throw Error("CPM weights changed during training");
    result.pipeline = pipeline;
    result.matches_computed = cache.computed();
    return result;
}

std::shared_ptr<net::Pipeline> load_pipeline(const Checkpoint& checkpoint, std::optional<net::Variant> expected) {
    if (checkpoint.kind != "canet") throw ConfigError("checkpoint holds a " + checkpoint.kind + " model, not a remover");
    TrainConfig config = config_from_json(checkpoint.config);
    const net::Variant variant = net::parse_variant(checkpoint.extra.value("variant", net::to_string(config.variant)));
    if (expected && *expected != variant) {
        throw ConfigError("checkpoint holds variant " + net::to_string(variant) + ", not " + net::to_string(*expected));
    }
    std::shared_ptr<const cpm::CpmNet> cpm;
    if (net::needs_cpm(variant)) cpm = load_cpm(checkpoint);
    // Pretrained backbone weights travel inside the checkpoint.
    net::NetworkConfig network = config.network;
    const bool pretrained = network.backbone.kind == net::BackboneKind::PretrainedDense;
    network.backbone.kind = net::BackboneKind::ToyDense;
    auto pipeline = std::make_shared<net::Pipeline>(
        net::make_variant(variant, network, config.seed, variant_options(config, cpm)));
    restore_weights(checkpoint, pipeline->net().params());
    if (pretrained) pipeline->net().params().set_frozen("backbone.", true);
    return pipeline;
}

}  // namespace canet::train
