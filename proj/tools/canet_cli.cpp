#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "canet/error.hpp"
#include "canet/evaluation.hpp"
#include "canet/training.hpp"

using namespace canet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string profile = "desk";
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string variant;
    std::string out;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "TrainConfig JSON file")->check(CLI::ExistingFile);
    app->add_option("--profile", c.profile, "Base settings when no --config is given")
        ->check(CLI::IsMember({"desk", "default"}));
    app->add_option("--set", c.sets, "Dotted override, e.g. cpm.pairs=200");
    app->add_option("--seed", c.seed, "Random seed");
    app->add_option("--variant", c.variant, "Pipeline variant");
    app->add_option("--out", c.out, "Output path");
}

train::TrainConfig resolve(const Common& c) {
    train::TrainConfig config;
    if (!c.config.empty()) {
        config = train::load_config(c.config);
    } else if (c.profile == "desk") {
        config = train::desk_profile();
    }
    for (const auto& s : c.sets) train::apply_override(config, s);
    if (c.seed) config.seed = *c.seed;
    if (!c.variant.empty()) config.variant = net::parse_variant(c.variant);
    config.validate();
    return config;
}

std::optional<net::Variant> expected_variant(const Common& c) {
    if (c.variant.empty()) return std::nullopt;
    return net::parse_variant(c.variant);
}

std::string out_or(const Common& c, const fs::path& fallback) { return c.out.empty() ? fallback.string() : c.out; }

std::vector<data::SampleRecord> records(const train::TrainConfig& config, const std::string& root,
                                        const std::string& split) {
    const std::string dir = root.empty() ? config.dataset_root : root;
    if (dir.empty()) throw ConfigError("no dataset: pass --data or set dataset_root");
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
    auto all = data::ingest_dataset(dir, config.layout).records;
    if (split == "all") return all;
    return data::filter_split(all, split == "test" ? data::Split::Test : data::Split::Train);
}

std::vector<data::LoadedSample> load_all(const std::vector<data::SampleRecord>& recs) {
    std::vector<data::LoadedSample> out;
    for (const auto& r : recs) out.push_back(data::load_sample(r));
    return out;
}

std::uint64_t file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 1469598103934665603ULL;
    for (char ch; in.get(ch);) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void ensure_parent(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

bool is_image(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Context-aware shadow removal"};
    app.require_subcommand(1);
    app.failure_message([](const CLI::App*, const CLI::Error& e) { return std::string("canet: ") + e.what() + "\n"; });

    Common common;
    std::string data_root, split = "train", pairs_file, cpm_path, resume_path, log_path, checkpoint, input,
                matches_path;
    std::vector<std::string> checkpoints;
    std::optional<int> n_pairs;
    std::optional<long long> steps;
    std::string eval_split = "test", stats_split = "all";
    std::string metric = "rmse", aggregation = "per_image";
    bool identity = false;

    auto* build = app.add_subcommand("build-pairs", "Build the labelled patch-pair corpus");
    add_common(build, common);
    build->add_option("--data", data_root, "Dataset root");
    build->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    build->add_option("--n", n_pairs, "Number of pairs");

    auto* train_cpm = app.add_subcommand("train-cpm", "Train the patch matcher");
    add_common(train_cpm, common);
    train_cpm->add_option("--data", data_root, "Dataset root");
    train_cpm->add_option("--pairs", pairs_file, "Corpus written by build-pairs")->check(CLI::ExistingFile);
    train_cpm->add_option("--resume", resume_path, "Checkpoint to continue from")->check(CLI::ExistingFile);
    train_cpm->add_option("--log", log_path, "JSON-lines log");

    auto* train = app.add_subcommand("train", "Train the removal network");
    add_common(train, common);
    train->add_option("--data", data_root, "Dataset root");
    train->add_option("--cpm", cpm_path, "Trained matcher checkpoint")->check(CLI::ExistingFile);
    train->add_option("--resume", resume_path, "Checkpoint to continue from")->check(CLI::ExistingFile);
    train->add_option("--log", log_path, "JSON-lines log");
    train->add_option("--steps", steps, "Stop after this many optimizer steps");

    auto* remove = app.add_subcommand("remove", "Remove the shadow from one image");
    add_common(remove, common);
    remove->add_option("input", input, "Shadow image")->required()->check(CLI::ExistingFile);
    remove->add_option("--checkpoint", checkpoint, "Removal checkpoint")->required()->check(CLI::ExistingFile);
    remove->add_option("--matches", matches_path, "Also write the MatchSet as JSON");

    auto* evaluate = app.add_subcommand("evaluate", "Region RMSE of one or more checkpoints");
    add_common(evaluate, common);
    evaluate->add_option("--checkpoint", checkpoints, "Removal checkpoint (repeatable)")->check(CLI::ExistingFile);
    evaluate->add_flag("--identity", identity, "Add a row for the unprocessed input");
    evaluate->add_option("--data", data_root, "Dataset root");
    evaluate->add_option("--split", eval_split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    evaluate->add_option("--metric", metric, "rmse or mae")->check(CLI::IsMember({"rmse", "mae"}));
    evaluate->add_option("--aggregation", aggregation, "per_image or per_pixel")
        ->check(CLI::IsMember({"per_image", "per_pixel"}));

    auto* stats = app.add_subcommand("stats", "Per-channel LAB gap inside shadow regions");
    add_common(stats, common);
    stats->add_option("--data", data_root, "Dataset root");
    stats->add_option("--split", stats_split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));

    auto* video = app.add_subcommand("video", "Remove shadows frame by frame");
    add_common(video, common);
    video->add_option("frames", input, "Directory of frames")->required()->check(CLI::ExistingDirectory);
    video->add_option("--checkpoint", checkpoint, "Removal checkpoint")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        const train::TrainConfig config = resolve(common);

        if (*build) {
            const auto recs = records(config, data_root, split);
            const auto corpus = data::build_pair_corpus(recs, n_pairs.value_or(config.cpm.pairs), config.seed);
            const fs::path out = out_or(common, "pairs.bin");
            ensure_parent(out);
            data::write_corpus(corpus, out);
            std::printf("pairs %zu match %d way1 %d hash %s -> %s\n", corpus.pairs.size(), corpus.match_count(),
                        corpus.way1_count(), hex(file_hash(out)).c_str(), out.string().c_str());
        } else if (*train_cpm) {
            const data::PairCorpus corpus =
                pairs_file.empty() ? data::build_pair_corpus(records(config, data_root, "train"), config.cpm.pairs,
                                                             config.seed)
                                   : data::read_corpus(pairs_file);
            train::JsonlLog log(log_path.empty() ? config.log_path : log_path);
            train::TrainOptions opt;
            opt.checkpoint_path = out_or(common, fs::path(config.checkpoint_dir) / "cpm.ckpt");
            ensure_parent(opt.checkpoint_path);
            opt.log = &log;
            if (!resume_path.empty()) opt.resume = train::load_checkpoint(resume_path);
            const auto r = train::train_cpm(config, corpus, opt);
            if (r.history.empty()) {
                std::printf("nothing to do: checkpoint already at epoch %d\n", r.checkpoint.epoch);
            } else {
                const auto& e = r.history.back();
                std::printf("epoch %d l_reg %.4f l_cls %.4f acc %.3f", e.epoch, e.l_reg, e.l_cls, e.accuracy);
                if (e.heldout_accuracy) {
                    std::printf(" heldout_acc %.3f heldout_l_reg %.4f", *e.heldout_accuracy, *e.heldout_reg);
                }
                std::printf("%s -> %s\n", r.early_stopped ? " (early stop)" : "", opt.checkpoint_path.c_str());
            }
        } else if (*train) {
            std::shared_ptr<const cpm::CpmNet> cpm;
            const std::string cpm_file = cpm_path.empty() ? config.cpm.checkpoint : cpm_path;
            if (net::needs_cpm(config.variant)) {
                if (cpm_file.empty()) throw ConfigError("variant " + net::to_string(config.variant) + " needs --cpm");
                cpm = train::load_cpm(train::load_checkpoint(cpm_file));
            }
            train::TrainConfig run = config;
            if (steps) run.max_steps = *steps;
            const auto recs = records(run, data_root, "all");
            const auto train_set = load_all(data::filter_split(recs, data::Split::Train));
            const auto val_set = load_all(data::filter_split(recs, data::Split::Test));
            train::JsonlLog log(log_path.empty() ? run.log_path : log_path);
            train::TrainOptions opt;
            opt.checkpoint_path = out_or(common, fs::path(run.checkpoint_dir) / "canet.ckpt");
            ensure_parent(opt.checkpoint_path);
            opt.log = &log;
            if (!resume_path.empty()) opt.resume = train::load_checkpoint(resume_path);
            const auto r = train::train_canet(run, train_set, val_set, cpm, opt);
            std::printf("%s step %lld", net::to_string(run.variant).c_str(), r.checkpoint.step);
            if (!r.steps.empty()) std::printf(" loss %.4f", r.steps.back().loss.total);
            if (!r.history.empty() && r.history.back().val_rmse) {
                std::printf(" val_rmse %.3f", *r.history.back().val_rmse);
            }
            std::printf(" -> %s\n", opt.checkpoint_path.c_str());
        } else if (*remove) {
            const auto pipeline = train::load_pipeline(train::load_checkpoint(checkpoint), expected_variant(common));
            const auto img = imaging::load_image(input);
            const MatchSet m = pipeline->match(img);
            const fs::path out = out_or(common, "removed.png");
            ensure_parent(out);
            imaging::save_image(pipeline->remove(img, m), out);
            if (!matches_path.empty()) {
                ensure_parent(matches_path);
                save_matchset(m, matches_path);
            }
            std::printf("%s %dx%d queries %zu -> %s\n", net::to_string(pipeline->variant()).c_str(), img.width(),
                        img.height(), m.queries.size(), out.string().c_str());
        } else if (*evaluate) {
            if (checkpoints.empty() && !identity) throw ConfigError("evaluate needs --checkpoint or --identity");
            const auto samples = load_all(records(config, data_root, eval_split));
            const auto m = eval::parse_metric(metric);
            const auto a = eval::parse_aggregation(aggregation);
            std::vector<eval::Report> reports;
            if (identity) {
                reports.push_back(eval::evaluate([](const data::LoadedSample& s) { return s.shadow; }, samples,
                                                 "input", m, a));
            }
            for (const auto& path : checkpoints) {
                const auto pipeline = train::load_pipeline(train::load_checkpoint(path), expected_variant(common));
                reports.push_back(eval::evaluate(
                    [&](const data::LoadedSample& s) { return pipeline->remove(s.shadow); }, samples,
                    net::to_string(pipeline->variant()), m, a));
            }
            std::cout << eval::text_table(reports);
            if (!common.out.empty()) {
                json j{{"schema_version", eval::kReportSchemaVersion}, {"reports", json::array()}};
                for (const auto& r : reports) j["reports"].push_back(eval::to_json(r));
                write_json(j, common.out);
            }
        } else if (*stats) {
            const auto s = eval::channel_gap_stats(load_all(records(config, data_root, stats_split)));
            std::printf("L %.4f A %.4f B %.4f over %d images, %lld shadow pixels\n", s.gap[0], s.gap[1], s.gap[2],
                        s.images, s.shadow_pixels);
            if (!common.out.empty()) write_json(eval::to_json(s), common.out);
        } else if (*video) {
            const auto pipeline = train::load_pipeline(train::load_checkpoint(checkpoint), expected_variant(common));
            std::vector<fs::path> frames;
            for (const auto& e : fs::directory_iterator(input))
                if (e.is_regular_file() && is_image(e.path())) frames.push_back(e.path());
            std::sort(frames.begin(), frames.end());
            if (frames.empty()) throw IoError("no PNG/JPEG frames in " + input);
            const fs::path out = out_or(common, "frames_out");
            fs::create_directories(out);
            for (const auto& f : frames) {
                imaging::save_image(pipeline->remove(imaging::load_image(f)), out / f.filename());
            }
            std::printf("%zu frames -> %s\n", frames.size(), out.string().c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "canet: %s\n", e.what());
        return 1;
    }
    return 0;
}
