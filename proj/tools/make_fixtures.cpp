// Regenerates the bundled fixtures under data/:
//   desk/   ISTD layout, 4 separable + 4 real-style 64x64 training triplets
//           and 2 real-style test triplets
//   video/  10 frames of one real-style scene with a drifting shadow
#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "canet/synthetic.hpp"

using namespace canet;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
    CLI::App app{"Write the bundled fixture images"};
    std::string root = "data";
    app.add_option("--root", root, "Output directory");
    CLI11_PARSE(app, argc, argv);

    const fs::path desk = fs::path(root) / "desk";
    fs::remove_all(desk);
    for (int i = 0; i < 4; ++i) {
        synth::write_istd(desk, data::Split::Train, "sep_" + std::to_string(i),
                          synth::make_scene(synth::SceneKind::Separable, 64, 101 + i));
        synth::write_istd(desk, data::Split::Train, "real_" + std::to_string(i),
                          synth::make_scene(synth::SceneKind::RealStyle, 64, 202 + i));
    }
    for (int i = 0; i < 2; ++i) {
        synth::write_istd(desk, data::Split::Test, "real_" + std::to_string(i),
                          synth::make_scene(synth::SceneKind::RealStyle, 64, 302 + i));
    }

    const fs::path video = fs::path(root) / "video";
    fs::remove_all(video);
    fs::create_directories(video);
    for (int i = 0; i < 10; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03d.png", i);
        imaging::save_image(synth::make_moving_shadow(64, 404, -0.15 + 0.03 * i).shadow, video / name);
    }
    std::printf("fixtures written to %s\n", root.c_str());
    return 0;
}
