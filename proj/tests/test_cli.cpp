#include "limoseg/ingest.hpp"
#include "limoseg/preproc.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

using namespace limoseg;

namespace {

struct CliResult {
    int code = 0;
    std::string output;
};

CliResult cli(const std::string& args, const fs::path& cwd) {
    const fs::path log = cwd / "cli.log";
    const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(LIMOSEG_CLI_PATH) + "' -q " + args + " > '" +
                            log.string() + "' 2>&1";
    CliResult r;
    const int status = std::system(cmd.c_str());
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = test::read_text(log);
    return r;
}

std::string slurp(const fs::path& p) { return test::read_text(p); }

struct Pgm {
    int rows = 0, cols = 0;
    std::string pixels;
    // grid orientation: row 0 is the nearest row
    unsigned at(int r, int c) const { return static_cast<unsigned char>(pixels[static_cast<std::size_t>((rows - 1 - r) * cols + c)]); }
};

Pgm read_pgm(const fs::path& p) {
    std::istringstream in(slurp(p));
    std::string magic;
    int maxval = 0;
    Pgm g;
    in >> magic >> g.cols >> g.rows >> maxval;
    in.get();
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(maxval, 255);
    g.pixels.assign(std::istreambuf_iterator<char>(in), {});
    EXPECT_EQ(g.pixels.size(), static_cast<std::size_t>(g.rows * g.cols));
    return g;
}

/// Writes a one-window preprocessed split the CLI can read.
void write_split(const fs::path& dir, const BevWindow& w, const std::string& id) {
    fs::create_directories(dir / "val");
    save_bev_window(dir / "val" / (id + ".lmsg"), w);
    write_manifest(dir / "val" / "manifest.csv", {{id, w.sequence_id, w.frame_index, w.motion_points, false}});
}

std::vector<Point> block(double x0, double y0, int n, float z) {
    std::vector<Point> pts;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            pts.push_back(Point{static_cast<float>(x0 + 0.1 + 0.2 * i), static_cast<float>(y0 + 0.1 + 0.2 * j), z, 0.f});
    return pts;
}

}  // namespace

TEST(CliSynth, WritesKittiLayout) {
    test::TempDir tmp;
    const CliResult r = cli("synth --sequences 4 --frames 60 --seed 7 --out data", tmp.path());
    ASSERT_EQ(r.code, 0) << r.output;
    for (int s = 0; s < 4; ++s) {
        const fs::path dir = tmp.path() / "data" / "sequences" / ("0" + std::to_string(s));
        const auto frames = load_sequence(dir);
        EXPECT_EQ(frames.size(), 60u);
        EXPECT_TRUE(frames.front().cloud.has_labels());
    }
    EXPECT_TRUE(fs::exists(tmp.path() / "data" / "run.txt"));
    EXPECT_FALSE(fs::exists(tmp.path() / "data" / ".limoseg.lock"));
}

TEST(CliSynth, SameSeedSameTree) {
    test::TempDir tmp;
    ASSERT_EQ(cli("synth --sequences 2 --frames 6 --seed 3 --out a", tmp.path()).code, 0);
    ASSERT_EQ(cli("synth --sequences 2 --frames 6 --seed 3 --out b", tmp.path()).code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(tmp.path() / "a")) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), tmp.path() / "a");
        EXPECT_EQ(slurp(e.path()), slurp(tmp.path() / "b" / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 20u);
}

TEST(CliSynth, RefusesNonEmptyOutputWithoutForce) {
    test::TempDir tmp;
    ASSERT_EQ(cli("synth --sequences 1 --frames 4 --out d", tmp.path()).code, 0);
    const CliResult again = cli("synth --sequences 1 --frames 4 --out d", tmp.path());
    EXPECT_NE(again.code, 0);
    EXPECT_NE(again.output.find("--force"), std::string::npos) << again.output;
    EXPECT_EQ(cli("synth --sequences 1 --frames 4 --out d --force", tmp.path()).code, 0);
}

TEST(CliSynth, LockedOutputIsRefused) {
    test::TempDir tmp;
    fs::create_directories(tmp.path() / "d");
    test::write_text(tmp.path() / "d" / ".limoseg.lock", "");
    const CliResult r = cli("synth --sequences 1 --frames 4 --out d --force", tmp.path());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("locked"), std::string::npos) << r.output;
}

TEST(CliPreprocess, NoMoversLeavesNoTrainingWindows) {
    test::TempDir tmp;
    ASSERT_EQ(cli("synth --sequences 2 --frames 8 --moving-cars 0 --out d", tmp.path()).code, 0);
    ASSERT_EQ(cli("preprocess --data d --out p", tmp.path()).code, 0);
    EXPECT_TRUE(read_manifest(tmp.path() / "p" / "train" / "manifest.csv").empty());
    EXPECT_EQ(read_manifest(tmp.path() / "p" / "val" / "manifest.csv").size(), 6u);
}

TEST(CliAugment, MotionlessSequencesGainTrainingWindows) {
    test::TempDir tmp;
    ASSERT_EQ(cli("synth --sequences 2 --frames 8 --moving-cars 0 --out d", tmp.path()).code, 0);
    ASSERT_EQ(cli("augment --data d --out a --seed 1", tmp.path()).code, 0);
    ASSERT_EQ(cli("preprocess --data a --out p", tmp.path()).code, 0);
    const auto train = read_manifest(tmp.path() / "p" / "train" / "manifest.csv");
    // 8 frames -> two 4-frame runs -> 2 windows each
    EXPECT_EQ(train.size(), 4u);
    for (const auto& e : train) {
        EXPECT_TRUE(e.augmented);
        EXPECT_GE(e.motion_points, kDefaultMotionThreshold);
    }
    for (const auto& e : read_manifest(tmp.path() / "p" / "val" / "manifest.csv")) EXPECT_FALSE(e.augmented);
}

TEST(CliPipeline, DeterministicArtifactsAndErrors) {
    test::TempDir tmp;
    ASSERT_EQ(cli("synth --sequences 2 --frames 8 --seed 5 --out d", tmp.path()).code, 0);
    ASSERT_EQ(cli("preprocess --data d --out p", tmp.path()).code, 0);
    const std::string small = "--config small.txt ";
    test::write_text(tmp.path() / "small.txt",
                      "model.encoder_channels=2,4,4\nmodel.joint_channels=4,4,4,4\nmodel.decoder_channels=4,4,4,4,4\n");
    for (const char* out : {"t1", "t2"}) {
        const CliResult r = cli("train --data p --epochs 2 --seed 4 " + small + "--out " + out, tmp.path());
        ASSERT_EQ(r.code, 0) << r.output;
    }
    EXPECT_EQ(slurp(tmp.path() / "t1" / "model.lmsg"), slurp(tmp.path() / "t2" / "model.lmsg"));
    EXPECT_EQ(slurp(tmp.path() / "t1" / "metrics.csv"), slurp(tmp.path() / "t2" / "metrics.csv"));

    const CliResult ev = cli("eval --data p --checkpoint t1/model.lmsg --precision fp32,fp16,int8 --out e", tmp.path());
    ASSERT_EQ(ev.code, 0) << ev.output;
    const std::string csv = slurp(tmp.path() / "e" / "eval.csv");
    EXPECT_EQ(csv.rfind("variant,residual_mode,precision,iou_moving,tp,fp,fn,tn\n", 0), 0u);
    EXPECT_NE(csv.find(",fp16,"), std::string::npos);
    EXPECT_NE(csv.find(",int8,"), std::string::npos);

    // architecture named on the command line must match the checkpoint
    const CliResult wrong = cli("eval --data p --checkpoint t1/model.lmsg --variant single_encoder --residual sub --out e2", tmp.path());
    EXPECT_NE(wrong.code, 0);

    const CliResult missing = cli("infer --data p --checkpoint absent/model.lmsg --out i", tmp.path());
    EXPECT_NE(missing.code, 0);
    EXPECT_NE(missing.output.find("absent/model.lmsg"), std::string::npos) << missing.output;

    ASSERT_EQ(cli("infer --data p --checkpoint t1/model.lmsg --out i", tmp.path()).code, 0);
    EXPECT_EQ(read_pgm(tmp.path() / "i" / "masks" / "s01_f000002.pgm").rows, 96);

    const CliResult bench = cli("bench --checkpoint t1/model.lmsg --iterations 10 --warmup 1 --out b", tmp.path());
    ASSERT_EQ(bench.code, 0) << bench.output;
    const std::string lat = slurp(tmp.path() / "b" / "latency.csv");
    EXPECT_EQ(std::count(lat.begin(), lat.end(), '\n'), 14);

    ASSERT_EQ(cli("viz --data p --predictions i --out v", tmp.path()).code, 0);
    for (const char* f : {"s01_f000002_frames.ppm", "s01_f000002_truth.pgm", "s01_f000002_residual.pgm",
                          "s01_f000002_prediction.pgm", "run.txt"})
        EXPECT_TRUE(fs::exists(tmp.path() / "v" / f)) << f;
}

TEST(CliConfig, FlagsOverrideConfigFile) {
    test::TempDir tmp;
    test::write_text(tmp.path() / "c.txt", "synth.frames=5\nsynth.sequences=2\n");
    ASSERT_EQ(cli("synth --config c.txt --sequences 1 --out d", tmp.path()).code, 0);
    EXPECT_EQ(load_sequence(tmp.path() / "d" / "sequences" / "00").size(), 5u);
    EXPECT_FALSE(fs::exists(tmp.path() / "d" / "sequences" / "01"));
    const std::string run = slurp(tmp.path() / "d" / "run.txt");
    EXPECT_NE(run.find("synth.frames=5\n"), std::string::npos);
    EXPECT_NE(run.find("synth.sequences=1\n"), std::string::npos);
}

TEST(CliViz, EmptyWindowIsBlack) {
    test::TempDir tmp;
    BevWindow w;
    for (auto& f : w.frames) f = BevImage(96, 64, 0.f);
    w.residual = residual_mul(w.frames[0], w.frames[1], w.frames[2]);
    w.label_mask = Mask(96, 64, kStatic);
    w.occupancy_mask = Mask(96, 64, 0);
    write_split(tmp.path() / "p", w, "empty");
    ASSERT_EQ(cli("viz --data p --out v", tmp.path()).code, 0);
    for (const char* f : {"empty_truth.pgm", "empty_residual.pgm"}) {
        const Pgm g = read_pgm(tmp.path() / "v" / f);
        EXPECT_EQ(g.pixels, std::string(96 * 64, '\0')) << f;
    }
    const std::string ppm = slurp(tmp.path() / "v" / "empty_frames.ppm");
    EXPECT_EQ(ppm.substr(ppm.size() - 96 * 64 * 3), std::string(96 * 64 * 3, '\0'));
}

TEST(CliViz, ResidualBrightOnStaticDarkOnMover) {
    // static wall seen in all frames, plus a car whose footprints never overlap
    std::vector<Frame> frames;
    for (int k = 0; k < 3; ++k) {
        std::vector<Point> pts = block(10.0, -2.0, 4, 1.f);
        std::vector<std::uint16_t> ids(pts.size(), label_id::kBuilding);
        for (const auto& p : block(2.0 + 2.0 * (2 - k), 2.0, 3, 0.f)) {
            pts.push_back(p);
            ids.push_back(label_id::kMovingCar);
        }
        Frame f;
        f.cloud = test::labeled(pts, ids);
        frames.push_back(f);
    }
    const BevWindow w = build_bev_window(build_windows(frames)[0], GridSpec{});
    test::TempDir tmp;
    write_split(tmp.path() / "p", w, "scene");
    ASSERT_EQ(cli("viz --data p --out v", tmp.path()).code, 0);
    const Pgm res = read_pgm(tmp.path() / "v" / "scene_residual.pgm");
    const Pgm truth = read_pgm(tmp.path() / "v" / "scene_truth.pgm");
    int bright = 0, dark = 0;
    for (int r = 0; r < 96; ++r)
        for (int c = 0; c < 64; ++c) {
            const bool all = w.frames[0].at(r, c) > 0 && w.frames[1].at(r, c) > 0 && w.frames[2].at(r, c) > 0;
            if (all) {
                EXPECT_GT(res.at(r, c), 0u);
                ++bright;
            }
            if (w.label_mask.at(r, c) == kMoving) {
                EXPECT_EQ(res.at(r, c), 0u);
                EXPECT_EQ(truth.at(r, c), 255u);
                ++dark;
            }
        }
    EXPECT_EQ(bright, 16);
    EXPECT_EQ(dark, 9);
}
