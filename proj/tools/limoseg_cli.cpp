#include "limoseg/augment.hpp"
#include "limoseg/container.hpp"
#include "limoseg/error.hpp"
#include "limoseg/evaluate.hpp"
#include "limoseg/ingest.hpp"
#include "limoseg/log.hpp"
#include "limoseg/model.hpp"
#include "limoseg/preproc.hpp"
#include "limoseg/quantize.hpp"
#include "limoseg/random.hpp"
#include "limoseg/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace limoseg;

namespace {

// ---- option plumbing ---------------------------------------------------------------

std::string text_of(const std::string& v) { return v; }
std::string text_of(int v) { return std::to_string(v); }
std::string text_of(std::uint64_t v) { return std::to_string(v); }
std::string text_of(double v) { return format_double(v); }
std::string text_of(bool v) { return v ? "true" : "false"; }

void parse_into(const std::string& key, const std::string& s, std::string& v) {
    (void)key;
    v = s;
}
void parse_into(const std::string& key, const std::string& s, int& v) {
    KeyValues kv;
    kv.set(key, s);
    v = static_cast<int>(kv.get_int(key));
}
void parse_into(const std::string& key, const std::string& s, std::uint64_t& v) {
    KeyValues kv;
    kv.set(key, s);
    v = static_cast<std::uint64_t>(kv.get_int(key));
}
void parse_into(const std::string& key, const std::string& s, double& v) {
    KeyValues kv;
    kv.set(key, s);
    v = kv.get_double(key);
}
void parse_into(const std::string& key, const std::string& s, bool& v) {
    KeyValues kv;
    kv.set(key, s);
    v = kv.get_bool(key);
}

// Flag <-> config key binding; explicit flags beat the config file, which beats defaults.
struct Binding {
    CLI::Option* option;
    std::string key;
    std::function<void(const std::string&)> load;
    std::function<std::string()> dump;
};

struct Command {
    CLI::App* app = nullptr;
    std::vector<Binding> bindings;

    std::string config_path;
    std::string out;
    bool force = false;
    std::uint64_t seed = 0;

    template <typename T>
    CLI::Option* bind(const std::string& flag, T& var, const std::string& key, const std::string& help) {
        CLI::Option* o = app->add_option(flag, var, help)->capture_default_str();
        bindings.push_back({o, key, [key, &var](const std::string& s) { parse_into(key, s, var); },
                            [&var] { return text_of(var); }});
        return o;
    }
    CLI::Option* bind_flag(const std::string& flag, bool& var, const std::string& key, const std::string& help) {
        CLI::Option* o = app->add_flag(flag, var, help);
        bindings.push_back({o, key, [key, &var](const std::string& s) { parse_into(key, s, var); },
                            [&var] { return text_of(var); }});
        return o;
    }

    /// Config file entries overlaid with every bound value.
    KeyValues resolve() {
        KeyValues kv;
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw MissingArtifactError("config file not found: " + config_path);
            kv = KeyValues::load(config_path);
        }
        for (auto& b : bindings) {
            if (b.option->count() == 0 && kv.has(b.key)) b.load(kv.get(b.key));
            kv.set(b.key, b.dump());
        }
        return kv;
    }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
    Command c;
    c.app = root.add_subcommand(name, help);
    return c;
}

void add_common(Command& c) {
    c.app->add_option("--config", c.config_path, "key=value file; explicit flags take precedence");
    c.app->add_option("--out", c.out, "output directory")->required();
    c.app->add_flag("--force", c.force, "write into a non-empty output directory");
    c.bind("--seed", c.seed, "seed", "random seed");
}

// ---- output directory ------------------------------------------------------------------

class OutputDir {
public:
    OutputDir(const fs::path& dir, bool force) : dir_(dir) {
        if (fs::exists(dir_)) {
            if (!fs::is_directory(dir_)) throw IoError("output path exists and is not a directory: " + dir_.string());
            if (!fs::is_empty(dir_) && !force) {
                throw PreconditionError("output directory " + dir_.string() + " is not empty (use --force)");
            }
        }
        fs::create_directories(dir_);
        lock_ = dir_ / ".limoseg.lock";
        std::FILE* f = std::fopen(lock_.string().c_str(), "wx");
        if (!f) throw IoError("output directory " + dir_.string() + " is locked by another run (" + lock_.string() + ")");
        std::fclose(f);
    }
    ~OutputDir() {
        std::error_code ec;
        fs::remove(lock_, ec);
    }
    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;

    const fs::path& path() const { return dir_; }
    fs::path operator/(const std::string& name) const { return dir_ / name; }

private:
    fs::path dir_;
    fs::path lock_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

void write_run_record(const OutputDir& out, const std::string& command, const KeyValues& kv) {
    write_text(out / "run.txt", "# limoseg " + command + "\ncommand=" + command + "\n" + kv.str());
}

void require_exists(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw MissingArtifactError("missing " + what + ": " + p.string());
}

// ---- grid ----------------------------------------------------------------------------------

GridSpec grid_from(const KeyValues& kv) {
    const std::string preset = kv.get_or("grid.preset", std::string("desk"));
    GridSpec g;
    if (preset == "paper") {
        g = GridSpec::paper();
    } else if (preset != "desk") {
        throw InvalidConfigError("unknown grid preset '" + preset + "' (desk|paper)");
    }
    g.x_min = kv.get_or("grid.x_min", g.x_min);
    g.x_max = kv.get_or("grid.x_max", g.x_max);
    g.y_min = kv.get_or("grid.y_min", g.y_min);
    g.y_max = kv.get_or("grid.y_max", g.y_max);
    g.resolution = kv.get_or("grid.resolution", g.resolution);
    g.z_min = kv.get_or("grid.z_min", g.z_min);
    g.z_max = kv.get_or("grid.z_max", g.z_max);
    g.validate();
    return g;
}

void put_grid(KeyValues& kv, const GridSpec& g) {
    kv.set("grid.x_min", g.x_min);
    kv.set("grid.x_max", g.x_max);
    kv.set("grid.y_min", g.y_min);
    kv.set("grid.y_max", g.y_max);
    kv.set("grid.resolution", g.resolution);
    kv.set("grid.z_min", g.z_min);
    kv.set("grid.z_max", g.z_max);
}

// ---- dataset trees ---------------------------------------------------------------------------

std::string two_digit(int v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", v);
    return buf;
}

struct SequenceDir {
    fs::path path;
    int sequence_id = 0;
    bool augmented = false;
    int first_frame = 0;
    int run = -1;
};

/// `NN` for recorded sequences, `NN-augRR` (+ source.txt) for synthesized motion runs.
std::vector<SequenceDir> list_sequences(const fs::path& root) {
    const fs::path seqs = root / "sequences";
    require_exists(seqs, "dataset sequences directory");
    std::vector<SequenceDir> out;
    for (const auto& e : fs::directory_iterator(seqs)) {
        if (!e.is_directory()) continue;
        const std::string name = e.path().filename().string();
        SequenceDir d;
        d.path = e.path();
        const auto dash = name.find("-aug");
        try {
            d.sequence_id = std::stoi(name.substr(0, dash));
        } catch (const std::exception&) {
            throw MalformedFileError("unexpected sequence directory name: " + e.path().string());
        }
        if (dash != std::string::npos) {
            d.augmented = true;
            const KeyValues src = KeyValues::load(e.path() / "source.txt");
            d.first_frame = static_cast<int>(src.get_int("first_frame"));
            d.run = static_cast<int>(src.get_int("run"));
        }
        out.push_back(d);
    }
    std::sort(out.begin(), out.end(), [](const SequenceDir& a, const SequenceDir& b) { return a.path < b.path; });
    if (out.empty()) throw MissingArtifactError("no sequences under " + seqs.string());
    return out;
}

std::string window_id(const BevWindow& w, int run) {
    char buf[64];
    if (run >= 0) {
        std::snprintf(buf, sizeof buf, "s%02d_a%02d_f%06d", w.sequence_id, run, w.frame_index);
    } else {
        std::snprintf(buf, sizeof buf, "s%02d_f%06d", w.sequence_id, w.frame_index);
    }
    return buf;
}

struct LoadedSplit {
    std::vector<BevWindow> windows;
    std::vector<std::string> ids;
};

LoadedSplit load_split(const fs::path& data, const std::string& split) {
    const fs::path dir = data / split;
    const fs::path manifest = dir / "manifest.csv";
    require_exists(manifest, "window manifest for split '" + split + "'");
    LoadedSplit out;
    for (const auto& e : read_manifest(manifest)) {
        const fs::path p = dir / (e.window_id + ".lmsg");
        require_exists(p, "window file");
        out.windows.push_back(load_bev_window(p));
        out.ids.push_back(e.window_id);
    }
    return out;
}

void apply_residual(std::vector<BevWindow>& windows, ResidualMode mode) {
    for (auto& w : windows) w.residual = compute_residual(mode, w.frames[0], w.frames[1], w.frames[2]);
}

// ---- images ----------------------------------------------------------------------------------

std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, 0.f, 1.f);
    return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

// forward (+x) points up: grid row r is image row rows-1-r
void write_pgm(const fs::path& path, int rows, int cols, const std::function<std::uint8_t(int, int)>& pixel) {
    std::string bytes = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) bytes.push_back(static_cast<char>(pixel(rows - 1 - i, c)));
    write_text(path, bytes);
}

void write_ppm(const fs::path& path, const BevWindow& w) {
    const int rows = w.rows(), cols = w.cols();
    std::string bytes = "P6\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c)
            for (int k = 0; k < 3; ++k) bytes.push_back(static_cast<char>(to_byte(w.frames[k].at(rows - 1 - i, c))));
    write_text(path, bytes);
}

void write_mask(const fs::path& path, const Mask& m) {
    write_pgm(path, m.rows, m.cols, [&](int r, int c) { return m.at(r, c) == kMoving ? std::uint8_t{255} : std::uint8_t{0}; });
}

Mask read_mask(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("missing predicted mask: " + path.string());
    std::string magic;
    int cols = 0, rows = 0, maxval = 0;
    f >> magic >> cols >> rows >> maxval;
    f.get();
    if (magic != "P5" || rows <= 0 || cols <= 0 || maxval != 255) throw MalformedFileError("not a mask image: " + path.string());
    Mask m(rows, cols, kStatic);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) {
            const int v = f.get();
            if (v == EOF) throw MalformedFileError("truncated mask image: " + path.string());
            m.at(rows - 1 - i, c) = v >= 128 ? kMoving : kStatic;
        }
    return m;
}

// ---- subcommands --------------------------------------------------------------------------------

struct SynthArgs {
    int sequences = 4;
    int frames = 60;
    int moving_cars = 4;
    int parked_cars = 14;
    int motionless = 0;
};

void cmd_synth(Command& c, SynthArgs& a) {
    const KeyValues kv = c.resolve();
    if (a.sequences < 1) throw InvalidConfigError("--sequences must be >= 1");
    if (a.motionless < 0 || a.motionless > a.sequences) throw InvalidConfigError("--motionless-sequences out of range");
    OutputDir out(c.out, c.force);
    for (int s = 0; s < a.sequences; ++s) {
        SceneConfig sc;
        sc.frames = a.frames;
        sc.moving_cars = s < a.motionless ? 0 : a.moving_cars;
        sc.parked_cars = a.parked_cars;
        sc.seed = Rng::derive(c.seed, static_cast<std::uint64_t>(s));
        const SyntheticSequence seq = generate_scene(sc);
        write_sequence(out / "sequences" / two_digit(s), seq.frames);
        log_info("synth: sequence " + two_digit(s) + " (" + std::to_string(sc.moving_cars) + " movers)");
    }
    write_run_record(out, "synth", kv);
}

struct AugmentArgs {
    std::string data;
    int n_frames = 4;
    double dx_low = 0.5, dx_high = 1.5, dy_low = -0.2, dy_high = 0.2;
};

void cmd_augment(Command& c, AugmentArgs& a) {
    const KeyValues kv = c.resolve();
    AugmentParams params;
    params.n_frames = a.n_frames;
    params.dx_range = {a.dx_low, a.dx_high};
    params.dy_range = {a.dy_low, a.dy_high};
    params.seed = c.seed;
    params.validate();
    const auto dirs = list_sequences(a.data);
    OutputDir out(c.out, c.force);
    int runs_total = 0;
    for (const auto& d : dirs) {
        if (d.augmented) continue;
        const std::vector<Frame> frames = load_sequence(d.path);
        write_sequence(out / "sequences" / two_digit(d.sequence_id), frames);
        const AugmentedFrames aug = augment_frames(frames, params, d.sequence_id);
        std::map<int, std::pair<int, std::vector<Frame>>> runs;
        for (std::size_t i = 0; i < aug.frames.size(); ++i) {
            if (aug.run_id[i] < 0) continue;
            auto& r = runs[aug.run_id[i]];
            if (r.second.empty()) r.first = static_cast<int>(i);
            r.second.push_back(aug.frames[i]);
        }
        for (const auto& [run, data] : runs) {
            const fs::path dir = out / "sequences" / (two_digit(d.sequence_id) + "-aug" + two_digit(run));
            write_sequence(dir, data.second);
            KeyValues src;
            src.set("sequence", d.sequence_id);
            src.set("first_frame", data.first);
            src.set("run", run);
            write_text(dir / "source.txt", src.str());
            ++runs_total;
        }
    }
    log_info("augment: " + std::to_string(runs_total) + " synthesized motion runs");
    write_run_record(out, "augment", kv);
}

struct PreprocessArgs {
    std::string data;
    std::string residual = "mul";
    int val_sequence = -1;
    int min_motion = static_cast<int>(kDefaultMotionThreshold);
    bool no_filter = false;
    std::string grid = "desk";
};

void cmd_preprocess(Command& c, PreprocessArgs& a) {
    KeyValues kv = c.resolve();
    const GridSpec grid = grid_from(kv);
    put_grid(kv, grid);
    BevOptions opt;
    opt.residual = parse_residual_mode(a.residual);
    opt.semantics = true;
    const auto dirs = list_sequences(a.data);
    int val = a.val_sequence;
    if (val < 0) {
        for (const auto& d : dirs)
            if (!d.augmented) val = std::max(val, d.sequence_id);
    }
    std::vector<int> ids;
    for (const auto& d : dirs)
        if (!d.augmented) ids.push_back(d.sequence_id);
    if (ids.size() >= 2) split_dataset(ids, val);
    kv.set("preprocess.val_sequence", val);

    OutputDir out(c.out, c.force);
    fs::create_directories(out / "train");
    fs::create_directories(out / "val");
    std::vector<ManifestEntry> train_entries, val_entries;
    std::size_t total = 0, dropped = 0;
    for (const auto& d : dirs) {
        const bool is_val = d.sequence_id == val && ids.size() >= 2;
        if (is_val && d.augmented) continue;  // held-out data stays real
        std::vector<FrameWindow> windows = build_windows(load_sequence(d.path), d.sequence_id);
        for (auto& w : windows) {
            w.frame_index += d.first_frame;
            w.augmented = d.augmented;
        }
        total += windows.size();
        if (!is_val && !a.no_filter) {
            const std::size_t before = windows.size();
            windows = filter_training_windows(std::move(windows), static_cast<std::size_t>(a.min_motion));
            dropped += before - windows.size();
        }
        const std::string split = is_val ? "val" : "train";
        for (const auto& w : windows) {
            const BevWindow b = build_bev_window(w, grid, opt);
            const std::string id = window_id(b, d.augmented ? d.run : -1);
            save_bev_window(out / split / (id + ".lmsg"), b);
            (is_val ? val_entries : train_entries).push_back({id, b.sequence_id, b.frame_index, b.motion_points, b.augmented});
        }
    }
    write_manifest(out / "train" / "manifest.csv", train_entries);
    write_manifest(out / "val" / "manifest.csv", val_entries);
    log_info("preprocess: " + std::to_string(total) + " windows, " + std::to_string(dropped) +
             " dropped by the motion filter, " + std::to_string(train_entries.size()) + " train / " +
             std::to_string(val_entries.size()) + " val");
    write_run_record(out, "preprocess", kv);
}

struct TrainArgs {
    std::string data;
    std::string variant = "multi_encoder_joint";
    std::string residual = "mul";
    int epochs = 30;
    int batch_size = 12;
    double lr = 1e-3;
    bool uniform = false;
};

void cmd_train(Command& c, TrainArgs& a) {
    KeyValues kv = c.resolve();
    kv.set("train.seed", kv.get("seed"));
    LoadedSplit tr = load_split(a.data, "train");
    LoadedSplit va = load_split(a.data, "val");
    if (tr.windows.empty()) throw PreconditionError("no training windows in " + (fs::path(a.data) / "train").string());
    kv.set("model.rows", tr.windows.front().rows());
    kv.set("model.cols", tr.windows.front().cols());
    const TrainConfig cfg = TrainConfig::from_kv(kv);
    apply_residual(tr.windows, cfg.model.residual_mode);
    apply_residual(va.windows, cfg.model.residual_mode);

    OutputDir out(c.out, c.force);
    const TrainResult r = train(tr.windows, va.windows, cfg, [](const EpochMetrics& m) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d loss %.5f val_iou %s", m.epoch, m.train_loss, format_metric(m.val_iou).c_str());
        log_info(buf);
    });
    save_checkpoint(out / "model.lmsg", r.best, training_metadata(r, r.best_epoch));
    save_checkpoint(out / "last.lmsg", r.last, training_metadata(r, cfg.epochs));
    write_text(out / "metrics.csv", metrics_csv(r.log));
    write_run_record(out, "train", kv);
}

struct EvalArgs {
    std::string data;
    std::string split = "val";
    std::string checkpoint;
    std::string precision = "fp32";
    std::string variant;
    std::string residual;
    int calib = 10;
    int batch_size = 12;
};

std::vector<Precision> parse_precisions(const std::string& text) {
    std::vector<Precision> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_precision(item));
    if (out.empty()) throw InvalidConfigError("no precision given");
    return out;
}

/// Loads a checkpoint, optionally checking the architecture named on the command line.
Model load_model(const std::string& path, const std::string& variant, const std::string& residual) {
    if (path.empty()) throw MissingArtifactError("missing checkpoint: pass --checkpoint");
    require_exists(path, "checkpoint");
    const Checkpoint ck = load_checkpoint(path);
    ModelConfig expected = ck.config;
    if (!variant.empty()) expected.variant = parse_variant(variant);
    if (!residual.empty()) expected.residual_mode = parse_residual_mode(residual);
    return model_from_checkpoint(ck, &expected);
}

QuantizedModel quantized(const Model& model, Precision p, const std::string& data, int calib) {
    QuantScheme scheme{p, std::nullopt};
    if (p == Precision::kInt8) {
        LoadedSplit cal = load_split(data, "train");
        apply_residual(cal.windows, model.config().residual_mode);
        scheme.activations = calibrate_activations(model, cal.windows, std::min<int>(calib, static_cast<int>(cal.windows.size())));
    }
    return QuantizedModel(model, scheme);
}

void cmd_eval(Command& c, EvalArgs& a) {
    const KeyValues kv = c.resolve();
    const Model model = load_model(a.checkpoint, a.variant, a.residual);
    LoadedSplit ds = load_split(a.data, a.split);
    apply_residual(ds.windows, model.config().residual_mode);
    const auto precisions = parse_precisions(a.precision);
    const Checkpoint ck = make_checkpoint(model);

    OutputDir out(c.out, c.force);
    std::string csv = std::string(kEvalCsvHeader) + "\n";
    std::string sizes = "precision,parameters,bytes,megabytes\n";
    for (Precision p : precisions) {
        const QuantizedModel q = quantized(model, p, a.data, a.calib);
        EvalSummary s;
        s.variant = to_string(model.config().variant);
        s.residual_mode = to_string(model.config().residual_mode);
        s.precision = to_string(p);
        s.counts = evaluate_model(q.model(), ds.windows, a.batch_size, q.hook());
        csv += eval_csv_row(s) + "\n";
        const SizeReport sz = model_size(ck, p);
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6f\n", to_string(p).c_str(), sz.parameters, sz.bytes, sz.megabytes());
        sizes += buf;
        log_info("eval " + s.precision + ": iou_moving " + format_metric(iou_moving(s.counts)));
    }
    write_text(out / "eval.csv", csv);
    write_text(out / "size.csv", sizes);
    write_run_record(out, "eval", kv);
}

void cmd_infer(Command& c, EvalArgs& a) {
    const KeyValues kv = c.resolve();
    const Model model = load_model(a.checkpoint, a.variant, a.residual);
    LoadedSplit ds = load_split(a.data, a.split);
    apply_residual(ds.windows, model.config().residual_mode);
    const QuantizedModel q = quantized(model, parse_precision(a.precision), a.data, a.calib);

    OutputDir out(c.out, c.force);
    fs::create_directories(out / "masks");
    std::string index = "window_id,moving_cells\n";
    const std::size_t bs = static_cast<std::size_t>(std::max(1, a.batch_size));
    for (std::size_t start = 0; start < ds.windows.size(); start += bs) {
        std::vector<const BevWindow*> batch;
        for (std::size_t i = start; i < std::min(ds.windows.size(), start + bs); ++i) batch.push_back(&ds.windows[i]);
        const auto masks = predict_masks(q.forward(batch));
        for (std::size_t k = 0; k < masks.size(); ++k) {
            const std::string& id = ds.ids[start + k];
            write_mask(out / "masks" / (id + ".pgm"), masks[k]);
            index += id + "," + std::to_string(std::count(masks[k].data.begin(), masks[k].data.end(), kMoving)) + "\n";
        }
    }
    write_text(out / "predictions.csv", index);
    write_run_record(out, "infer", kv);
}

struct BenchArgs {
    std::string data;
    std::string split = "val";
    std::string checkpoint;
    std::string precision = "fp32";
    std::string variant = "multi_encoder_joint";
    int warmup = 5;
    int iterations = 100;
    int calib = 10;
};

void cmd_bench(Command& c, BenchArgs& a) {
    KeyValues kv = c.resolve();
    std::optional<Model> model;
    if (!a.checkpoint.empty()) {
        model.emplace(load_model(a.checkpoint, "", ""));
    } else {
        // untrained weights time the same as trained ones
        kv.set("model.variant", a.variant);
        ModelConfig mc = ModelConfig::from_kv(kv);
        mc.init_seed = c.seed;
        model.emplace(mc);
    }
    BevWindow window;
    if (!a.data.empty()) {
        LoadedSplit ds = load_split(a.data, a.split);
        if (ds.windows.empty()) throw PreconditionError("no windows in split '" + a.split + "'");
        window = ds.windows.front();
    } else {
        SceneConfig sc;
        sc.frames = 3;
        sc.seed = c.seed;
        BevOptions opt;
        opt.semantics = true;
        window = build_bev_window(build_windows(generate_scene(sc).frames)[0], GridSpec{}, opt);
    }
    window.residual = compute_residual(model->config().residual_mode, window.frames[0], window.frames[1], window.frames[2]);
    const Precision p = parse_precision(a.precision);
    const QuantizedModel q = quantized(*model, p, a.data, a.calib);
    OutputDir out(c.out, c.force);
    const LatencyReport r = benchmark(q.model(), window, a.warmup, a.iterations, to_string(p), q.hook());
    write_text(out / "latency.csv", latency_csv(r));
    char buf[160];
    std::snprintf(buf, sizeof buf, "bench %s: mean %.3f ms, p50 %.3f ms, p99 %.3f ms", to_string(p).c_str(), r.mean_ms,
                  r.p50_ms, r.p99_ms);
    log_info(buf);
    write_run_record(out, "bench", kv);
}

struct VizArgs {
    std::string data;
    std::string split = "val";
    std::string window;
    std::string predictions;
    std::string residual;
    int limit = 1;
};

void cmd_viz(Command& c, VizArgs& a) {
    const KeyValues kv = c.resolve();
    LoadedSplit ds = load_split(a.data, a.split);
    if (!a.residual.empty()) apply_residual(ds.windows, parse_residual_mode(a.residual));
    std::vector<std::size_t> pick;
    if (!a.window.empty()) {
        const auto it = std::find(ds.ids.begin(), ds.ids.end(), a.window);
        if (it == ds.ids.end()) throw MissingArtifactError("missing window: " + (fs::path(a.data) / a.split / (a.window + ".lmsg")).string());
        pick.push_back(static_cast<std::size_t>(it - ds.ids.begin()));
    } else {
        for (std::size_t i = 0; i < ds.windows.size() && static_cast<int>(i) < a.limit; ++i) pick.push_back(i);
    }
    OutputDir out(c.out, c.force);
    for (std::size_t i : pick) {
        const BevWindow& w = ds.windows[i];
        const std::string& id = ds.ids[i];
        write_ppm(out / (id + "_frames.ppm"), w);
        write_mask(out / (id + "_truth.pgm"), w.label_mask);
        write_pgm(out / (id + "_residual.pgm"), w.rows(), w.cols(), [&](int r, int col) { return to_byte(w.residual.at(r, col)); });
        if (!a.predictions.empty()) {
            const fs::path p = fs::path(a.predictions) / "masks" / (id + ".pgm");
            require_exists(p, "predicted mask");
            write_mask(out / (id + "_prediction.pgm"), read_mask(p));
        }
    }
    write_run_record(out, "viz", kv);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"limoseg: BEV LiDAR motion segmentation toolkit"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "only print warnings and errors");

    Command synth = make_command(app, "synth", "generate synthetic KITTI-layout sequences");
    add_common(synth);
    SynthArgs sa;
    synth.bind("--sequences", sa.sequences, "synth.sequences", "number of sequences");
    synth.bind("--frames", sa.frames, "synth.frames", "frames per sequence");
    synth.bind("--moving-cars", sa.moving_cars, "synth.moving_cars", "moving cars per sequence");
    synth.bind("--parked-cars", sa.parked_cars, "synth.parked_cars", "parked cars per sequence");
    synth.bind("--motionless-sequences", sa.motionless, "synth.motionless_sequences",
               "the first K sequences get no moving cars");

    Command augment = make_command(app, "augment", "add cut-and-paste motion runs to a dataset tree");
    add_common(augment);
    AugmentArgs aa;
    augment.bind("--data", aa.data, "data", "dataset root (contains sequences/)")->required();
    augment.bind("--n-frames", aa.n_frames, "augment.n_frames", "frames per synthesized run");
    augment.bind("--dx-min", aa.dx_low, "augment.dx_min", "lower bound of the per-frame x step (m)");
    augment.bind("--dx-max", aa.dx_high, "augment.dx_max", "upper bound of the per-frame x step (m)");
    augment.bind("--dy-min", aa.dy_low, "augment.dy_min", "lower bound of the per-frame y step (m)");
    augment.bind("--dy-max", aa.dy_high, "augment.dy_max", "upper bound of the per-frame y step (m)");

    Command pre = make_command(app, "preprocess", "rasterize windows into BEV tensors");
    add_common(pre);
    PreprocessArgs pa;
    pre.bind("--data", pa.data, "data", "dataset root (contains sequences/)")->required();
    pre.bind("--residual", pa.residual, "preprocess.residual", "residual layer: mul|sub|none");
    pre.bind("--val-sequence", pa.val_sequence, "preprocess.val_sequence", "held-out sequence id (default: last)");
    pre.bind("--min-motion-points", pa.min_motion, "preprocess.min_motion_points", "training window motion filter");
    pre.bind_flag("--no-filter", pa.no_filter, "preprocess.no_filter", "keep every training window");
    pre.bind("--grid", pa.grid, "grid.preset", "grid preset: desk|paper");

    Command tr = make_command(app, "train", "train a segmentation model");
    add_common(tr);
    TrainArgs ta;
    tr.bind("--data", ta.data, "data", "preprocessed directory")->required();
    tr.bind("--variant", ta.variant, "model.variant",
            "multi_encoder_joint|multi_encoder|single_encoder|single_encoder_semantics");
    tr.bind("--residual", ta.residual, "model.residual", "mul|sub|none");
    tr.bind("--epochs", ta.epochs, "train.epochs", "epochs");
    tr.bind("--batch-size", ta.batch_size, "train.batch_size", "batch size");
    tr.bind("--lr", ta.lr, "train.lr", "Adam learning rate");
    tr.bind_flag("--uniform-weights", ta.uniform, "train.uniform_weights", "disable class weighting");

    Command ev = make_command(app, "eval", "moving-class IoU over a split");
    add_common(ev);
    EvalArgs ea;
    ev.bind("--data", ea.data, "data", "preprocessed directory")->required();
    ev.bind("--split", ea.split, "eval.split", "train|val");
    ev.bind("--checkpoint", ea.checkpoint, "checkpoint", "model checkpoint");
    ev.bind("--precision", ea.precision, "eval.precision", "comma list of fp32|fp16|int8");
    ev.bind("--variant", ea.variant, "eval.variant", "expected architecture (checked against the checkpoint)");
    ev.bind("--residual", ea.residual, "eval.residual", "expected residual mode (checked against the checkpoint)");
    ev.bind("--calib-windows", ea.calib, "quant.calib_windows", "int8 calibration windows from the train split");
    ev.bind("--batch-size", ea.batch_size, "eval.batch_size", "batch size");

    Command inf = make_command(app, "infer", "write predicted masks");
    add_common(inf);
    EvalArgs ia;
    inf.bind("--data", ia.data, "data", "preprocessed directory")->required();
    inf.bind("--split", ia.split, "infer.split", "train|val");
    inf.bind("--checkpoint", ia.checkpoint, "checkpoint", "model checkpoint");
    inf.bind("--precision", ia.precision, "infer.precision", "fp32|fp16|int8");
    inf.bind("--calib-windows", ia.calib, "quant.calib_windows", "int8 calibration windows from the train split");
    inf.bind("--batch-size", ia.batch_size, "infer.batch_size", "batch size");

    Command be = make_command(app, "bench", "forward-pass latency");
    add_common(be);
    BenchArgs ba;
    be.bind("--data", ba.data, "data", "preprocessed directory (default: a synthetic window)");
    be.bind("--split", ba.split, "bench.split", "split to take the window from");
    be.bind("--checkpoint", ba.checkpoint, "checkpoint", "model checkpoint (default: fresh weights)");
    be.bind("--variant", ba.variant, "bench.variant", "architecture when no checkpoint is given");
    be.bind("--precision", ba.precision, "bench.precision", "fp32|fp16|int8");
    be.bind("--warmup", ba.warmup, "bench.warmup", "untimed passes");
    be.bind("--iterations", ba.iterations, "bench.iterations", "timed passes (>= 10)");
    be.bind("--calib-windows", ba.calib, "quant.calib_windows", "int8 calibration windows");

    Command vz = make_command(app, "viz", "write PPM/PGM views of windows");
    add_common(vz);
    VizArgs va;
    vz.bind("--data", va.data, "data", "preprocessed directory")->required();
    vz.bind("--split", va.split, "viz.split", "train|val");
    vz.bind("--window", va.window, "viz.window", "window id (default: the first --limit windows)");
    vz.bind("--limit", va.limit, "viz.limit", "windows to draw when --window is absent");
    vz.bind("--predictions", va.predictions, "viz.predictions", "infer output directory");
    vz.bind("--residual", va.residual, "viz.residual", "recompute the residual: mul|sub|none");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    set_log_level(quiet ? LogLevel::kWarn : LogLevel::kInfo);

    try {
        if (synth.app->parsed()) cmd_synth(synth, sa);
        else if (augment.app->parsed()) cmd_augment(augment, aa);
        else if (pre.app->parsed()) cmd_preprocess(pre, pa);
        else if (tr.app->parsed()) cmd_train(tr, ta);
        else if (ev.app->parsed()) cmd_eval(ev, ea);
        else if (inf.app->parsed()) cmd_infer(inf, ia);
        else if (be.app->parsed()) cmd_bench(be, ba);
        else if (vz.app->parsed()) cmd_viz(vz, va);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
