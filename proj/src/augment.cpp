#include "limoseg/augment.hpp"

#include "limoseg/error.hpp"
#include "limoseg/log.hpp"
#include "limoseg/random.hpp"

#include <algorithm>
#include <map>

namespace limoseg {

void AugmentParams::validate() const {
    if (n_frames < 1) throw InvalidConfigError("augmentation needs n_frames >= 1");
    if (dx_range.low < 0.0) throw InvalidConfigError("augmentation dx range must be non-negative");
    if (dx_range.low > dx_range.high || dy_range.low > dy_range.high) {
        throw InvalidConfigError("augmentation range has low > high");
    }
}

PointCloud extract_cars(const PointCloud& cloud) {
    const auto& labels = cloud.require_labels();
    PointCloud cars;
    cars.labels.emplace();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (labels[i] == label_id::kCar) {
            cars.points.push_back(cloud.points[i]);
            cars.labels->push_back(labels[i]);
        }
    }
    return cars;
}

MotionStep draw_step(const AugmentParams& params, std::uint64_t rng_seed) {
    params.validate();
    Rng rng(rng_seed);
    MotionStep step;
    step.dx = rng.uniform(params.dx_range.low, params.dx_range.high);
    step.dy = rng.uniform(params.dy_range.low, params.dy_range.high);
    return step;
}

std::vector<PointCloud> synthesize_motion(const std::vector<PointCloud>& frames, const MotionStep& step,
                                          const LabelMap& map) {
    for (std::size_t k = 0; k < frames.size(); ++k) {
        if (count_motion_points(frames[k], map) > 0) {
            throw PreconditionError("frame " + std::to_string(k) + " of the run already contains moving points");
        }
    }
    if (frames.empty()) return {};
    const PointCloud cars = extract_cars(frames.front());
    if (cars.points.empty()) {
        log_warn("motion synthesis skipped: first frame of the run has no car points");
        return frames;
    }
    std::vector<PointCloud> out = frames;
    for (std::size_t k = 0; k < out.size(); ++k) {
        const double scale = static_cast<double>(k + 1);
        const auto ox = static_cast<float>(scale * step.dx);
        const auto oy = static_cast<float>(scale * step.dy);
        auto& cloud = out[k];
        cloud.points.reserve(cloud.size() + cars.size());
        cloud.labels->reserve(cloud.size() + cars.size());
        for (const auto& p : cars.points) {
            cloud.points.push_back(Point{p.x + ox, p.y + oy, p.z, p.intensity});
            cloud.labels->push_back(label_id::kMovingCar);
        }
    }
    return out;
}

std::vector<PointCloud> synthesize_motion(const std::vector<PointCloud>& frames, const AugmentParams& params,
                                          std::uint64_t rng_seed, const LabelMap& map) {
    params.validate();
    if (static_cast<int>(frames.size()) != params.n_frames) {
        throw PreconditionError("synthesize_motion expects " + std::to_string(params.n_frames) + " frames, got " +
                                std::to_string(frames.size()));
    }
    return synthesize_motion(frames, draw_step(params, rng_seed), map);
}

AugmentedFrames augment_frames(const std::vector<Frame>& frames, const AugmentParams& params, int sequence_id,
                               const LabelMap& map) {
    params.validate();
    AugmentedFrames out{frames, std::vector<int>(frames.size(), -1)};
    const std::size_t n = static_cast<std::size_t>(params.n_frames);
    int next_run = 0;
    std::size_t i = 0;
    while (i < frames.size()) {
        if (count_motion_points(frames[i].cloud, map) != 0) {
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < frames.size() && count_motion_points(frames[end].cloud, map) == 0) ++end;
        // Split the motionless run into consecutive chunks of n frames.
        for (std::size_t start = i; start + n <= end; start += n) {
            if (extract_cars(frames[start].cloud).points.empty()) continue;
            std::vector<PointCloud> chunk;
            for (std::size_t k = start; k < start + n; ++k) chunk.push_back(frames[k].cloud);
            const auto seed = Rng::derive(params.seed, (static_cast<std::uint64_t>(sequence_id) << 32) | start);
            auto augmented = synthesize_motion(chunk, draw_step(params, seed), map);
            for (std::size_t k = 0; k < n; ++k) {
                out.frames[start + k].cloud = std::move(augmented[k]);
                out.run_id[start + k] = next_run;
            }
            ++next_run;
        }
        i = end;
    }
    return out;
}

std::vector<FrameWindow> augment_sequence(const std::vector<Frame>& frames, const AugmentParams& params,
                                          int sequence_id, const LabelMap& map) {
    std::vector<FrameWindow> windows = build_windows(frames, sequence_id);
    const AugmentedFrames aug = augment_frames(frames, params, sequence_id, map);
    const std::vector<FrameWindow> augmented = build_windows(aug.frames, sequence_id);
    for (std::size_t w = 0; w < windows.size(); ++w) {
        const auto i = static_cast<std::size_t>(windows[w].frame_index);
        const int run = aug.run_id[i];
        if (run >= 0 && aug.run_id[i - 1] == run && aug.run_id[i - 2] == run) {
            windows[w] = augmented[w];
            windows[w].augmented = true;
        }
    }
    return windows;
}

std::vector<FrameWindow> augment_dataset(const std::vector<FrameWindow>& windows, const AugmentParams& params,
                                         const LabelMap& map) {
    // Group by sequence, then rebuild a contiguous frame list per stretch of
    // consecutive windows.
    std::map<int, std::vector<const FrameWindow*>> by_sequence;
    for (const auto& w : windows) by_sequence[w.sequence_id].push_back(&w);

    std::vector<FrameWindow> out;
    for (auto& [seq, list] : by_sequence) {
        std::sort(list.begin(), list.end(),
                  [](const FrameWindow* a, const FrameWindow* b) { return a->frame_index < b->frame_index; });
        std::size_t s = 0;
        while (s < list.size()) {
            std::size_t e = s + 1;
            while (e < list.size() && list[e]->frame_index == list[e - 1]->frame_index + 1) ++e;
            std::vector<Frame> frames;
            frames.push_back({list[s]->past[1], list[s]->poses[2]});
            frames.push_back({list[s]->past[0], list[s]->poses[1]});
            for (std::size_t k = s; k < e; ++k) frames.push_back({list[k]->current, list[k]->poses[0]});
            auto augmented = augment_sequence(frames, params, seq, map);
            const int offset = list[s]->frame_index - 2;
            for (auto& w : augmented) {
                w.frame_index += offset;
                out.push_back(std::move(w));
            }
            s = e;
        }
    }
    return out;
}

}  // namespace limoseg
