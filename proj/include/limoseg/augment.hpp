#pragma once

#include "limoseg/ingest.hpp"

#include <cstdint>
#include <vector>

namespace limoseg {

struct AugmentParams {
    int n_frames = 4;
    Range dx_range{0.5, 1.5};  // m/frame, low >= 0
    Range dy_range{-0.2, 0.2};
    std::uint64_t seed = 0;

    /// Throws InvalidConfigError.
    void validate() const;
};

/// Points labeled car (10); moving cars are excluded.
PointCloud extract_cars(const PointCloud& cloud);

/// Step drawn for one run.
struct MotionStep {
    double dx = 0.0;
    double dy = 0.0;
};

/// Pastes frame 0's car points into every frame k at offset (k+1)·step, labeled
/// moving-car. Inputs must be motionless (PreconditionError otherwise). Without
/// car points in frame 0 the frames come back unchanged.
std::vector<PointCloud> synthesize_motion(const std::vector<PointCloud>& frames, const MotionStep& step,
                                          const LabelMap& map = default_label_map());

/// Same, drawing the step uniformly from the parameter ranges with `rng_seed`.
std::vector<PointCloud> synthesize_motion(const std::vector<PointCloud>& frames, const AugmentParams& params,
                                          std::uint64_t rng_seed, const LabelMap& map = default_label_map());

MotionStep draw_step(const AugmentParams& params, std::uint64_t rng_seed);

/// Applies synthesize_motion to each run of n_frames consecutive motionless
/// frames and returns the sequence's windows, with those fully inside an
/// augmented run replaced by augmented copies.
std::vector<FrameWindow> augment_sequence(const std::vector<Frame>& frames, const AugmentParams& params,
                                          int sequence_id = 0, const LabelMap& map = default_label_map());

/// Window-level entry point: rebuilds each sequence's frames from its windows
/// (ordered by frame index) and augments it.
std::vector<FrameWindow> augment_dataset(const std::vector<FrameWindow>& windows, const AugmentParams& params,
                                         const LabelMap& map = default_label_map());

/// Frame-level form of augment_sequence. `run_id[i]` names the augmented run
/// frame i belongs to, or is -1 for untouched frames.
struct AugmentedFrames {
    std::vector<Frame> frames;
    std::vector<int> run_id;
};
AugmentedFrames augment_frames(const std::vector<Frame>& frames, const AugmentParams& params, int sequence_id = 0,
                               const LabelMap& map = default_label_map());

}  // namespace limoseg
