#pragma once

#include "limoseg/ingest.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace limoseg {

/// Row-major 2D grid.
template <typename T>
struct Grid {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Grid& o) const { return rows == o.rows && cols == o.cols; }

    friend bool operator==(const Grid&, const Grid&) = default;
};

using BevImage = Grid<float>;
using Mask = Grid<std::uint8_t>;

inline constexpr std::uint8_t kStatic = 0;
inline constexpr std::uint8_t kMoving = 1;

struct GridSpec {
    double x_min = 0.0;
    double x_max = 19.2;
    double y_min = -6.4;
    double y_max = 6.4;
    double resolution = 0.2;
    double z_min = -2.5;
    double z_max = 1.5;

    /// 96×64 grid used for desk-scale experiments.
    static GridSpec desk() { return {}; }
    /// 480×320 grid: x ∈ [0, 48), y ∈ [−16, 16) at 0.1 m.
    static GridSpec paper() { return {0.0, 48.0, -16.0, 16.0, 0.1, -2.5, 1.5}; }

    int rows() const;
    int cols() const;
    /// Throws InvalidConfigError unless both extents are positive integer multiples of the resolution.
    void validate() const;

    /// Lower edge of row r / column c. Cell r covers [row_edge(r), row_edge(r+1)).
    double row_edge(int r) const { return x_min + r * resolution; }
    double col_edge(int c) const { return y_min + c * resolution; }

    /// Cell containing (x, y), or false when outside the half-open extent.
    bool locate(double x, double y, int& row, int& col) const;

    std::string to_string() const;
    friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

enum class ResidualMode { kMul, kSub, kNone };

std::string to_string(ResidualMode mode);
ResidualMode parse_residual_mode(const std::string& text);

/// Three BEV frames in the current frame's coordinates, plus residual and masks.
struct BevWindow {
    std::array<BevImage, 3> frames;  // current, t−1, t−2
    BevImage residual;
    Mask label_mask;
    Mask occupancy_mask;
    /// Per-frame semantic id maps; empty unless requested.
    std::vector<BevImage> semantics;

    int sequence_id = 0;
    int frame_index = 0;
    bool augmented = false;
    std::size_t motion_points = 0;

    int rows() const { return residual.rows; }
    int cols() const { return residual.cols; }
};

/// P_now⁻¹ · (P_past · p) for every point; labels and intensity unchanged.
PointCloud motion_compensate(const PointCloud& past, const Pose& pose_past, const Pose& pose_now);
/// Same transform on double-precision coordinates.
std::vector<Eigen::Vector3d> motion_compensate(const std::vector<Eigen::Vector3d>& past, const Pose& pose_past,
                                               const Pose& pose_now);

/// Normalized max height per cell; empty cells are 0.
BevImage rasterize(const PointCloud& cloud, const GridSpec& spec);

struct LabelRaster {
    Mask label_mask;
    Mask occupancy_mask;
};

/// Any moving point marks its cell moving.
LabelRaster rasterize_labels(const PointCloud& cloud, const GridSpec& spec,
                             const LabelMap& map = default_label_map());

/// Semantic id (motion stripped) of the highest point per cell, divided by 259.
BevImage rasterize_semantics(const PointCloud& cloud, const GridSpec& spec);

/// Min-max scaling to [0,1]; a constant image maps to zeros.
BevImage normalize(const BevImage& img);

BevImage residual_mul(const BevImage& now, const BevImage& past1, const BevImage& past2);
BevImage residual_sub(const BevImage& now, const BevImage& past1, const BevImage& past2);
BevImage compute_residual(ResidualMode mode, const BevImage& now, const BevImage& past1, const BevImage& past2);

struct BevOptions {
    ResidualMode residual = ResidualMode::kMul;
    bool semantics = false;
};

/// Labels on the current frame are optional (inference); masks are then all static.
BevWindow build_bev_window(const FrameWindow& window, const GridSpec& spec, const BevOptions& options = {},
                           const LabelMap& map = default_label_map());

struct Point3 {
    double x, y, z;
};

/// Centre of cell (r, c) with height decoded from `value`. Throws RangeError outside the grid.
Point3 cell_to_point(int row, int col, double value, const GridSpec& spec);

// ---- persistence --------------------------------------------------------------

void save_bev_window(const fs::path& path, const BevWindow& window);
BevWindow load_bev_window(const fs::path& path);

struct ManifestEntry {
    std::string window_id;
    int sequence_id = 0;
    int frame_index = 0;
    std::size_t motion_points = 0;
    bool augmented = false;
};

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const fs::path& path);

}  // namespace limoseg
