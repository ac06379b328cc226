#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace limoseg {

namespace fs = std::filesystem;

/// SemanticKITTI semantic ids used by the toolkit.
namespace label_id {
inline constexpr std::uint16_t kCar = 10;
inline constexpr std::uint16_t kRoad = 40;
inline constexpr std::uint16_t kBuilding = 50;
inline constexpr std::uint16_t kMovingCar = 252;
}  // namespace label_id

struct Point {
    float x = 0.f;
    float y = 0.f;
    float z = 0.f;
    float intensity = 0.f;

    friend bool operator==(const Point&, const Point&) = default;
};

/// One LiDAR sweep. `labels`, when present, holds one semantic id per point.
struct PointCloud {
    std::vector<Point> points;
    std::optional<std::vector<std::uint16_t>> labels;

    std::size_t size() const { return points.size(); }
    bool has_labels() const { return labels.has_value(); }
    /// Throws MissingLabelsError when labels are absent.
    const std::vector<std::uint16_t>& require_labels() const;
};

/// Rigid transform taking sensor coordinates of one frame to world coordinates.
class Pose {
public:
    Pose() : m_(Eigen::Matrix4d::Identity()) {}

    /// Validates orthonormality and det(R)=+1 within `tol`; throws InvalidPoseError.
    explicit Pose(const Eigen::Matrix4d& m, double tol = 1e-6);

    static Pose translation(double x, double y, double z);
    static Pose rotation_z(double radians);
    static Pose from_xy_yaw(double x, double y, double yaw);

    const Eigen::Matrix4d& matrix() const { return m_; }
    Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
    Eigen::Vector3d translation() const { return m_.topRightCorner<3, 1>(); }

    /// Closed-form rigid inverse [Rᵀ | −Rᵀt].
    Pose inverse() const;
    Pose operator*(const Pose& rhs) const;
    Eigen::Vector3d apply(const Eigen::Vector3d& p) const;

private:
    struct Unchecked {};
    Pose(const Eigen::Matrix4d& m, Unchecked) : m_(m) {}
    Eigen::Matrix4d m_;
};

/// Current frame plus its two predecessors (t−1 then t−2).
struct FrameWindow {
    PointCloud current;
    std::vector<PointCloud> past;  // exactly 2
    std::vector<Pose> poses;       // current, t−1, t−2
    int sequence_id = 0;
    int frame_index = 0;
    bool augmented = false;
};

struct Frame {
    PointCloud cloud;
    Pose pose;
};

/// Moving-class id set; defaults to SemanticKITTI's 252..259.
class LabelMap {
public:
    LabelMap();
    explicit LabelMap(std::set<std::uint16_t> moving) : moving_(std::move(moving)) {}

    /// Text file of whitespace-separated moving ids; `a-b` ranges allowed, `#` comments.
    static LabelMap load(const fs::path& path);

    bool is_moving(std::uint16_t id) const { return moving_.contains(id); }
    const std::set<std::uint16_t>& moving_ids() const { return moving_; }

    /// Maps a moving id to its static counterpart (252 → 10 etc.), identity otherwise.
    static std::uint16_t strip_motion(std::uint16_t id);

private:
    std::set<std::uint16_t> moving_;
};

const LabelMap& default_label_map();

// ---- KITTI file formats ---------------------------------------------------

PointCloud load_point_cloud(const fs::path& path);
void write_point_cloud(const fs::path& path, const PointCloud& cloud);

/// Returns a copy of `cloud` carrying the low 16 bits of each label record.
PointCloud load_labels(const fs::path& path, const PointCloud& cloud);
void write_labels(const fs::path& path, const PointCloud& cloud);

std::vector<Pose> load_poses(const fs::path& path);
void write_poses(const fs::path& path, const std::vector<Pose>& poses);

// ---- windowing and filtering ----------------------------------------------

std::vector<FrameWindow> build_windows(const std::vector<Frame>& sequence, int sequence_id = 0);

std::size_t count_motion_points(const PointCloud& cloud, const LabelMap& map = default_label_map());

inline constexpr std::size_t kDefaultMotionThreshold = 20;

std::vector<FrameWindow> filter_training_windows(std::vector<FrameWindow> windows,
                                                 std::size_t threshold = kDefaultMotionThreshold,
                                                 const LabelMap& map = default_label_map());

// ---- sequences on disk -----------------------------------------------------

/// Reads `<dir>/velodyne/*.bin`, `<dir>/labels/*.label` (if present) and `<dir>/poses.txt`.
std::vector<Frame> load_sequence(const fs::path& dir);
void write_sequence(const fs::path& dir, const std::vector<Frame>& frames);

// ---- synthetic scenes -------------------------------------------------------

struct Range {
    double low = 0.0;
    double high = 0.0;
};

struct SceneConfig {
    double area_length = 120.0;  // world extent along the route (m)
    double area_width = 30.0;    // world extent across the route (m)
    int static_cuboids = 30;
    int parked_cars = 14;
    int moving_cars = 4;
    Range ego_step{0.3, 0.8};     // m/frame
    Range mover_step{0.6, 1.6};   // m/frame, magnitude
    int frames = 60;
    double noise_sigma = 0.02;    // m
    std::uint64_t seed = 0;

    /// Throws InvalidConfigError.
    void validate() const;
};

/// Ground-truth trajectory of one synthetic moving car.
struct MoverTrack {
    std::vector<Eigen::Vector3d> centers;  // world coordinates, one per frame
    std::vector<bool> wrapped;             // true where the car was re-spawned this frame
    double step = 0.0;                     // signed displacement along world x per frame
};

struct SyntheticSequence {
    std::vector<Frame> frames;
    std::vector<MoverTrack> movers;
};

SyntheticSequence generate_scene(const SceneConfig& config);

}  // namespace limoseg
