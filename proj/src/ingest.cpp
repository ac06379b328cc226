#include "limoseg/ingest.hpp"

#include "limoseg/error.hpp"
#include "limoseg/random.hpp"
#include "io_util.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace limoseg {

const std::vector<std::uint16_t>& PointCloud::require_labels() const {
    if (!labels) throw MissingLabelsError("point cloud has no labels");
    return *labels;
}

// ---- Pose ------------------------------------------------------------------

Pose::Pose(const Eigen::Matrix4d& m, double tol) : m_(m) {
    const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
    const double ortho = (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    const double det = r.determinant();
    if (!m.allFinite() || ortho > tol || std::abs(det - 1.0) > tol) {
        std::ostringstream msg;
        msg << "rotation is not orthonormal (max |RRᵀ−I| = " << ortho << ", det = " << det << ")";
        throw InvalidPoseError(msg.str());
    }
    if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0) {
        throw InvalidPoseError("last row of a pose must be [0 0 0 1]");
    }
}

Pose Pose::translation(double x, double y, double z) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(0, 3) = x;
    m(1, 3) = y;
    m(2, 3) = z;
    return Pose(m, Unchecked{});
}

Pose Pose::rotation_z(double radians) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    return Pose(m, Unchecked{});
}

Pose Pose::from_xy_yaw(double x, double y, double yaw) {
    Pose p = rotation_z(yaw);
    p.m_(0, 3) = x;
    p.m_(1, 3) = y;
    return p;
}

Pose Pose::inverse() const {
    Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
    const Eigen::Matrix3d rt = rotation().transpose();
    inv.topLeftCorner<3, 3>() = rt;
    inv.topRightCorner<3, 1>() = -rt * translation();
    return Pose(inv, Unchecked{});
}

Pose Pose::operator*(const Pose& rhs) const { return Pose(m_ * rhs.m_, Unchecked{}); }

Eigen::Vector3d Pose::apply(const Eigen::Vector3d& p) const {
    return m_.topLeftCorner<3, 3>() * p + m_.topRightCorner<3, 1>();
}

// ---- LabelMap --------------------------------------------------------------

LabelMap::LabelMap() {
    for (std::uint16_t id = 252; id <= 259; ++id) moving_.insert(id);
}

const LabelMap& default_label_map() {
    static const LabelMap map;
    return map;
}

LabelMap LabelMap::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open label map " + path.string());
    std::set<std::uint16_t> ids;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream tokens(line);
        std::string tok;
        while (tokens >> tok) {
            try {
                const auto dash = tok.find('-');
                if (dash == std::string::npos) {
                    ids.insert(static_cast<std::uint16_t>(std::stoul(tok)));
                } else {
                    const auto lo = std::stoul(tok.substr(0, dash));
                    const auto hi = std::stoul(tok.substr(dash + 1));
                    for (auto id = lo; id <= hi; ++id) ids.insert(static_cast<std::uint16_t>(id));
                }
            } catch (const std::logic_error&) {
                throw ParseError("bad label id '" + tok + "' in " + path.string());
            }
        }
    }
    return LabelMap(std::move(ids));
}

std::uint16_t LabelMap::strip_motion(std::uint16_t id) {
    // SemanticKITTI moving ids and their static classes.
    switch (id) {
        case 252: return 10;  // car
        case 253: return 31;  // bicyclist
        case 254: return 30;  // person
        case 255: return 32;  // motorcyclist
        case 256: return 16;  // on-rails
        case 257: return 13;  // bus
        case 258: return 18;  // truck
        case 259: return 20;  // other-vehicle
        default: return id;
    }
}

// ---- file formats ------------------------------------------------------------

PointCloud load_point_cloud(const fs::path& path) {
    const std::string bytes = io::read_file(path);
    if (bytes.size() % 16 != 0) {
        throw MalformedFileError(path.string() + ": size " + std::to_string(bytes.size()) +
                                 " is not a multiple of 16 bytes");
    }
    PointCloud cloud;
    cloud.points.resize(bytes.size() / 16);
    const char* p = bytes.data();
    for (auto& pt : cloud.points) {
        pt.x = io::get_le<float>(p);
        pt.y = io::get_le<float>(p + 4);
        pt.z = io::get_le<float>(p + 8);
        pt.intensity = io::get_le<float>(p + 12);
        p += 16;
    }
    return cloud;
}

void write_point_cloud(const fs::path& path, const PointCloud& cloud) {
    std::string bytes;
    bytes.reserve(cloud.size() * 16);
    for (const auto& pt : cloud.points) {
        io::put_le(bytes, pt.x);
        io::put_le(bytes, pt.y);
        io::put_le(bytes, pt.z);
        io::put_le(bytes, pt.intensity);
    }
    io::write_file(path, bytes);
}

PointCloud load_labels(const fs::path& path, const PointCloud& cloud) {
    const std::string bytes = io::read_file(path);
    if (bytes.size() != 4 * cloud.size()) {
        throw LabelMismatchError(path.string() + ": " + std::to_string(bytes.size() / 4) +
                                 " label records for " + std::to_string(cloud.size()) + " points");
    }
    PointCloud out = cloud;
    std::vector<std::uint16_t> labels(cloud.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<std::uint16_t>(io::get_le<std::uint32_t>(bytes.data() + 4 * i) & 0xFFFFu);
    }
    out.labels = std::move(labels);
    return out;
}

void write_labels(const fs::path& path, const PointCloud& cloud) {
    const auto& labels = cloud.require_labels();
    std::string bytes;
    bytes.reserve(labels.size() * 4);
    for (auto id : labels) io::put_le(bytes, static_cast<std::uint32_t>(id));
    io::write_file(path, bytes);
}

std::vector<Pose> load_poses(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<Pose> poses;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream tokens(line);
        std::vector<double> values;
        std::string tok;
        while (tokens >> tok) {
            try {
                std::size_t used = 0;
                values.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::logic_error&) {
                throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + tok + "'");
            }
        }
        if (values.size() != 12) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 12 values, got " +
                             std::to_string(values.size()));
        }
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) m(r, c) = values[4 * r + c];
        poses.emplace_back(m, 1e-6);
    }
    return poses;
}

void write_poses(const fs::path& path, const std::vector<Pose>& poses) {
    std::ostringstream out;
    out.precision(17);
    for (const auto& pose : poses) {
        const auto& m = pose.matrix();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) out << m(r, c) << ((r == 2 && c == 3) ? '\n' : ' ');
    }
    io::write_file(path, out.str());
}

// ---- windowing ---------------------------------------------------------------

std::vector<FrameWindow> build_windows(const std::vector<Frame>& sequence, int sequence_id) {
    std::vector<FrameWindow> windows;
    for (std::size_t i = 2; i < sequence.size(); ++i) {
        FrameWindow w;
        w.current = sequence[i].cloud;
        w.past = {sequence[i - 1].cloud, sequence[i - 2].cloud};
        w.poses = {sequence[i].pose, sequence[i - 1].pose, sequence[i - 2].pose};
        w.sequence_id = sequence_id;
        w.frame_index = static_cast<int>(i);
        windows.push_back(std::move(w));
    }
    return windows;
}

std::size_t count_motion_points(const PointCloud& cloud, const LabelMap& map) {
    const auto& labels = cloud.require_labels();
    return static_cast<std::size_t>(
        std::count_if(labels.begin(), labels.end(), [&](std::uint16_t id) { return map.is_moving(id); }));
}

std::vector<FrameWindow> filter_training_windows(std::vector<FrameWindow> windows, std::size_t threshold,
                                                 const LabelMap& map) {
    std::erase_if(windows, [&](const FrameWindow& w) {
        return !w.augmented && count_motion_points(w.current, map) < threshold;
    });
    return windows;
}

// ---- sequences on disk ---------------------------------------------------------

namespace {

std::string frame_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return buf;
}

}  // namespace

std::vector<Frame> load_sequence(const fs::path& dir) {
    const fs::path velodyne = dir / "velodyne";
    const fs::path labels = dir / "labels";
    const fs::path poses_file = dir / "poses.txt";
    if (!fs::is_directory(velodyne)) throw MissingArtifactError("missing directory " + velodyne.string());
    if (!fs::exists(poses_file)) throw MissingArtifactError("missing file " + poses_file.string());

    std::vector<fs::path> scans;
    for (const auto& entry : fs::directory_iterator(velodyne)) {
        if (entry.path().extension() == ".bin") scans.push_back(entry.path());
    }
    std::sort(scans.begin(), scans.end());
    const auto poses = load_poses(poses_file);
    if (poses.size() < scans.size()) {
        throw ParseError(poses_file.string() + ": " + std::to_string(poses.size()) + " poses for " +
                         std::to_string(scans.size()) + " scans");
    }
    std::vector<Frame> frames;
    frames.reserve(scans.size());
    for (std::size_t i = 0; i < scans.size(); ++i) {
        PointCloud cloud = load_point_cloud(scans[i]);
        const fs::path label_path = labels / (scans[i].stem().string() + ".label");
        if (fs::exists(label_path)) cloud = load_labels(label_path, cloud);
        frames.push_back({std::move(cloud), poses[i]});
    }
    return frames;
}

void write_sequence(const fs::path& dir, const std::vector<Frame>& frames) {
    fs::create_directories(dir / "velodyne");
    bool any_labels = std::any_of(frames.begin(), frames.end(), [](const Frame& f) { return f.cloud.has_labels(); });
    if (any_labels) fs::create_directories(dir / "labels");
    std::vector<Pose> poses;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        write_point_cloud(dir / "velodyne" / (frame_name(i) + ".bin"), frames[i].cloud);
        if (frames[i].cloud.has_labels()) write_labels(dir / "labels" / (frame_name(i) + ".label"), frames[i].cloud);
        poses.push_back(frames[i].pose);
    }
    write_poses(dir / "poses.txt", poses);
}

// ---- synthetic scenes ------------------------------------------------------------

void SceneConfig::validate() const {
    auto fail = [](const std::string& what) { throw InvalidConfigError("scene config: " + what); };
    if (!(area_length > 0.0) || !(area_width > 0.0)) fail("area extent must be positive");
    if (static_cuboids < 0 || parked_cars < 0 || moving_cars < 0) fail("object counts must be >= 0");
    if (ego_step.low > ego_step.high) fail("ego step range has low > high");
    if (mover_step.low > mover_step.high) fail("mover step range has low > high");
    if (frames < 3) fail("frames per sequence must be >= 3");
    if (noise_sigma < 0.0) fail("noise sigma must be >= 0");
}

namespace {

constexpr double kSensorHeight = 1.73;
constexpr double kMaxRange = 35.0;
constexpr double kFullDensityRange = 12.0;
constexpr double kGroundDensity = 16.0;  // points / m²
constexpr double kObjectDensity = 110.0;
// parked and moving cars share the lateral band, so position alone says nothing about motion
constexpr double kLaneInner = 1.6;
constexpr double kLaneOuter = 4.4;
constexpr double kKerbOuter = 5.4;
constexpr double kRespawnBehind = -8.0;
constexpr double kRespawnAhead = 30.0;

/// Axis-aligned box; z measured in world coordinates (ground at −sensor height).
struct Box {
    double cx, cy, hx, hy, z_bottom, z_top;
    bool overlaps(const Box& o, double margin) const {
        return std::abs(cx - o.cx) < hx + o.hx + margin && std::abs(cy - o.cy) < hy + o.hy + margin;
    }
};

enum Face : std::uint8_t { kPosX, kNegX, kPosY, kNegY, kTop, kGround };

struct SurfacePoint {
    Eigen::Vector3d p;  // world (static) or body-relative (mover)
    float keep_u;
    float intensity;
    Face face;
};

struct SceneObject {
    Box box;
    std::uint16_t label;
    std::vector<SurfacePoint> points;
};

void sample_box_surface(SceneObject& obj, Rng& rng, double density, bool body_relative) {
    const Box& b = obj.box;
    const double ox = body_relative ? 0.0 : b.cx;
    const double oy = body_relative ? 0.0 : b.cy;
    const double height = b.z_top - b.z_bottom;
    const float base_intensity = static_cast<float>(rng.uniform(0.2, 0.8));
    auto emit = [&](Face face, double area, auto&& place) {
        const auto n = static_cast<std::size_t>(std::lround(area * density));
        for (std::size_t i = 0; i < n; ++i) {
            const double a = rng.uniform(), c = rng.uniform();
            SurfacePoint sp;
            sp.p = place(a, c);
            sp.keep_u = static_cast<float>(rng.uniform());
            sp.intensity = std::clamp(base_intensity + static_cast<float>(rng.normal(0.0, 0.05)), 0.f, 1.f);
            sp.face = face;
            obj.points.push_back(sp);
        }
    };
    emit(kPosX, 2 * b.hy * height, [&](double a, double c) {
        return Eigen::Vector3d(ox + b.hx, oy - b.hy + 2 * b.hy * a, b.z_bottom + height * c);
    });
    emit(kNegX, 2 * b.hy * height, [&](double a, double c) {
        return Eigen::Vector3d(ox - b.hx, oy - b.hy + 2 * b.hy * a, b.z_bottom + height * c);
    });
    emit(kPosY, 2 * b.hx * height, [&](double a, double c) {
        return Eigen::Vector3d(ox - b.hx + 2 * b.hx * a, oy + b.hy, b.z_bottom + height * c);
    });
    emit(kNegY, 2 * b.hx * height, [&](double a, double c) {
        return Eigen::Vector3d(ox - b.hx + 2 * b.hx * a, oy - b.hy, b.z_bottom + height * c);
    });
    emit(kTop, 4 * b.hx * b.hy, [&](double a, double c) {
        return Eigen::Vector3d(ox - b.hx + 2 * b.hx * a, oy - b.hy + 2 * b.hy * c, b.z_top);
    });
}

/// Face visibility from a sensor at `eye` for a box centred at (cx, cy).
bool face_visible(Face face, const Box& b, double cx, double cy, const Eigen::Vector3d& eye) {
    switch (face) {
        case kPosX: return eye.x() > cx + b.hx;
        case kNegX: return eye.x() < cx - b.hx;
        case kPosY: return eye.y() > cy + b.hy;
        case kNegY: return eye.y() < cy - b.hy;
        case kTop: return eye.z() > b.z_top;
        case kGround: return true;
    }
    return false;
}

double keep_probability(double range) {
    if (range <= kFullDensityRange) return 1.0;
    const double ratio = kFullDensityRange / range;
    return ratio * ratio;
}

Box random_car(Rng& rng, double cx, double cy) {
    const double ground = -kSensorHeight;
    return Box{cx, cy, rng.uniform(2.1, 2.4), rng.uniform(0.85, 0.95), ground + 0.2, ground + rng.uniform(1.4, 1.6)};
}

}  // namespace

SyntheticSequence generate_scene(const SceneConfig& config) {
    config.validate();
    Rng layout_rng(Rng::derive(config.seed, 1));
    Rng noise_rng(Rng::derive(config.seed, 2));

    // Ego trajectory: forward motion with a bounded sinusoidal heading.
    std::vector<Pose> poses;
    {
        const double phase = layout_rng.uniform(0.0, 2.0 * std::numbers::pi);
        double x = 0.0, y = 0.0;
        for (int k = 0; k < config.frames; ++k) {
            const double yaw = 0.03 * std::sin(2.0 * std::numbers::pi * k / 40.0 + phase);
            poses.push_back(Pose::from_xy_yaw(x, y, yaw));
            const double step = layout_rng.uniform(config.ego_step.low, config.ego_step.high);
            x += step * std::cos(yaw);
            y += step * std::sin(yaw);
        }
    }
    const double route_end = poses.back().translation().x();
    const double x_lo = -10.0;
    const double x_hi = std::max(config.area_length, route_end + kMaxRange);
    const double half_width = config.area_width / 2.0;
    const double ground_z = -kSensorHeight;

    std::vector<SceneObject> statics;
    std::vector<Box> occupied;
    auto place = [&](auto&& make_box, std::uint16_t label, int count) {
        for (int i = 0; i < count; ++i) {
            for (int attempt = 0; attempt < 50; ++attempt) {
                Box b = make_box();
                bool clash = std::any_of(occupied.begin(), occupied.end(), [&](const Box& o) { return b.overlaps(o, 0.3); });
                if (clash) continue;
                occupied.push_back(b);
                statics.push_back(SceneObject{b, label, {}});
                break;
            }
        }
    };
    place(
        [&] {
            const double side = layout_rng.uniform() < 0.5 ? -1.0 : 1.0;
            const double hx = layout_rng.uniform(0.5, 3.0), hy = layout_rng.uniform(0.5, 2.0);
            const double cy = side * layout_rng.uniform(std::min(6.0 + hy, half_width), std::max(6.0 + hy, half_width));
            return Box{layout_rng.uniform(x_lo, config.area_length), cy, hx, hy, ground_z,
                       ground_z + layout_rng.uniform(0.8, 5.0)};
        },
        label_id::kBuilding, config.static_cuboids);
    place(
        [&] {
            const double side = layout_rng.uniform() < 0.5 ? -1.0 : 1.0;
            return random_car(layout_rng, layout_rng.uniform(x_lo, config.area_length),
                              side * layout_rng.uniform(kLaneInner, kKerbOuter));
        },
        label_id::kCar, config.parked_cars);
    for (auto& obj : statics) sample_box_surface(obj, layout_rng, kObjectDensity, false);

    SceneObject ground{Box{0, 0, 0, 0, ground_z, ground_z}, label_id::kRoad, {}};
    {
        const double area = (x_hi - x_lo) * 2.0 * half_width;
        const auto n = static_cast<std::size_t>(std::lround(area * kGroundDensity));
        ground.points.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            SurfacePoint sp;
            sp.p = Eigen::Vector3d(layout_rng.uniform(x_lo, x_hi), layout_rng.uniform(-half_width, half_width), ground_z);
            sp.keep_u = static_cast<float>(layout_rng.uniform());
            sp.intensity = static_cast<float>(layout_rng.uniform(0.05, 0.25));
            sp.face = kGround;
            ground.points.push_back(sp);
        }
    }

    // Moving cars keep a constant world displacement per frame and are
    // re-spawned on the far side once they leave the window around the ego.
    std::vector<SceneObject> movers;
    std::vector<MoverTrack> tracks;
    for (int i = 0; i < config.moving_cars; ++i) {
        const double lane = (layout_rng.uniform() < 0.5 ? -1.0 : 1.0) * layout_rng.uniform(kLaneInner, kLaneOuter);
        const double sign = layout_rng.uniform() < 0.5 ? -1.0 : 1.0;
        MoverTrack track;
        track.step = sign * layout_rng.uniform(config.mover_step.low, config.mover_step.high);
        SceneObject car{random_car(layout_rng, 0.0, 0.0), label_id::kMovingCar, {}};
        sample_box_surface(car, layout_rng, kObjectDensity, true);
        double x = poses.front().translation().x() + layout_rng.uniform(0.0, 25.0);
        const double span = kRespawnAhead - kRespawnBehind;
        for (int k = 0; k < config.frames; ++k) {
            bool wrapped = false;
            if (k > 0) {
                x += track.step;
                const double rel = x - poses[k].translation().x();
                if (rel > kRespawnAhead) {
                    x -= span;
                    wrapped = true;
                } else if (rel < kRespawnBehind) {
                    x += span;
                    wrapped = true;
                }
            }
            track.centers.emplace_back(x, lane, 0.5 * (car.box.z_bottom + car.box.z_top));
            track.wrapped.push_back(wrapped);
        }
        movers.push_back(std::move(car));
        tracks.push_back(std::move(track));
    }

    SyntheticSequence seq;
    seq.movers = tracks;
    for (int k = 0; k < config.frames; ++k) {
        const Pose& pose = poses[k];
        const Pose to_sensor = pose.inverse();
        const Eigen::Vector3d eye = pose.translation();
        PointCloud cloud;
        std::vector<std::uint16_t> labels;

        auto observe = [&](const Eigen::Vector3d& world, const SurfacePoint& sp, std::uint16_t label) {
            const double range = std::hypot(world.x() - eye.x(), world.y() - eye.y());
            if (range > kMaxRange || sp.keep_u >= keep_probability(range)) return;
            Eigen::Vector3d local = to_sensor.apply(world);
            local += Eigen::Vector3d(noise_rng.normal(), noise_rng.normal(), noise_rng.normal()) * config.noise_sigma;
            cloud.points.push_back(Point{static_cast<float>(local.x()), static_cast<float>(local.y()),
                                         static_cast<float>(local.z()), sp.intensity});
            labels.push_back(label);
        };

        for (const auto& sp : ground.points) observe(sp.p, sp, ground.label);
        for (const auto& obj : statics) {
            const double dx = obj.box.cx - eye.x(), dy = obj.box.cy - eye.y();
            if (std::hypot(dx, dy) > kMaxRange + 10.0) continue;
            for (const auto& sp : obj.points) {
                if (face_visible(sp.face, obj.box, obj.box.cx, obj.box.cy, eye)) observe(sp.p, sp, obj.label);
            }
        }
        for (std::size_t m = 0; m < movers.size(); ++m) {
            const auto& car = movers[m];
            const Eigen::Vector3d& c = tracks[m].centers[k];
            for (const auto& sp : car.points) {
                if (!face_visible(sp.face, car.box, c.x(), c.y(), eye)) continue;
                observe(Eigen::Vector3d(sp.p.x() + c.x(), sp.p.y() + c.y(), sp.p.z()), sp, car.label);
            }
        }
        cloud.labels = std::move(labels);
        seq.frames.push_back({std::move(cloud), pose});
    }
    return seq;
}

}  // namespace limoseg
