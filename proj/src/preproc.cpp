#include "limoseg/preproc.hpp"

#include "limoseg/container.hpp"
#include "limoseg/error.hpp"
#include "io_util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace limoseg {

// ---- GridSpec ------------------------------------------------------------------

namespace {

int cell_count(double lo, double hi, double res) {
    const double n = (hi - lo) / res;
    return static_cast<int>(std::lround(n));
}

bool is_positive_integer(double lo, double hi, double res) {
    const double n = (hi - lo) / res;
    return n >= 0.5 && std::abs(n - std::round(n)) < 1e-6;
}

}  // namespace

int GridSpec::rows() const { return cell_count(x_min, x_max, resolution); }
int GridSpec::cols() const { return cell_count(y_min, y_max, resolution); }

void GridSpec::validate() const {
    if (!(resolution > 0.0)) throw InvalidConfigError("grid resolution must be positive");
    if (!is_positive_integer(x_min, x_max, resolution) || !is_positive_integer(y_min, y_max, resolution)) {
        throw InvalidConfigError("grid extent is not a positive integer multiple of the resolution: " + to_string());
    }
    if (!(z_min < z_max)) throw InvalidConfigError("grid requires z_min < z_max");
}

bool GridSpec::locate(double x, double y, int& row, int& col) const {
    if (!(x >= x_min && x < x_max && y >= y_min && y < y_max)) return false;
    const int n_rows = rows(), n_cols = cols();
    int r = std::clamp(static_cast<int>(std::floor((x - x_min) / resolution)), 0, n_rows - 1);
    int c = std::clamp(static_cast<int>(std::floor((y - y_min) / resolution)), 0, n_cols - 1);
    // Snap to the cell whose edges bracket the coordinate; the division above
    // can land one cell off when the point sits on an edge.
    while (r > 0 && x < row_edge(r)) --r;
    while (r + 1 < n_rows && x >= row_edge(r + 1)) ++r;
    while (c > 0 && y < col_edge(c)) --c;
    while (c + 1 < n_cols && y >= col_edge(c + 1)) ++c;
    row = r;
    col = c;
    return true;
}

std::string GridSpec::to_string() const {
    std::ostringstream s;
    s << "x=[" << x_min << "," << x_max << ") y=[" << y_min << "," << y_max << ") res=" << resolution << " z=["
      << z_min << "," << z_max << "]";
    return s.str();
}

std::string to_string(ResidualMode mode) {
    switch (mode) {
        case ResidualMode::kMul: return "mul";
        case ResidualMode::kSub: return "sub";
        case ResidualMode::kNone: return "none";
    }
    return "?";
}

ResidualMode parse_residual_mode(const std::string& text) {
    if (text == "mul") return ResidualMode::kMul;
    if (text == "sub") return ResidualMode::kSub;
    if (text == "none") return ResidualMode::kNone;
    throw InvalidConfigError("unknown residual mode '" + text + "' (expected mul, sub or none)");
}

// ---- geometry and rasterization -------------------------------------------------

PointCloud motion_compensate(const PointCloud& past, const Pose& pose_past, const Pose& pose_now) {
    const Eigen::Matrix4d t = pose_now.inverse().matrix() * pose_past.matrix();
    const Eigen::Matrix3d r = t.topLeftCorner<3, 3>();
    const Eigen::Vector3d d = t.topRightCorner<3, 1>();
    PointCloud out = past;
    for (auto& pt : out.points) {
        const Eigen::Vector3d p = r * Eigen::Vector3d(pt.x, pt.y, pt.z) + d;
        pt.x = static_cast<float>(p.x());
        pt.y = static_cast<float>(p.y());
        pt.z = static_cast<float>(p.z());
    }
    return out;
}

std::vector<Eigen::Vector3d> motion_compensate(const std::vector<Eigen::Vector3d>& past, const Pose& pose_past,
                                               const Pose& pose_now) {
    const Pose t = pose_now.inverse() * pose_past;
    std::vector<Eigen::Vector3d> out;
    out.reserve(past.size());
    for (const auto& p : past) out.push_back(t.apply(p));
    return out;
}

namespace {

float encode_height(double z, const GridSpec& spec) {
    return static_cast<float>(std::clamp((z - spec.z_min) / (spec.z_max - spec.z_min), 0.0, 1.0));
}

}  // namespace

BevImage rasterize(const PointCloud& cloud, const GridSpec& spec) {
    spec.validate();
    const int rows = spec.rows(), cols = spec.cols();
    Grid<double> max_z(rows, cols, -std::numeric_limits<double>::infinity());
    for (const auto& pt : cloud.points) {
        int r, c;
        if (spec.locate(pt.x, pt.y, r, c)) max_z.at(r, c) = std::max(max_z.at(r, c), static_cast<double>(pt.z));
    }
    BevImage img(rows, cols, 0.f);
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (std::isfinite(max_z.data[i])) img.data[i] = encode_height(max_z.data[i], spec);
    }
    return img;
}

LabelRaster rasterize_labels(const PointCloud& cloud, const GridSpec& spec, const LabelMap& map) {
    spec.validate();
    const auto& labels = cloud.require_labels();
    LabelRaster out{Mask(spec.rows(), spec.cols(), kStatic), Mask(spec.rows(), spec.cols(), 0)};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& pt = cloud.points[i];
        int r, c;
        if (!spec.locate(pt.x, pt.y, r, c)) continue;
        out.occupancy_mask.at(r, c) = 1;
        if (map.is_moving(labels[i])) out.label_mask.at(r, c) = kMoving;
    }
    return out;
}

BevImage rasterize_semantics(const PointCloud& cloud, const GridSpec& spec) {
    spec.validate();
    const auto& labels = cloud.require_labels();
    Grid<double> max_z(spec.rows(), spec.cols(), -std::numeric_limits<double>::infinity());
    BevImage img(spec.rows(), spec.cols(), 0.f);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& pt = cloud.points[i];
        int r, c;
        if (!spec.locate(pt.x, pt.y, r, c)) continue;
        if (pt.z > max_z.at(r, c)) {
            max_z.at(r, c) = pt.z;
            img.at(r, c) = std::min(1.f, static_cast<float>(LabelMap::strip_motion(labels[i])) / 259.f);
        }
    }
    return img;
}

BevImage normalize(const BevImage& img) {
    BevImage out(img.rows, img.cols, 0.f);
    if (img.data.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(img.data.begin(), img.data.end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return out;
    const double span = hi - lo;
    for (std::size_t i = 0; i < img.size(); ++i) {
        out.data[i] = std::clamp(static_cast<float>((img.data[i] - lo) / span), 0.f, 1.f);
    }
    return out;
}

namespace {

void require_same_shape(const BevImage& a, const BevImage& b, const BevImage& c) {
    if (!a.same_shape(b) || !a.same_shape(c)) {
        throw ShapeError("residual inputs differ in shape");
    }
}

}  // namespace

BevImage residual_mul(const BevImage& now, const BevImage& past1, const BevImage& past2) {
    require_same_shape(now, past1, past2);
    BevImage prod(now.rows, now.cols);
    for (std::size_t i = 0; i < now.size(); ++i) {
        prod.data[i] = static_cast<float>(static_cast<double>(now.data[i]) * past1.data[i] * past2.data[i]);
    }
    return normalize(prod);
}

BevImage residual_sub(const BevImage& now, const BevImage& past1, const BevImage& past2) {
    require_same_shape(now, past1, past2);
    BevImage diff(now.rows, now.cols);
    for (std::size_t i = 0; i < now.size(); ++i) {
        const double a = std::abs(static_cast<double>(now.data[i]) - past1.data[i]);
        const double b = std::abs(static_cast<double>(now.data[i]) - past2.data[i]);
        diff.data[i] = static_cast<float>(0.5 * a + 0.5 * b);
    }
    return normalize(diff);
}

BevImage compute_residual(ResidualMode mode, const BevImage& now, const BevImage& past1, const BevImage& past2) {
    switch (mode) {
        case ResidualMode::kMul: return residual_mul(now, past1, past2);
        case ResidualMode::kSub: return residual_sub(now, past1, past2);
        case ResidualMode::kNone: require_same_shape(now, past1, past2); return BevImage(now.rows, now.cols, 0.f);
    }
    throw InvalidConfigError("bad residual mode");
}

BevWindow build_bev_window(const FrameWindow& window, const GridSpec& spec, const BevOptions& options,
                           const LabelMap& map) {
    if (window.past.size() != 2 || window.poses.size() != 3) {
        throw ShapeError("frame window needs 2 past frames and 3 poses");
    }
    spec.validate();
    BevWindow out;
    out.sequence_id = window.sequence_id;
    out.frame_index = window.frame_index;
    out.augmented = window.augmented;

    const PointCloud past1 = motion_compensate(window.past[0], window.poses[1], window.poses[0]);
    const PointCloud past2 = motion_compensate(window.past[1], window.poses[2], window.poses[0]);
    out.frames[0] = rasterize(window.current, spec);
    out.frames[1] = rasterize(past1, spec);
    out.frames[2] = rasterize(past2, spec);
    out.residual = compute_residual(options.residual, out.frames[0], out.frames[1], out.frames[2]);

    if (window.current.has_labels()) {
        auto masks = rasterize_labels(window.current, spec, map);
        out.label_mask = std::move(masks.label_mask);
        out.occupancy_mask = std::move(masks.occupancy_mask);
        out.motion_points = count_motion_points(window.current, map);
    } else {
        out.label_mask = Mask(spec.rows(), spec.cols(), kStatic);
        out.occupancy_mask = Mask(spec.rows(), spec.cols(), 0);
        for (const auto& pt : window.current.points) {
            int r, c;
            if (spec.locate(pt.x, pt.y, r, c)) out.occupancy_mask.at(r, c) = 1;
        }
    }
    if (options.semantics) {
        out.semantics = {rasterize_semantics(window.current, spec), rasterize_semantics(past1, spec),
                         rasterize_semantics(past2, spec)};
    }
    return out;
}

Point3 cell_to_point(int row, int col, double value, const GridSpec& spec) {
    if (row < 0 || row >= spec.rows() || col < 0 || col >= spec.cols()) {
        throw RangeError("cell (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                         std::to_string(spec.rows()) + "x" + std::to_string(spec.cols()) + " grid");
    }
    return {spec.x_min + (row + 0.5) * spec.resolution, spec.y_min + (col + 0.5) * spec.resolution,
            spec.z_min + value * (spec.z_max - spec.z_min)};
}

// ---- persistence ------------------------------------------------------------------

namespace {

NamedArray grid_array(const std::string& name, const BevImage& img) {
    return {name, {static_cast<std::uint32_t>(img.rows), static_cast<std::uint32_t>(img.cols)}, img.data};
}

NamedArray mask_array(const std::string& name, const Mask& m) {
    NamedArray a{name, {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)}, {}};
    a.data.assign(m.data.begin(), m.data.end());
    return a;
}

BevImage array_grid(const NamedArray& a) {
    if (a.dims.size() != 2) throw FormatError("array '" + a.name + "' is not 2-D");
    BevImage g(static_cast<int>(a.dims[0]), static_cast<int>(a.dims[1]));
    g.data = a.data;
    return g;
}

Mask array_mask(const NamedArray& a) {
    const BevImage g = array_grid(a);
    Mask m(g.rows, g.cols);
    for (std::size_t i = 0; i < g.size(); ++i) m.data[i] = g.data[i] != 0.f ? 1 : 0;
    return m;
}

}  // namespace

void save_bev_window(const fs::path& path, const BevWindow& w) {
    KeyValues meta;
    meta.set("kind", std::string("bev_window"));
    meta.set("sequence_id", w.sequence_id);
    meta.set("frame_index", w.frame_index);
    meta.set("augmented", w.augmented);
    meta.set("motion_points", static_cast<long long>(w.motion_points));
    Container c;
    c.text = meta.str();
    c.arrays.push_back(grid_array("frame0", w.frames[0]));
    c.arrays.push_back(grid_array("frame1", w.frames[1]));
    c.arrays.push_back(grid_array("frame2", w.frames[2]));
    c.arrays.push_back(grid_array("residual", w.residual));
    c.arrays.push_back(mask_array("label", w.label_mask));
    c.arrays.push_back(mask_array("occupancy", w.occupancy_mask));
    for (std::size_t i = 0; i < w.semantics.size(); ++i) {
        c.arrays.push_back(grid_array("semantics" + std::to_string(i), w.semantics[i]));
    }
    write_container(path, c);
}

BevWindow load_bev_window(const fs::path& path) {
    const Container c = read_container(path);
    const KeyValues meta = KeyValues::parse(c.text);
    if (meta.get_or("kind", std::string()) != "bev_window") throw FormatError(path.string() + ": not a BEV window");
    BevWindow w;
    w.sequence_id = static_cast<int>(meta.get_int("sequence_id"));
    w.frame_index = static_cast<int>(meta.get_int("frame_index"));
    w.augmented = meta.get_bool("augmented");
    w.motion_points = static_cast<std::size_t>(meta.get_int("motion_points"));
    for (int i = 0; i < 3; ++i) w.frames[i] = array_grid(c.get("frame" + std::to_string(i)));
    w.residual = array_grid(c.get("residual"));
    w.label_mask = array_mask(c.get("label"));
    w.occupancy_mask = array_mask(c.get("occupancy"));
    for (int i = 0; i < 3; ++i) {
        if (const auto* a = c.find("semantics" + std::to_string(i))) w.semantics.push_back(array_grid(*a));
    }
    for (const auto* g : {&w.frames[1], &w.frames[2], &w.residual}) {
        if (!g->same_shape(w.frames[0])) throw FormatError(path.string() + ": inconsistent grid shapes");
    }
    return w;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
    std::string out = "window_id,sequence_id,frame_index,motion_points,augmented\n";
    for (const auto& e : entries) {
        out += e.window_id + "," + std::to_string(e.sequence_id) + "," + std::to_string(e.frame_index) + "," +
               std::to_string(e.motion_points) + "," + (e.augmented ? "1" : "0") + "\n";
    }
    io::write_file(path, out);
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("missing manifest " + path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream s(line);
        ManifestEntry e;
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(s, field, ',')) fields.push_back(field);
        if (fields.size() != 5) throw ParseError(path.string() + ": bad manifest row '" + line + "'");
        try {
            e.window_id = fields[0];
            e.sequence_id = std::stoi(fields[1]);
            e.frame_index = std::stoi(fields[2]);
            e.motion_points = std::stoull(fields[3]);
            e.augmented = fields[4] == "1";
        } catch (const std::logic_error&) {
            throw ParseError(path.string() + ": bad manifest row '" + line + "'");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace limoseg
