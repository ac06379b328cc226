#pragma once

#include "limoseg/ingest.hpp"
#include "limoseg/preproc.hpp"

#include <algorithm>

namespace limoseg::test {

// brute force: scan every cell, test every point against the cell's edges
inline BevImage oracle_rasterize(const PointCloud& cloud, const GridSpec& s) {
    BevImage img(s.rows(), s.cols(), 0.f);
    for (int r = 0; r < s.rows(); ++r) {
        for (int c = 0; c < s.cols(); ++c) {
            double best = -1e300;
            bool any = false;
            for (const auto& p : cloud.points) {
                const double x = p.x, y = p.y;
                if (x < s.x_min || x >= s.x_max || y < s.y_min || y >= s.y_max) continue;
                if (x < s.row_edge(r) || x >= s.row_edge(r + 1)) continue;
                if (y < s.col_edge(c) || y >= s.col_edge(c + 1)) continue;
                any = true;
                best = std::max(best, static_cast<double>(p.z));
            }
            if (any) img.at(r, c) = static_cast<float>(std::clamp((best - s.z_min) / (s.z_max - s.z_min), 0.0, 1.0));
        }
    }
    return img;
}

// same scan for the masks; ids 252..259 are moving
inline LabelRaster oracle_rasterize_labels(const PointCloud& cloud, const GridSpec& s) {
    LabelRaster out{Mask(s.rows(), s.cols(), kStatic), Mask(s.rows(), s.cols(), 0)};
    const auto& ids = *cloud.labels;
    for (int r = 0; r < s.rows(); ++r) {
        for (int c = 0; c < s.cols(); ++c) {
            for (std::size_t i = 0; i < cloud.size(); ++i) {
                const double x = cloud.points[i].x, y = cloud.points[i].y;
                if (x < s.x_min || x >= s.x_max || y < s.y_min || y >= s.y_max) continue;
                if (x < s.row_edge(r) || x >= s.row_edge(r + 1)) continue;
                if (y < s.col_edge(c) || y >= s.col_edge(c + 1)) continue;
                out.occupancy_mask.at(r, c) = 1;
                if (ids[i] >= 252 && ids[i] <= 259) out.label_mask.at(r, c) = kMoving;
            }
        }
    }
    return out;
}

}  // namespace limoseg::test
