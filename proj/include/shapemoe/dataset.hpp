// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "shapemoe/config.hpp"
#include "shapemoe/errors.hpp"
#include "shapemoe/io.hpp"
#include "shapemoe/rng.hpp"

namespace shapemoe {

enum class Family : uint8_t { ellipse = 0, rectangle = 1, triangle = 2, four_point_star = 3 };
inline constexpr size_t kNumFamilies = 4;

inline const char* family_name(uint8_t f) {
    switch (f) {
        case 0: return "ellipse";
        case 1: return "rectangle";
        case 2: return "triangle";
        case 3: return "four_point_star";
        default: return "unknown";
    }
}

// One synthetic sample. Masks are 0/1 bytes, image is a single grayscale
// channel in [0,1], all row-major h*w.
struct Scene {
    uint32_t sample_id = 0;
    uint8_t family = 0;
    size_t h = 0, w = 0;
    std::vector<float> image;
    std::vector<uint8_t> visible;
    std::vector<uint8_t> amodal;

    bool operator==(const Scene&) const = default;
};

namespace detail {

struct ShapeGeom {
    Family family;
    double cx, cy;     // center, image coordinates
    double a, b;       // semi-extents along the shape's own axes
    double cos_t, sin_t;
    std::vector<std::array<double, 2>> verts;  // polygon families, image space

    ShapeGeom(Family f, double cx_, double cy_, double a_, double b_, double theta)
        : family(f), cx(cx_), cy(cy_), a(a_), b(b_),
          cos_t(std::cos(theta)), sin_t(std::sin(theta)) {
        auto emit = [&](double ux, double uy) {
            double sx = a * ux, sy = b * uy;
            verts.push_back({cx + sx * cos_t - sy * sin_t, cy + sx * sin_t + sy * cos_t});
        };
        if (f == Family::triangle) {
            for (int i = 0; i < 3; ++i) {
                double phi = (0.25 + double(i) / 3.0) * 2.0 * std::numbers::pi;
                emit(std::cos(phi), std::sin(phi));
            }
        } else if (f == Family::four_point_star) {
            // Eight vertices alternating outer and inner radius: a concave
            // four-point star.
            for (int i = 0; i < 8; ++i) {
                double phi = double(i) / 8.0 * 2.0 * std::numbers::pi;
                double r = (i % 2 == 0) ? 1.0 : 0.42;
                emit(r * std::cos(phi), r * std::sin(phi));
            }
        }
    }

    double radius() const { return std::max(a, b); }

    bool contains(double px, double py) const {
        if (family == Family::ellipse || family == Family::rectangle) {
            double dx = px - cx, dy = py - cy;
            double u = dx * cos_t + dy * sin_t;
            double v = -dx * sin_t + dy * cos_t;
            if (family == Family::ellipse)
                return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
            return std::abs(u) <= a && std::abs(v) <= b;
        }
        // Crossing-number test against the precomputed polygon.
        bool in = false;
        size_t n = verts.size();
        for (size_t i = 0, j = n - 1; i < n; j = i++) {
            double xi = verts[i][0], yi = verts[i][1];
            double xj = verts[j][0], yj = verts[j][1];
            if ((yi > py) != (yj > py)) {
                double xint = xj + (py - yj) / (yi - yj) * (xi - xj);
                if (px < xint) in = !in;
            }
        }
        return in;
    }
};

// A pixel belongs to the mask iff its center lies inside the contour.
inline void paint_mask(const ShapeGeom& g, size_t side, std::vector<uint8_t>& mask) {
    double r = g.radius() + 1.0;
    size_t y0 = size_t(std::max(0.0, std::floor(g.cy - r)));
    size_t y1 = std::min(side, size_t(std::max(0.0, std::ceil(g.cy + r))));
    size_t x0 = size_t(std::max(0.0, std::floor(g.cx - r)));
    size_t x1 = std::min(side, size_t(std::max(0.0, std::ceil(g.cx + r))));
    for (size_t y = y0; y < y1; ++y)
        for (size_t x = x0; x < x1; ++x)
            if (g.contains(double(x) + 0.5, double(y) + 0.5)) mask[y * side + x] = 1;
}

inline size_t count_ones(const std::vector<uint8_t>& m) {
    size_t n = 0;
    for (uint8_t v : m) n += v;
    return n;
}

}  // namespace detail

// Deterministic function of (cfg.seed, index). The family and the
// occluded-or-not branch are drawn once up front so their marginal
// distributions are exact; the rejection loop only redraws geometry,
// occluders, and intensities until the visible-fraction target holds.
inline Scene generate_scene(const GenConfig& cfg, size_t index) {
    Rng rng(Rng::derive(cfg.seed, index));
    size_t side = cfg.side;
    double s = double(side);

    Family family = Family(rng.below(kNumFamilies));
    bool unoccluded = rng.uniform() < cfg.unoccluded_prob;

    for (int attempt = 0; attempt < 100; ++attempt) {
        double cx = rng.uniform(0.2 * s, 0.8 * s);
        double cy = rng.uniform(0.2 * s, 0.8 * s);
        double a = rng.uniform(0.15 * s, 0.45 * s);
        double b = a * rng.uniform(0.5, 1.0);
        double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        detail::ShapeGeom target(family, cx, cy, a, b, theta);

        std::vector<uint8_t> amodal(side * side, 0);
        detail::paint_mask(target, side, amodal);
        size_t amodal_count = detail::count_ones(amodal);
        if (amodal_count == 0) continue;

        std::vector<uint8_t> occ(side * side, 0);
        if (!unoccluded) {
            size_t n_occ = cfg.occluder_min + rng.below(cfg.occluder_max - cfg.occluder_min + 1);
            for (size_t i = 0; i < n_occ; ++i) {
                Family of = Family(rng.below(kNumFamilies));
                // Occluders land near the target so partial overlap is likely.
                double ox = cx + rng.uniform(-1.0, 1.0) * (a + 0.15 * s);
                double oy = cy + rng.uniform(-1.0, 1.0) * (a + 0.15 * s);
                double oa = rng.uniform(0.12 * s, 0.30 * s);
                double ob = oa * rng.uniform(0.5, 1.0);
                double oth = rng.uniform(0.0, 2.0 * std::numbers::pi);
                detail::paint_mask(detail::ShapeGeom(of, ox, oy, oa, ob, oth), side, occ);
            }
        }

        std::vector<uint8_t> visible(side * side);
        for (size_t i = 0; i < visible.size(); ++i)
            visible[i] = amodal[i] & uint8_t(1 - occ[i]);

        if (!unoccluded) {
            double frac = double(detail::count_ones(visible)) / double(amodal_count);
            if (frac < cfg.visible_lo || frac > cfg.visible_hi) continue;
        }

        // Background, target, and occluder intensities: pairwise separated so
        // the regions stay visually distinct.
        double bg, tg, oc;
        bool ok = false;
        for (int tries = 0; tries < 100; ++tries) {
            bg = rng.uniform(0.1, 0.9);
            tg = rng.uniform(0.1, 0.9);
            oc = rng.uniform(0.1, 0.9);
            if (std::abs(bg - tg) >= 0.15 && std::abs(bg - oc) >= 0.15 &&
                std::abs(tg - oc) >= 0.15) {
                ok = true;
                break;
            }
        }
        if (!ok) continue;

        Scene sc;
        sc.sample_id = uint32_t(index);
        sc.family = uint8_t(family);
        sc.h = sc.w = side;
        sc.image.resize(side * side);
        sc.visible = std::move(visible);
        sc.amodal = std::move(amodal);
        for (size_t i = 0; i < sc.image.size(); ++i) {
            double v = bg;
            if (sc.amodal[i]) v = tg;
            if (occ[i]) v = oc;
            v += cfg.noise_sigma * rng.normal();
            sc.image[i] = float(std::clamp(v, 0.0, 1.0));
        }
        return sc;
    }
    throw GenerationError("sample " + std::to_string(index) +
                          ": no valid scene after 100 attempts");
}

inline std::vector<Scene> generate_corpus(const GenConfig& cfg) {
    std::vector<Scene> out;
    out.reserve(cfg.count);
    for (size_t i = 0; i < cfg.count; ++i) out.push_back(generate_scene(cfg, i));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file format, little-endian throughout:
//   magic "SMDS", version u32, count u32, h u16, w u16, channels u8,
//   num_families u8, then per record: sample_id u32, family u8,
//   image h*w f32, visible h*w u8, amodal h*w u8.
// ---------------------------------------------------------------------------

inline void write_dataset(const std::vector<Scene>& records, const std::string& path,
                          size_t h = 0, size_t w = 0) {
    if (!records.empty()) {
        h = records[0].h;
        w = records[0].w;
        for (const Scene& r : records)
            if (r.h != h || r.w != w)
                throw DimensionError("write_dataset: records disagree on canvas size");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + path);
    os.write("SMDS", 4);
    detail::put_le<uint32_t>(os, 1);
    detail::put_le<uint32_t>(os, uint32_t(records.size()));
    detail::put_le<uint16_t>(os, uint16_t(h));
    detail::put_le<uint16_t>(os, uint16_t(w));
    detail::put_le<uint8_t>(os, 1);
    detail::put_le<uint8_t>(os, uint8_t(kNumFamilies));
    for (const Scene& r : records) {
        detail::put_le<uint32_t>(os, r.sample_id);
        detail::put_le<uint8_t>(os, r.family);
        detail::put_bytes(os, r.image.data(), r.image.size() * sizeof(float));
        detail::put_bytes(os, r.visible.data(), r.visible.size());
        detail::put_bytes(os, r.amodal.data(), r.amodal.size());
    }
    if (!os) throw FormatError("write failed: " + path);
}

inline std::vector<Scene> read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    detail::ByteReader r{is};
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "SMDS", 4) != 0)
        throw FormatError("bad magic at byte offset 0");
    uint32_t version = r.get<uint32_t>();
    if (version != 1)
        throw FormatError("unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    uint32_t count = r.get<uint32_t>();
    uint16_t h = r.get<uint16_t>();
    uint16_t w = r.get<uint16_t>();
    uint8_t channels = r.get<uint8_t>();
    uint8_t families = r.get<uint8_t>();
    if (channels != 1)
        throw FormatError("unsupported channel count " + std::to_string(channels) +
                          " at byte offset 12");
    if (families != kNumFamilies)
        throw FormatError("unsupported family count " + std::to_string(families) +
                          " at byte offset 13");
    std::vector<Scene> out;
    out.reserve(count);
    size_t px = size_t(h) * size_t(w);
    for (uint32_t i = 0; i < count; ++i) {
        Scene sc;
        sc.sample_id = r.get<uint32_t>();
        sc.family = r.get<uint8_t>();
        if (sc.family >= families)
            throw FormatError("record " + std::to_string(i) + ": family out of range at byte offset " +
                              std::to_string(r.offset - 1));
        sc.h = h;
        sc.w = w;
        sc.image.resize(px);
        sc.visible.resize(px);
        sc.amodal.resize(px);
        r.read(sc.image.data(), px * sizeof(float));
        r.read(sc.visible.data(), px);
        r.read(sc.amodal.data(), px);
        out.push_back(std::move(sc));
    }
    return out;
}

}  // namespace shapemoe
