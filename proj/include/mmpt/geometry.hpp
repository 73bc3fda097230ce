#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mmpt/errors.hpp"
#include "mmpt/rng.hpp"

namespace mmpt {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm2() const { return dot(*this); }
    double norm() const { return std::sqrt(norm2()); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double sqdist(const Vec3& a, const Vec3& b) { return (a - b).norm2(); }

// Ordered list of 3-D points; the universal carrier between modules.
struct PointCloud {
    std::vector<Vec3> points;

    PointCloud() = default;
    explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

    std::size_t n() const { return points.size(); }

    void require_valid() const {
        if (points.empty()) throw InvalidCloud("point cloud is empty");
        for (const auto& p : points)
            if (!p.finite()) throw InvalidCloud("point cloud contains non-finite coordinates");
    }

    Vec3 centroid() const {
        Vec3 c;
        for (const auto& p : points) c += p;
        return c * (1.0 / static_cast<double>(points.size()));
    }
};

// Center the cloud at the origin and scale the farthest point to norm 1.
// A cloud of coincident points collapses to the origin.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
    cloud.require_valid();
    const Vec3 c = cloud.centroid();
    PointCloud out;
    out.points.reserve(cloud.n());
    double max_norm = 0.0;
    for (const auto& p : cloud.points) {
        Vec3 q = p - c;
        out.points.push_back(q);
        max_norm = std::max(max_norm, q.norm());
    }
    if (max_norm > 0.0) {
        const double inv = 1.0 / max_norm;
        for (auto& q : out.points) q = q * inv;
    }
    return out;
}

// Greedy maximin subset selection (Furthest Point Sampling). The first pick
// is seed_index; each following pick maximizes the minimum distance to the
// already-selected set, ties resolved to the lowest index.
inline std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t m,
                                                      std::size_t seed_index = 0) {
    cloud.require_valid();
    const std::size_t n = cloud.n();
    if (m < 1 || m > n)
        throw InvalidArgument("farthest_point_sample: m=" + std::to_string(m) +
                              " out of range for n=" + std::to_string(n));
    if (seed_index >= n) throw InvalidArgument("farthest_point_sample: seed_index out of range");

    std::vector<std::size_t> picked;
    picked.reserve(m);
    picked.push_back(seed_index);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::size_t last = seed_index;
    for (std::size_t step = 1; step < m; ++step) {
        std::size_t best = 0;
        double best_d2 = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            min_d2[i] = std::min(min_d2[i], sqdist(cloud.points[i], cloud.points[last]));
            if (min_d2[i] > best_d2) {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        picked.push_back(best);
        last = best;
    }
    return picked;
}

// M center points plus their K nearest neighborhoods, stored center-relative.
struct PatchSet {
    std::vector<Vec3> centers;                      // world coordinates
    std::vector<std::size_t> center_indices;        // into the source cloud
    std::vector<std::vector<Vec3>> patches;         // patches[j][i] = neighbor - center
    std::size_t k = 0;

    std::size_t m() const { return centers.size(); }
};

inline PatchSet knn_group(const PointCloud& cloud, const std::vector<std::size_t>& centers,
                          std::size_t k) {
    cloud.require_valid();
    const std::size_t n = cloud.n();
    if (k < 1 || k > n)
        throw InvalidArgument("knn_group: k=" + std::to_string(k) + " out of range for n=" +
                              std::to_string(n));
    PatchSet ps;
    ps.k = k;
    ps.centers.reserve(centers.size());
    ps.center_indices = centers;
    ps.patches.reserve(centers.size());

    std::vector<std::pair<double, std::size_t>> order(n);
    for (std::size_t ci : centers) {
        if (ci >= n) throw InvalidArgument("knn_group: center index out of range");
        const Vec3 c = cloud.points[ci];
        for (std::size_t i = 0; i < n; ++i) order[i] = {sqdist(cloud.points[i], c), i};
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end());  // pair ordering breaks ties by lowest index
        std::vector<Vec3> patch;
        patch.reserve(k);
        for (std::size_t i = 0; i < k; ++i) patch.push_back(cloud.points[order[i].second] - c);
        ps.centers.push_back(c);
        ps.patches.push_back(std::move(patch));
    }
    return ps;
}

// Disjoint, exhaustive, sorted split of {0..m-1} into masked/visible.
struct MaskPartition {
    std::vector<std::size_t> masked_idx;
    std::vector<std::size_t> visible_idx;
    double ratio = 0.0;
};

// round-half-up(ratio*m), capped at m-1 so at least one patch stays visible
// for the downstream encoders (a fully masked cloud has no pipeline meaning).
inline std::size_t mask_count(std::size_t m, double ratio) {
    const std::size_t rounded = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(m) + 0.5));
    return std::min(rounded, m - 1);
}

inline MaskPartition random_mask(std::size_t m, double ratio, Rng& rng) {
    if (m < 1) throw InvalidArgument("random_mask: m must be >= 1");
    if (ratio < 0.0 || ratio >= 1.0) throw InvalidArgument("random_mask: ratio must be in [0,1)");
    const std::size_t c = mask_count(m, ratio);
    MaskPartition part;
    part.ratio = ratio;
    part.masked_idx = rng.sample_without_replacement(m, c);
    std::sort(part.masked_idx.begin(), part.masked_idx.end());
    std::vector<bool> is_masked(m, false);
    for (auto i : part.masked_idx) is_masked[i] = true;
    for (std::size_t i = 0; i < m; ++i)
        if (!is_masked[i]) part.visible_idx.push_back(i);
    return part;
}

// The six stochastic view transformations used by the contrastive task.
struct AugmentSpec {
    double scale_lo = 1.0, scale_hi = 1.0;
    double rotation_max_angle = 0.0;   // radians; random axis, angle in [0, max]
    double translation_range = 0.0;    // per-axis uniform in [-t, t]
    double dropout_prob = 0.0;
    double elastic_granularity = 0.0;  // grid spacing; 0 disables
    double elastic_magnitude = 0.0;
    double jitter_sigma = 0.0;

    void require_valid() const {
        if (scale_lo > scale_hi) throw InvalidArgument("AugmentSpec: scale_lo > scale_hi");
        if (rotation_max_angle < 0 || translation_range < 0 || elastic_granularity < 0 ||
            elastic_magnitude < 0 || jitter_sigma < 0)
            throw InvalidArgument("AugmentSpec: magnitudes must be >= 0");
        if (dropout_prob < 0 || dropout_prob >= 1)
            throw InvalidArgument("AugmentSpec: dropout_prob must be in [0,1)");
    }

    static AugmentSpec identity() { return AugmentSpec{}; }
};

namespace detail {

// Rodrigues rotation matrix for a unit axis and angle.
inline std::array<Vec3, 3> axis_angle_matrix(const Vec3& axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    const double x = axis.x, y = axis.y, z = axis.z;
    return {Vec3{t * x * x + c, t * x * y - s * z, t * x * z + s * y},
            Vec3{t * x * y + s * z, t * y * y + c, t * y * z - s * x},
            Vec3{t * x * z - s * y, t * y * z + s * x, t * z * z + c}};
}

inline Vec3 apply_matrix(const std::array<Vec3, 3>& m, const Vec3& p) {
    return {m[0].dot(p), m[1].dot(p), m[2].dot(p)};
}

// Coarse random displacement grid, box-smoothed once, trilinearly sampled.
class ElasticField {
  public:
    ElasticField(const PointCloud& cloud, double granularity, double magnitude, Rng& rng) {
        lo_ = cloud.points[0];
        Vec3 hi = cloud.points[0];
        for (const auto& p : cloud.points) {
            lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
            hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
        }
        spacing_ = std::max(granularity, 1e-9);
        for (int a = 0; a < 3; ++a) {
            const double extent = (&hi.x)[a] - (&lo_.x)[a];
            dims_[a] = static_cast<std::size_t>(std::floor(extent / spacing_)) + 2;
        }
        const std::size_t total = dims_[0] * dims_[1] * dims_[2];
        raw_.resize(total);
        for (auto& v : raw_) v = {rng.normal(0, magnitude), rng.normal(0, magnitude), rng.normal(0, magnitude)};
        smooth_ = raw_;
        for (std::size_t ix = 0; ix < dims_[0]; ++ix)
            for (std::size_t iy = 0; iy < dims_[1]; ++iy)
                for (std::size_t iz = 0; iz < dims_[2]; ++iz) {
                    Vec3 acc;
                    int cnt = 0;
                    for (int dx = -1; dx <= 1; ++dx)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dz = -1; dz <= 1; ++dz) {
                                const long jx = static_cast<long>(ix) + dx;
                                const long jy = static_cast<long>(iy) + dy;
                                const long jz = static_cast<long>(iz) + dz;
                                if (jx < 0 || jy < 0 || jz < 0 || jx >= static_cast<long>(dims_[0]) ||
                                    jy >= static_cast<long>(dims_[1]) || jz >= static_cast<long>(dims_[2]))
                                    continue;
                                acc += raw_[idx(static_cast<std::size_t>(jx), static_cast<std::size_t>(jy),
                                                static_cast<std::size_t>(jz))];
                                ++cnt;
                            }
                    smooth_[idx(ix, iy, iz)] = acc * (1.0 / cnt);
                }
    }

    Vec3 displacement(const Vec3& p) const {
        double f[3], t[3];
        std::size_t i0[3];
        const double* pc = &p.x;
        const double* lc = &lo_.x;
        for (int a = 0; a < 3; ++a) {
            f[a] = (pc[a] - lc[a]) / spacing_;
            f[a] = std::clamp(f[a], 0.0, static_cast<double>(dims_[a] - 1) - 1e-9);
            i0[a] = static_cast<std::size_t>(f[a]);
            t[a] = f[a] - static_cast<double>(i0[a]);
        }
        Vec3 out;
        for (int dx = 0; dx <= 1; ++dx)
            for (int dy = 0; dy <= 1; ++dy)
                for (int dz = 0; dz <= 1; ++dz) {
                    const double w = (dx ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dz ? t[2] : 1 - t[2]);
                    out += smooth_[idx(i0[0] + dx, i0[1] + dy, i0[2] + dz)] * w;
                }
        return out;
    }

  private:
    std::size_t idx(std::size_t x, std::size_t y, std::size_t z) const {
        return (x * dims_[1] + y) * dims_[2] + z;
    }
    Vec3 lo_;
    double spacing_ = 1.0;
    std::array<std::size_t, 3> dims_{};
    std::vector<Vec3> raw_, smooth_;
};

}  // namespace detail

// Applies the enabled transforms in fixed order:
// scale -> rotate -> elastic -> translate -> jitter -> dropout -> renormalize.
// Dropout never shrinks the cloud below ceil(n/4): randomly dropped points
// are re-added until the floor is met.
inline PointCloud augment(const PointCloud& cloud, const AugmentSpec& spec, Rng& rng) {
    cloud.require_valid();
    spec.require_valid();
    PointCloud out = cloud;

    const double s = rng.uniform(spec.scale_lo, spec.scale_hi);
    if (s != 1.0)
        for (auto& p : out.points) p = p * s;

    {
        Vec3 axis{0, 0, 1};
        // uniform direction via normalized Gaussian triple
        Vec3 g{rng.normal(), rng.normal(), rng.normal()};
        if (g.norm() > 1e-12) axis = g * (1.0 / g.norm());
        const double angle = rng.uniform01() * spec.rotation_max_angle;
        if (angle != 0.0) {
            const auto m = detail::axis_angle_matrix(axis, angle);
            for (auto& p : out.points) p = detail::apply_matrix(m, p);
        }
    }

    if (spec.elastic_magnitude > 0.0 && spec.elastic_granularity > 0.0) {
        detail::ElasticField field(out, spec.elastic_granularity, spec.elastic_magnitude, rng);
        for (auto& p : out.points) p += field.displacement(p);
    }

    {
        const Vec3 t{rng.uniform(-spec.translation_range, spec.translation_range),
                     rng.uniform(-spec.translation_range, spec.translation_range),
                     rng.uniform(-spec.translation_range, spec.translation_range)};
        if (t.x != 0.0 || t.y != 0.0 || t.z != 0.0)
            for (auto& p : out.points) p += t;
    }

    if (spec.jitter_sigma > 0.0)
        for (auto& p : out.points)
            p += Vec3{rng.normal(0, spec.jitter_sigma), rng.normal(0, spec.jitter_sigma),
                      rng.normal(0, spec.jitter_sigma)};

    if (spec.dropout_prob > 0.0) {
        std::vector<Vec3> kept;
        std::vector<Vec3> dropped;
        kept.reserve(out.n());
        for (const auto& p : out.points)
            (rng.uniform01() < spec.dropout_prob ? dropped : kept).push_back(p);
        const std::size_t floor_n = (out.n() + 3) / 4;
        while (kept.size() < floor_n && !dropped.empty()) {
            const std::size_t j = static_cast<std::size_t>(rng.below(dropped.size()));
            kept.push_back(dropped[j]);
            dropped[j] = dropped.back();
            dropped.pop_back();
        }
        out.points = std::move(kept);
    }

    return normalize_unit_sphere(out);
}

// ---------------------------------------------------------------------------
// Point cloud I/O: plain text ("x y z" per line) and the MMPC binary form
// (magic "MMPC", u32 count, f32 little-endian triples).
// ---------------------------------------------------------------------------

inline void save_cloud_text(const PointCloud& cloud, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    char buf[96];
    for (const auto& p : cloud.points) {
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p.x, p.y, p.z);
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path);
}

inline PointCloud load_cloud_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open for reading: " + path);
    PointCloud cloud;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Vec3 p;
        if (std::sscanf(line.c_str(), "%lf %lf %lf", &p.x, &p.y, &p.z) != 3)
            throw IoError("malformed point line in " + path + ": '" + line + "'");
        cloud.points.push_back(p);
    }
    cloud.require_valid();
    return cloud;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline void save_cloud_binary(const PointCloud& cloud, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write("MMPC", 4);
    detail::write_u32(f, static_cast<std::uint32_t>(cloud.n()));
    for (const auto& p : cloud.points) {
        detail::write_f32(f, static_cast<float>(p.x));
        detail::write_f32(f, static_cast<float>(p.y));
        detail::write_f32(f, static_cast<float>(p.z));
    }
    if (!f) throw IoError("write failed: " + path);
}

inline PointCloud load_cloud_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "MMPC", 4) != 0) throw IoError("bad magic in " + path);
    const std::uint32_t n = detail::read_u32(f);
    PointCloud cloud;
    cloud.points.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        Vec3 p;
        p.x = detail::read_f32(f);
        p.y = detail::read_f32(f);
        p.z = detail::read_f32(f);
        cloud.points.push_back(p);
    }
    if (!f) throw IoError("truncated cloud file: " + path);
    cloud.require_valid();
    return cloud;
}

}  // namespace mmpt
