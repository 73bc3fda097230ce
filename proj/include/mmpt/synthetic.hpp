#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmpt/geometry.hpp"

namespace mmpt {

enum class ShapeKind { Sphere = 0, Cube = 1, Torus = 2, Cylinder = 3, Cone = 4, Plane = 5 };

constexpr std::size_t kNumShapeClasses = 6;

inline const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Cube: return "cube";
        case ShapeKind::Torus: return "torus";
        case ShapeKind::Cylinder: return "cylinder";
        case ShapeKind::Cone: return "cone";
        case ShapeKind::Plane: return "plane";
    }
    throw InvalidArgument("shape_name: unknown kind");
}

inline ShapeKind shape_from_class(std::size_t class_id) {
    if (class_id >= kNumShapeClasses) throw InvalidArgument("shape_from_class: class_id out of range");
    return static_cast<ShapeKind>(class_id);
}

struct ShapeSpec {
    ShapeKind kind = ShapeKind::Sphere;
    std::size_t n = 512;
    double noise_sigma = 0.0;

    void require_valid() const {
        if (n < 32) throw InvalidArgument("ShapeSpec: n must be >= 32");
        if (noise_sigma < 0) throw InvalidArgument("ShapeSpec: noise_sigma must be >= 0");
    }
};

// Torus parameters referenced by tests: (sqrt(x^2+y^2) - R)^2 + z^2 = r^2.
constexpr double kTorusMajor = 1.0;
constexpr double kTorusMinor = 0.3;

// One uniform surface sample of the analytic primitive, before noise and
// normalization.
inline Vec3 sample_surface_point(ShapeKind kind, Rng& rng) {
    switch (kind) {
        case ShapeKind::Sphere: {
            Vec3 g{rng.normal(), rng.normal(), rng.normal()};
            double n = g.norm();
            while (n < 1e-12) {
                g = {rng.normal(), rng.normal(), rng.normal()};
                n = g.norm();
            }
            return g * (1.0 / n);
        }
        case ShapeKind::Cube: {
            // surface of [-1,1]^3; faces have equal area
            const std::size_t face = static_cast<std::size_t>(rng.below(6));
            const double u = rng.uniform(-1.0, 1.0);
            const double v = rng.uniform(-1.0, 1.0);
            switch (face) {
                case 0: return {+1.0, u, v};
                case 1: return {-1.0, u, v};
                case 2: return {u, +1.0, v};
                case 3: return {u, -1.0, v};
                case 4: return {u, v, +1.0};
                default: return {u, v, -1.0};
            }
        }
        case ShapeKind::Torus: {
            // area-uniform: accept tube angle v with probability prop. to R + r*cos(v)
            const double u = rng.uniform01() * 2.0 * M_PI;
            double v;
            for (;;) {
                v = rng.uniform01() * 2.0 * M_PI;
                const double accept = (kTorusMajor + kTorusMinor * std::cos(v)) / (kTorusMajor + kTorusMinor);
                if (rng.uniform01() <= accept) break;
            }
            const double ring = kTorusMajor + kTorusMinor * std::cos(v);
            return {ring * std::cos(u), ring * std::sin(u), kTorusMinor * std::sin(v)};
        }
        case ShapeKind::Cylinder: {
            // radius 0.5, height 2 (z in [-1,1]); lateral + caps, area-weighted
            const double radius = 0.5, height = 2.0;
            const double lateral = 2.0 * M_PI * radius * height;
            const double cap = M_PI * radius * radius;
            const double pick = rng.uniform01() * (lateral + 2.0 * cap);
            if (pick < lateral) {
                const double theta = rng.uniform01() * 2.0 * M_PI;
                const double z = rng.uniform(-1.0, 1.0);
                return {radius * std::cos(theta), radius * std::sin(theta), z};
            }
            const double z = pick < lateral + cap ? 1.0 : -1.0;
            const double theta = rng.uniform01() * 2.0 * M_PI;
            const double rr = radius * std::sqrt(rng.uniform01());
            return {rr * std::cos(theta), rr * std::sin(theta), z};
        }
        case ShapeKind::Cone: {
            // apex (0,0,1), base disk radius 0.5 at z = -1; lateral + base
            const double radius = 0.5, height = 2.0;
            const double slant = std::sqrt(radius * radius + height * height);
            const double lateral = M_PI * radius * slant;
            const double base = M_PI * radius * radius;
            const double pick = rng.uniform01() * (lateral + base);
            const double theta = rng.uniform01() * 2.0 * M_PI;
            if (pick < lateral) {
                const double t = std::sqrt(rng.uniform01());  // radial fraction, area-uniform
                const double rr = radius * t;
                const double z = 1.0 - height * t;
                return {rr * std::cos(theta), rr * std::sin(theta), z};
            }
            const double rr = radius * std::sqrt(rng.uniform01());
            return {rr * std::cos(theta), rr * std::sin(theta), -1.0};
        }
        case ShapeKind::Plane: {
            // square patch [-1,1]^2 at z = 0
            return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0};
        }
    }
    throw InvalidArgument("sample_surface_point: unknown kind");
}

namespace detail {

// Sphere samples come in antithetic pairs (plus one zero-sum triad when the
// count is odd) so the noise-free sample centroid is exactly the sphere
// center and normalization keeps every point at norm 1.
inline std::vector<Vec3> sample_sphere_centered(std::size_t n, Rng& rng) {
    std::vector<Vec3> pts;
    pts.reserve(n);
    if (n % 2 == 1) {
        Vec3 axis = sample_surface_point(ShapeKind::Sphere, rng);
        Vec3 v0 = sample_surface_point(ShapeKind::Sphere, rng);
        Vec3 v = v0 - axis * v0.dot(axis);
        while (v.norm() < 1e-9) {
            v0 = sample_surface_point(ShapeKind::Sphere, rng);
            v = v0 - axis * v0.dot(axis);
        }
        v = v * (1.0 / v.norm());
        const auto r120 = axis_angle_matrix(axis, 2.0 * M_PI / 3.0);
        const Vec3 v2 = apply_matrix(r120, v);
        const Vec3 v3 = apply_matrix(r120, v2);
        pts.push_back(v);
        pts.push_back(v2);
        pts.push_back(v3);
    }
    while (pts.size() < n) {
        const Vec3 d = sample_surface_point(ShapeKind::Sphere, rng);
        pts.push_back(d);
        pts.push_back(d * -1.0);
    }
    pts.resize(n);
    return pts;
}

}  // namespace detail

// Uniform surface sampling + Gaussian noise + unit-sphere normalization.
inline PointCloud generate_shape(const ShapeSpec& spec, Rng& rng) {
    spec.require_valid();
    PointCloud cloud;
    if (spec.kind == ShapeKind::Sphere) {
        cloud.points = detail::sample_sphere_centered(spec.n, rng);
    } else {
        cloud.points.reserve(spec.n);
        for (std::size_t i = 0; i < spec.n; ++i)
            cloud.points.push_back(sample_surface_point(spec.kind, rng));
    }
    if (spec.noise_sigma > 0)
        for (auto& p : cloud.points)
            p += Vec3{rng.normal(0, spec.noise_sigma), rng.normal(0, spec.noise_sigma),
                      rng.normal(0, spec.noise_sigma)};
    return normalize_unit_sphere(cloud);
}

enum class Split { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw InvalidArgument("split_name: unknown split");
}

struct Dataset {
    std::vector<PointCloud> clouds;
    std::vector<std::size_t> class_ids;
    std::vector<Split> splits;
    std::uint64_t seed = 0;

    std::size_t size() const { return clouds.size(); }

    std::vector<std::size_t> indices_of(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < splits.size(); ++i)
            if (splits[i] == s) out.push_back(i);
        return out;
    }
};

// per_class samples of each of the six shapes, stratified into splits.
// Per-sample RNG substreams derive from (seed, global index) so regeneration
// is bit-identical and order-independent.
inline Dataset build_dataset(std::size_t per_class, std::size_t n_points, double noise_sigma,
                             double frac_train, double frac_val, double frac_test,
                             std::uint64_t seed) {
    if (std::fabs(frac_train + frac_val + frac_test - 1.0) > 1e-9)
        throw InvalidArgument("build_dataset: split fractions must sum to 1");
    if (per_class < 1) throw InvalidArgument("build_dataset: per_class must be >= 1");
    Dataset ds;
    ds.seed = seed;
    const double pc = static_cast<double>(per_class);
    std::size_t n_train = static_cast<std::size_t>(std::floor(frac_train * pc + 0.5));
    std::size_t n_val = static_cast<std::size_t>(std::floor(frac_val * pc + 0.5));
    if (n_train + n_val > per_class) n_val = per_class - n_train;
    const std::size_t n_test = per_class - n_train - n_val;
    (void)n_test;

    for (std::size_t cls = 0; cls < kNumShapeClasses; ++cls) {
        // split assignment within the class is itself a seeded shuffle
        std::vector<std::size_t> order(per_class);
        for (std::size_t i = 0; i < per_class; ++i) order[i] = i;
        Rng split_rng = Rng::substream(seed, 1000 + cls);
        split_rng.shuffle(order);
        std::vector<Split> assign(per_class, Split::Test);
        for (std::size_t i = 0; i < per_class; ++i) {
            if (i < n_train)
                assign[order[i]] = Split::Train;
            else if (i < n_train + n_val)
                assign[order[i]] = Split::Val;
        }
        for (std::size_t j = 0; j < per_class; ++j) {
            const std::size_t global_index = cls * per_class + j;
            Rng sample_rng = Rng::substream(seed, global_index);
            ShapeSpec spec{shape_from_class(cls), n_points, noise_sigma};
            ds.clouds.push_back(generate_shape(spec, sample_rng));
            ds.class_ids.push_back(cls);
            ds.splits.push_back(assign[j]);
        }
    }
    return ds;
}

// Directory export: one text cloud per sample plus a manifest with
// "path class_id split" lines.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("cannot write manifest in " + dir);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "cloud_%05zu.xyz", i);
        save_cloud_text(ds.clouds[i], dir + "/" + name);
        manifest << name << " " << ds.class_ids[i] << " " << split_name(ds.splits[i]) << "\n";
    }
    if (!manifest) throw IoError("manifest write failed in " + dir);
}

inline Dataset load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("cannot read manifest in " + dir);
    Dataset ds;
    std::string name, split;
    std::size_t cls;
    while (manifest >> name >> cls >> split) {
        ds.clouds.push_back(load_cloud_text(dir + "/" + name));
        ds.class_ids.push_back(cls);
        if (split == "train")
            ds.splits.push_back(Split::Train);
        else if (split == "val")
            ds.splits.push_back(Split::Val);
        else if (split == "test")
            ds.splits.push_back(Split::Test);
        else
            throw IoError("manifest has unknown split: " + split);
    }
    return ds;
}

}  // namespace mmpt
