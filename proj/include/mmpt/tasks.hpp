#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "mmpt/backbone.hpp"
#include "mmpt/geometry.hpp"
#include "mmpt/losses.hpp"

namespace mmpt {

// Geometry / task knobs shared by the three pretext pipelines.
struct PipelineConfig {
    std::size_t m_groups = 32;
    std::size_t k_neighbors = 16;
    double mask_ratio = 0.8;
    std::size_t n_real = 16;
    std::size_t n_fake = 16;
    std::size_t n_views = 1;
    std::size_t view_res = 32;
    double tau = 0.1;
    AugmentSpec aug;

    void require_valid() const {
        if (m_groups < 1) throw InvalidArgument("PipelineConfig: m_groups must be >= 1");
        if (k_neighbors < 1) throw InvalidArgument("PipelineConfig: k_neighbors must be >= 1");
        if (mask_ratio < 0 || mask_ratio >= 1)
            throw InvalidArgument("PipelineConfig: mask_ratio must be in [0,1)");
        if (view_res < 8) throw InvalidArgument("PipelineConfig: view_res must be >= 8");
        aug.require_valid();
    }
};

// Stochastic-depth multipliers: Bernoulli skip while training, expected
// scale 1-p at evaluation.
inline std::vector<double> branch_scales(std::size_t depth, double p, bool training, Rng& rng) {
    std::vector<double> s(depth, 1.0);
    if (p <= 0.0) return s;
    for (auto& v : s) v = training ? (rng.uniform01() < p ? 0.0 : 1.0) : (1.0 - p);
    return s;
}

// ---------------------------------------------------------------------------
// TLR: masked token reconstruction
// ---------------------------------------------------------------------------

struct TlrForward {
    PatchSet patches;
    MaskPartition part;
    Var pred;      // [mask_count, K, 3], center-relative
    Tensor gt;     // same layout
    Var cd_loss;   // mean over masked patches of CD-l2(pred_j, gt_j)
};

inline TlrForward tlr_forward(Graph& g, const Model& m, const PointCloud& cloud,
                              const PipelineConfig& pc, Rng& rng, bool training) {
    pc.require_valid();
    TlrForward out;
    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    out.patches = knn_group(cloud, centers, pc.k_neighbors);
    out.part = random_mask(pc.m_groups, pc.mask_ratio, rng);
    const std::size_t mask_count = out.part.masked_idx.size();
    const std::size_t k = pc.k_neighbors;

    std::vector<Tensor> visible;
    visible.reserve(out.part.visible_idx.size());
    std::vector<Vec3> centers_vis, centers_masked;
    for (auto i : out.part.visible_idx) {
        visible.push_back(patch_tensor(out.patches.patches[i]));
        centers_vis.push_back(out.patches.centers[i]);
    }
    for (auto i : out.part.masked_idx) centers_masked.push_back(out.patches.centers[i]);

    Var tokens = embed_patches(g, m, visible);
    Var pos_vis = embed_positions(g, m, centers_tensor(centers_vis));
    Var enc = encode_tokens(g, m, tokens, pos_vis,
                            branch_scales(m.enc_blocks.size(), m.cfg.bb.drop_path, training, rng));

    std::vector<Vec3> centers_all = centers_vis;
    centers_all.insert(centers_all.end(), centers_masked.begin(), centers_masked.end());
    Var pos_all = embed_positions(g, m, centers_tensor(centers_all));
    Var h_mask = decode_tlr(g, m, enc, mask_count, pos_all,
                            branch_scales(m.dec_blocks.size(), m.cfg.bb.drop_path, training, rng));
    out.pred = reconstruct_head(g, m, h_mask);

    out.gt = Tensor({mask_count, k, 3});
    for (std::size_t j = 0; j < mask_count; ++j) {
        const auto& patch = out.patches.patches[out.part.masked_idx[j]];
        for (std::size_t i = 0; i < k; ++i) {
            out.gt.data[(j * k + i) * 3 + 0] = patch[i].x;
            out.gt.data[(j * k + i) * 3 + 1] = patch[i].y;
            out.gt.data[(j * k + i) * 3 + 2] = patch[i].z;
        }
    }

    Var pred2d = g.reshape(out.pred, {mask_count * k, 3});
    Var acc = g.constant_scalar(0.0);
    for (std::size_t j = 0; j < mask_count; ++j) {
        Var pj = g.slice_rows(pred2d, j * k, k);
        Tensor gtj({k, 3});
        std::copy(out.gt.data.begin() + static_cast<std::ptrdiff_t>(j * k * 3),
                  out.gt.data.begin() + static_cast<std::ptrdiff_t>((j + 1) * k * 3), gtj.data.begin());
        acc = g.add(acc, lossops::chamfer_l2(g, pj, g.constant(gtj)));
    }
    out.cd_loss = g.scale(acc, 1.0 / static_cast<double>(mask_count));
    return out;
}

// ---------------------------------------------------------------------------
// PLR: real/fake query discrimination
// ---------------------------------------------------------------------------

struct QueryBatch {
    Tensor coords;  // [Q,3] world coordinates, real block first
    Tensor labels;  // [Q,1] 1 = real
    std::size_t n_real = 0, n_fake = 0;
};

// Real queries are drawn without replacement from the masked groups' points
// (denormalized to world coordinates); fake queries are uniform in the patch
// bounding box inflated by 10% per axis.
inline QueryBatch sample_queries(const PatchSet& patches, const MaskPartition& part,
                                 std::size_t n_real, std::size_t n_fake, Rng& rng) {
    if (part.masked_idx.empty()) throw InvalidState("sample_queries: mask partition has no masked groups");
    std::vector<Vec3> pool;
    pool.reserve(part.masked_idx.size() * patches.k);
    for (auto j : part.masked_idx)
        for (const auto& p : patches.patches[j]) pool.push_back(p + patches.centers[j]);
    if (n_real > pool.size())
        throw InvalidArgument("sample_queries: n_real exceeds masked point count");

    Vec3 lo = patches.centers[0] + patches.patches[0][0];
    Vec3 hi = lo;
    for (std::size_t j = 0; j < patches.m(); ++j)
        for (const auto& p : patches.patches[j]) {
            const Vec3 w = p + patches.centers[j];
            lo = {std::min(lo.x, w.x), std::min(lo.y, w.y), std::min(lo.z, w.z)};
            hi = {std::max(hi.x, w.x), std::max(hi.y, w.y), std::max(hi.z, w.z)};
        }
    const Vec3 mid = (lo + hi) * 0.5;
    const Vec3 half = (hi - lo) * (0.5 * 1.1);  // inflate 10%

    QueryBatch qb;
    qb.n_real = n_real;
    qb.n_fake = n_fake;
    qb.coords = Tensor({n_real + n_fake, 3});
    qb.labels = Tensor({n_real + n_fake, 1});
    const auto picks = rng.sample_without_replacement(pool.size(), n_real);
    for (std::size_t i = 0; i < n_real; ++i) {
        const Vec3& p = pool[picks[i]];
        qb.coords.data[i * 3 + 0] = p.x;
        qb.coords.data[i * 3 + 1] = p.y;
        qb.coords.data[i * 3 + 2] = p.z;
        qb.labels.data[i] = 1.0;
    }
    for (std::size_t i = 0; i < n_fake; ++i) {
        const std::size_t r = n_real + i;
        qb.coords.data[r * 3 + 0] = mid.x + half.x * rng.uniform(-1.0, 1.0);
        qb.coords.data[r * 3 + 1] = mid.y + half.y * rng.uniform(-1.0, 1.0);
        qb.coords.data[r * 3 + 2] = mid.z + half.z * rng.uniform(-1.0, 1.0);
        qb.labels.data[r] = 0.0;
    }
    return qb;
}

// Encoder half of the PLR pipeline. Only visible groups are embedded; masked
// coordinates never reach this function's graph nodes, which is the leakage
// guarantee the tests pin down.
struct PlrEncode {
    Var enc;       // [V+1, dim], row 0 = CLS
    Var pos_vis;   // [V, dim]
    std::vector<std::size_t> visible;
};

inline PlrEncode plr_encode(Graph& g, const Model& m, const PatchSet& patches,
                            const MaskPartition& part, Rng& rng, bool training) {
    PlrEncode out;
    out.visible = part.visible_idx;
    std::vector<Tensor> vis_patches;
    std::vector<Vec3> vis_centers;
    vis_patches.reserve(part.visible_idx.size());
    for (auto i : part.visible_idx) {
        vis_patches.push_back(patch_tensor(patches.patches[i]));
        vis_centers.push_back(patches.centers[i]);
    }
    Var tokens = embed_patches(g, m, vis_patches);
    out.pos_vis = embed_positions(g, m, centers_tensor(vis_centers));
    Var tokens_cls = g.concat_rows({g.param(*m.cls_token), tokens});
    Var pos_cls = g.concat_rows({g.param(*m.cls_pos), out.pos_vis});
    out.enc = encode_tokens(g, m, tokens_cls, pos_cls,
                            branch_scales(m.enc_blocks.size(), m.cfg.bb.drop_path, training, rng));
    return out;
}

struct PlrForward {
    PatchSet patches;
    MaskPartition part;
    QueryBatch queries;
    Var logits;   // [Q,1]
    Var probs;    // sigmoid(logits)
    Var bce;      // scalar
    Var cls_enc;  // [1, dim]
    Var s3d;      // [1, proj_dim]
};

// Cross-attention discrimination over a prepared query batch. Context keys
// are the encoded visible tokens plus their positional embeddings; the CLS
// row is excluded from the context.
inline PlrForward plr_forward_with_queries(Graph& g, const Model& m, PatchSet patches,
                                           MaskPartition part, QueryBatch queries, Rng& rng,
                                           bool training) {
    PlrForward out;
    out.patches = std::move(patches);
    out.part = std::move(part);
    out.queries = std::move(queries);
    PlrEncode pe = plr_encode(g, m, out.patches, out.part, rng, training);
    out.cls_enc = g.slice_rows(pe.enc, 0, 1);
    out.s3d = m.s3d_head.apply(g, out.cls_enc);

    const std::size_t v = out.part.visible_idx.size();
    Var context = g.add(g.slice_rows(pe.enc, 1, v), pe.pos_vis);
    Var query_tokens = embed_positions(g, m, out.queries.coords);
    const double ca_scale = (m.cfg.bb.drop_path > 0.0)
                                ? (training ? (rng.uniform01() < m.cfg.bb.drop_path ? 0.0 : 1.0)
                                            : 1.0 - m.cfg.bb.drop_path)
                                : 1.0;
    Var decoded = m.plr_ln.apply(g, m.plr_ca.apply_cross(g, query_tokens, context, ca_scale));
    out.logits = m.plr_head.apply(g, decoded);
    out.probs = g.sigmoid(out.logits);
    out.bce = lossops::query_bce(g, out.probs, g.constant(out.queries.labels));
    return out;
}

inline PlrForward plr_forward(Graph& g, const Model& m, const PointCloud& cloud,
                              const PipelineConfig& pc, Rng& rng, bool training) {
    pc.require_valid();
    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    MaskPartition part = random_mask(pc.m_groups, pc.mask_ratio, rng);
    QueryBatch queries = sample_queries(patches, part, pc.n_real, pc.n_fake, rng);
    return plr_forward_with_queries(g, m, std::move(patches), std::move(part), std::move(queries),
                                    rng, training);
}

// s3d path only (masked encoder + CLS + logits head); this is what the
// momentum key encoder evaluates on its own parameter copy.
inline Var masked_cls_s3d(Graph& g, const Model& m, const PointCloud& cloud,
                          const PipelineConfig& pc, Rng& rng, bool training) {
    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    MaskPartition part = random_mask(pc.m_groups, pc.mask_ratio, rng);
    PlrEncode pe = plr_encode(g, m, patches, part, rng, training);
    return m.s3d_head.apply(g, g.slice_rows(pe.enc, 0, 1));
}

// ---------------------------------------------------------------------------
// MCL: dual-view 3D branch and rendered 2D branch
// ---------------------------------------------------------------------------

// Orthographic depth maps from randomly rotated copies of the cloud. Each
// pixel keeps the minimum normalized depth among covering points; empty
// pixels carry the +1 background sentinel. Values lie in [0,1].
inline std::vector<Tensor> render_views(const PointCloud& cloud, std::size_t n_views,
                                        std::size_t height, std::size_t width, Rng& rng) {
    cloud.require_valid();
    if (height < 8 || width < 8) throw InvalidArgument("render_views: resolution must be >= 8x8");
    std::vector<Tensor> views;
    views.reserve(n_views);
    for (std::size_t v = 0; v < n_views; ++v) {
        Vec3 gdir{rng.normal(), rng.normal(), rng.normal()};
        Vec3 axis = gdir.norm() > 1e-12 ? gdir * (1.0 / gdir.norm()) : Vec3{0, 0, 1};
        const double angle = rng.uniform01() * 2.0 * M_PI;
        const auto rot = detail::axis_angle_matrix(axis, angle);
        Tensor img = Tensor::full({1, height, width}, 1.0);
        for (const auto& p : cloud.points) {
            const Vec3 q = detail::apply_matrix(rot, p);
            const double fx = (q.x + 1.0) * 0.5;
            const double fy = (q.y + 1.0) * 0.5;
            const std::size_t col = static_cast<std::size_t>(
                std::clamp(std::floor(fx * static_cast<double>(width)), 0.0, static_cast<double>(width - 1)));
            const std::size_t row = static_cast<std::size_t>(
                std::clamp(std::floor(fy * static_cast<double>(height)), 0.0, static_cast<double>(height - 1)));
            const double depth = std::clamp((q.z + 1.0) * 0.5, 0.0, 1.0);
            double& px = img.data[row * width + col];
            px = std::min(px, depth);
        }
        views.push_back(std::move(img));
    }
    return views;
}

inline void write_pgm(const Tensor& view, const std::string& path) {
    if (view.ndim() != 3 || view.shape[0] != 1) throw InvalidArgument("write_pgm: expected [1,H,W]");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::size_t h = view.shape[1], w = view.shape[2];
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double d : view.data) {
        const double clamped = std::clamp(d, 0.0, 1.0);
        f.put(static_cast<char>(static_cast<int>(clamped * 255.0 + 0.5)));
    }
    if (!f) throw IoError("write failed: " + path);
}

// Full-cloud (unmasked) backbone pass: all M groups plus CLS, pooled to the
// CLS ⊕ max-pool global feature.
inline Var f3d_global(Graph& g, const Model& m, const PointCloud& cloud, const PipelineConfig& pc,
                      Rng& rng, bool training) {
    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    std::vector<Tensor> all;
    all.reserve(patches.m());
    for (const auto& p : patches.patches) all.push_back(patch_tensor(p));
    Var tokens = embed_patches(g, m, all);
    Var pos = embed_positions(g, m, centers_tensor(patches.centers));
    Var tokens_cls = g.concat_rows({g.param(*m.cls_token), tokens});
    Var pos_cls = g.concat_rows({g.param(*m.cls_pos), pos});
    Var enc = encode_tokens(g, m, tokens_cls, pos_cls,
                            branch_scales(m.enc_blocks.size(), m.cfg.bb.drop_path, training, rng));
    return pooled_global_feature(g, enc);
}

// z-projection of two already-augmented views through the shared extractor:
// z3d = (g3d(f3d(view1)) + g3d(f3d(view2))) / 2.
inline Var mcl_project_views(Graph& g, const Model& m, const PointCloud& view1,
                             const PointCloud& view2, const PipelineConfig& pc, Rng& rng,
                             bool training) {
    Var z1 = m.g3d.apply(g, f3d_global(g, m, view1, pc, rng, training));
    Var z2 = m.g3d.apply(g, f3d_global(g, m, view2, pc, rng, training));
    return g.scale(g.add(z1, z2), 0.5);
}

// 2D branch: render -> conv encoder -> projection, averaged over views.
inline Var mcl_project_images(Graph& g, const Model& m, const std::vector<Tensor>& views) {
    if (views.empty()) throw InvalidArgument("mcl_project_images: need at least one view");
    Var acc{};
    for (const auto& v : views) {
        Var z = m.g2d.apply(g, m.f2d.apply(g, g.constant(v)));
        acc = acc.valid() ? g.add(acc, z) : z;
    }
    return g.scale(acc, 1.0 / static_cast<double>(views.size()));
}

struct MclForward {
    Var z3d;  // [1, proj]
    Var s3d;  // [1, proj]
    Var z2d;  // [1, proj]
    PointCloud view1, view2;
};

// Standalone MCL forward for one cloud: two sampled augmentations for the 3D
// branch, a fresh masked-encoder pass for the s3d logits, and rendered depth
// views for the 2D branch. The trainer reuses the PLR pass's s3d instead of
// recomputing it; the numbers are the same construction.
inline MclForward mcl_forward(Graph& g, const Model& m, const PointCloud& cloud,
                              const PipelineConfig& pc, Rng& rng, bool training) {
    pc.require_valid();
    if (pc.n_views < 1) throw InvalidArgument("mcl_forward: n_views must be >= 1");
    MclForward out;
    out.view1 = augment(cloud, pc.aug, rng);
    out.view2 = augment(cloud, pc.aug, rng);
    out.z3d = mcl_project_views(g, m, out.view1, out.view2, pc, rng, training);
    out.s3d = masked_cls_s3d(g, m, cloud, pc, rng, training);
    out.z2d = mcl_project_images(g, m, render_views(cloud, pc.n_views, pc.view_res, pc.view_res, rng));
    return out;
}

// ---------------------------------------------------------------------------
// Momentum keys
// ---------------------------------------------------------------------------

// EMA copy of the s3d-path parameters plus a FIFO queue of projected keys.
struct MomentumKeys {
    ModelState key_state;
    double momentum = 0.999;
    std::size_t capacity = 256;
    Tensor queue;           // [capacity, proj] ring buffer
    std::size_t fill = 0;   // valid rows
    std::size_t head = 0;   // next write slot

    // The queue starts at capacity with random unit keys so the InfoNCE
    // denominator has the same size from step one onward.
    static MomentumKeys init(const ModelState& model, const ModelConfig& cfg, double momentum,
                             std::size_t capacity, std::uint64_t queue_seed = 0x9e0) {
        MomentumKeys mk;
        mk.momentum = momentum;
        mk.capacity = capacity;
        mk.queue = Tensor({capacity, cfg.proj_dim});
        Rng qrng(queue_seed);
        for (std::size_t i = 0; i < capacity; ++i) {
            double nrm = 0.0;
            for (std::size_t j = 0; j < cfg.proj_dim; ++j) {
                const double v = qrng.normal();
                mk.queue.data[i * cfg.proj_dim + j] = v;
                nrm += v * v;
            }
            nrm = std::max(std::sqrt(nrm), 1e-12);
            for (std::size_t j = 0; j < cfg.proj_dim; ++j) mk.queue.data[i * cfg.proj_dim + j] /= nrm;
        }
        mk.fill = capacity;
        for (const Param* p : model.params())
            if (Model::in_key_scope(p->name)) mk.key_state.create(p->name, p->value);
        return mk;
    }

    void ema_update(ModelState& model) {
        for (Param* kp : key_state.params()) {
            const Param& qp = model.get(kp->name);
            for (std::size_t i = 0; i < kp->value.data.size(); ++i)
                kp->value.data[i] = momentum * kp->value.data[i] + (1.0 - momentum) * qp.value.data[i];
        }
    }

    // L2-normalize and enqueue one key row.
    void push(const Tensor& key_row) {
        if (key_row.ndim() != 2 || key_row.rows() != 1 || key_row.cols() != queue.cols())
            throw ShapeError("MomentumKeys::push: bad key shape");
        double nrm = 0.0;
        for (double v : key_row.data) nrm += v * v;
        nrm = std::max(std::sqrt(nrm), 1e-12);
        for (std::size_t j = 0; j < queue.cols(); ++j)
            queue.data[head * queue.cols() + j] = key_row.data[j] / nrm;
        head = (head + 1) % capacity;
        fill = std::min(fill + 1, capacity);
    }

    // Snapshot of the valid queue rows, oldest-first ordering not required
    // by the loss (it is permutation-invariant).
    Tensor snapshot() const {
        Tensor out({fill, queue.cols()});
        for (std::size_t i = 0; i < fill * queue.cols(); ++i) out.data[i] = queue.data[i];
        return out;
    }
};

}  // namespace mmpt
