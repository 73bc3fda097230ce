#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mmpt/geometry.hpp"
#include "mmpt/graph.hpp"

namespace mmpt {

struct LossWeights {
    double alpha = 1.0;       // reconstruction (Chamfer + query BCE)
    double beta = 1.0;        // MoCo term
    double w_contrast = 0.1;  // shared intra/cross-modal weight

    void require_valid() const {
        if (alpha < 0 || beta < 0 || w_contrast < 0)
            throw InvalidArgument("LossWeights: weights must be >= 0");
    }
};

struct LossReport {
    double rec_cd = 0.0;
    double rec_bce = 0.0;
    double moco = 0.0;
    double iml = 0.0;
    double cml = 0.0;
    double joint = 0.0;
};

inline double joint_loss(double rec_cd, double rec_bce, double moco, double iml, double cml,
                         const LossWeights& w) {
    w.require_valid();
    return w.alpha * (rec_cd + rec_bce) + w.beta * moco + w.w_contrast * (iml + cml);
}

// ---------------------------------------------------------------------------
// Point-set metrics (plain doubles; exhaustive nearest-neighbor scans).
// ---------------------------------------------------------------------------

namespace detail {

inline double min_sqdist_to(const Vec3& p, const std::vector<Vec3>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) best = std::min(best, sqdist(p, q));
    return best;
}

}  // namespace detail

// Sum of the two mean-of-min squared distances (the displayed CD form).
inline double chamfer_l2(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
    if (pred.empty() || gt.empty()) throw InvalidArgument("chamfer_l2: empty point set");
    double a = 0.0, b = 0.0;
    for (const auto& p : pred) a += detail::min_sqdist_to(p, gt);
    for (const auto& q : gt) b += detail::min_sqdist_to(q, pred);
    return a / static_cast<double>(pred.size()) + b / static_cast<double>(gt.size());
}

// PCN-convention CD-l1: half the sum of the two mean Euclidean distances.
inline double chamfer_l1(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
    if (pred.empty() || gt.empty()) throw InvalidArgument("chamfer_l1: empty point set");
    double a = 0.0, b = 0.0;
    for (const auto& p : pred) a += std::sqrt(detail::min_sqdist_to(p, gt));
    for (const auto& q : gt) b += std::sqrt(detail::min_sqdist_to(q, pred));
    return 0.5 * (a / static_cast<double>(pred.size()) + b / static_cast<double>(gt.size()));
}

// F-score at a distance threshold: harmonic mean of precision (pred points
// within threshold of gt) and recall (gt points within threshold of pred).
inline double fscore(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                     double threshold = 0.01) {
    if (pred.empty() || gt.empty()) throw InvalidArgument("fscore: empty point set");
    if (threshold <= 0) throw InvalidArgument("fscore: threshold must be positive");
    const double t2 = threshold * threshold;
    std::size_t np = 0, ng = 0;
    for (const auto& p : pred)
        if (detail::min_sqdist_to(p, gt) <= t2) ++np;
    for (const auto& q : gt)
        if (detail::min_sqdist_to(q, pred) <= t2) ++ng;
    const double precision = static_cast<double>(np) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(ng) / static_cast<double>(gt.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Differentiable losses (graph compositions).
// ---------------------------------------------------------------------------

namespace lossops {

// Batch-center embedding rows (x - column mean). Contrastive projections are
// centered before the similarity losses; without this the pooled features'
// shared direction dominates every cosine and the embeddings collapse.
inline Var center_rows(Graph& g, Var x) {
    if (g.value(x).rows() < 2) return x;
    return g.sub(x, g.mean_rows(x));
}

// Pairwise squared distances between row sets: [n,3] x [m,3] -> [n,m].
inline Var pairwise_sqdist(Graph& g, Var a, Var b) {
    Var a2 = g.sum_cols(g.mul(a, a));                    // [n,1]
    Var b2 = g.sum_cols(g.mul(b, b));                    // [m,1]
    Var cross = g.scale(g.matmul(a, g.transpose(b)), -2.0);
    Var d = g.add(cross, a2);                            // column broadcast
    return g.add(d, g.transpose(b2));                    // row broadcast
}

inline Var row_min(Graph& g, Var m) { return g.scale(g.max_cols(g.scale(m, -1.0)), -1.0); }
inline Var col_min(Graph& g, Var m) { return g.scale(g.max_rows(g.scale(m, -1.0)), -1.0); }

// Differentiable CD-l2 between two [*,3] row sets.
inline Var chamfer_l2(Graph& g, Var pred, Var gt) {
    Var d = pairwise_sqdist(g, pred, gt);
    return g.add(g.mean_all(row_min(g, d)), g.mean_all(col_min(g, d)));
}

// Differentiable CD-l1 (PCN convention).
inline Var chamfer_l1(Graph& g, Var pred, Var gt) {
    Var d = pairwise_sqdist(g, pred, gt);
    // tiny bias keeps sqrt differentiable when a distance is exactly zero
    const double eps = 1e-18;
    Var fwd = g.mean_all(g.sqrt_op(g.add_scalar(row_min(g, d), eps)));
    Var bwd = g.mean_all(g.sqrt_op(g.add_scalar(col_min(g, d), eps)));
    return g.scale(g.add(fwd, bwd), 0.5);
}

// Mean binary cross-entropy on probabilities clamped to [1e-7, 1-1e-7].
// labels is a same-length 0/1 constant.
inline Var query_bce(Graph& g, Var probs, Var labels) {
    const Tensor& tp = g.value(probs);
    const Tensor& tl = g.value(labels);
    if (tp.numel() != tl.numel()) throw ShapeError("query_bce: probs/labels length mismatch");
    Var p = g.clamp(probs, 1e-7, 1.0 - 1e-7);
    Var pos = g.mul(labels, g.log(p));
    Var one_minus_l = g.add_scalar(g.scale(labels, -1.0), 1.0);
    Var one_minus_p = g.add_scalar(g.scale(p, -1.0), 1.0);
    Var neg = g.mul(one_minus_l, g.log(one_minus_p));
    return g.scale(g.mean_all(g.add(pos, neg)), -1.0);
}

// Optional focal variant of the query term, off by default. Standard focal
// weighting (1-p_t)^gamma with class balance alpha_f.
inline Var query_focal(Graph& g, Var probs, Var labels, double gamma_f = 2.0,
                       double alpha_f = 0.25) {
    Var p = g.clamp(probs, 1e-7, 1.0 - 1e-7);
    Var one_minus_l = g.add_scalar(g.scale(labels, -1.0), 1.0);
    Var one_minus_p = g.add_scalar(g.scale(p, -1.0), 1.0);
    // p_t = l*p + (1-l)*(1-p)
    Var pt = g.add(g.mul(labels, p), g.mul(one_minus_l, one_minus_p));
    Var focal = g.exp(g.scale(g.log(g.add_scalar(g.scale(pt, -1.0), 1.0 + 1e-12)), gamma_f));
    Var alpha_t = g.add_scalar(g.scale(labels, alpha_f - (1.0 - alpha_f)), 1.0 - alpha_f);
    Var ce = g.scale(g.log(pt), -1.0);
    return g.mean_all(g.mul(alpha_t, g.mul(focal, ce)));
}

namespace detail {

inline Tensor off_diagonal_mask(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m.data[i * n + j] = (i == j) ? 0.0 : 1.0;
    return m;
}

// One direction of the NT-Xent loss from raw similarity matrices:
//   aa[i][k] = sim(a_i, a_k), ab[i][k] = sim(a_i, b_k), both already /tau.
//   l_i = -ab[i][i] + log( sum_{k != i} exp(aa[i][k]) + sum_k exp(ab[i][k]) )
// Returns the mean over i.
inline Var ntxent_direction_from_sims(Graph& g, Var aa, Var ab) {
    const std::size_t n = g.value(aa).rows();
    Var mask = g.constant(off_diagonal_mask(n));
    Var same = g.sum_cols(g.mul(g.exp(aa), mask));       // [n,1]
    Var cross = g.sum_cols(g.exp(ab));                   // [n,1]
    Var log_denom = g.log(g.add(same, cross));
    Var eye = g.constant(Tensor::identity(n));
    Var pos = g.sum_cols(g.mul(ab, eye));                // diagonal of ab
    return g.mean_all(g.sub(log_denom, pos));
}

}  // namespace detail

// Symmetrized NT-Xent over two aligned N x d embedding matrices. Rows are
// L2-normalized internally; the denominator couples same-set negatives
// (k != i) with all cross-set pairings, per direction:
//   L = 1/(2N) sum_i ( l_{i,a,b} + l_{i,b,a} )
inline Var ntxent_pair(Graph& g, Var a, Var b, double tau) {
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (!ta.same_shape(tb)) throw ShapeError("ntxent: embedding shape mismatch");
    if (ta.rows() < 2) throw InvalidArgument("ntxent: need at least 2 pairs");
    if (tau <= 0) throw InvalidArgument("ntxent: tau must be positive");
    Var an = g.l2_normalize_rows(a);
    Var bn = g.l2_normalize_rows(b);
    const double inv_tau = 1.0 / tau;
    Var aa = g.scale(g.matmul(an, g.transpose(an)), inv_tau);
    Var bb = g.scale(g.matmul(bn, g.transpose(bn)), inv_tau);
    Var ab = g.scale(g.matmul(an, g.transpose(bn)), inv_tau);
    Var dir_ab = detail::ntxent_direction_from_sims(g, aa, ab);
    Var dir_ba = detail::ntxent_direction_from_sims(g, bb, g.transpose(ab));
    return g.scale(g.add(dir_ab, dir_ba), 0.5);
}

inline Var ntxent_intra(Graph& g, Var z3d, Var s3d, double tau) {
    return ntxent_pair(g, z3d, s3d, tau);
}

inline Var ntxent_cross(Graph& g, Var s3d, Var z2d, double tau) {
    return ntxent_pair(g, s3d, z2d, tau);
}

// MoCo-style InfoNCE: positive keys row-aligned with the queries, negatives
// from the queue. All rows are L2-normalized internally. With an empty queue
// the denominator is the positive term alone and the loss is zero.
inline Var moco_loss(Graph& g, Var queries, Var key_pos, Var queue, double tau) {
    // copy dimensions up front: node references do not survive op pushes
    const Shape q_shape = g.value(queries).shape;
    if (q_shape != g.value(key_pos).shape) throw ShapeError("moco_loss: query/key shape mismatch");
    if (q_shape.size() != 2) throw ShapeError("moco_loss: queries must be 2-D");
    const Shape queue_shape = g.value(queue).shape;
    const bool has_queue = shape_numel(queue_shape) > 0;
    if (has_queue && (queue_shape.size() != 2 || queue_shape[1] != q_shape[1]))
        throw ShapeError("moco_loss: queue width mismatch");
    if (tau <= 0) throw InvalidArgument("moco_loss: tau must be positive");
    Var qn = g.l2_normalize_rows(queries);
    Var kn = g.l2_normalize_rows(key_pos);
    const double inv_tau = 1.0 / tau;
    const std::size_t n = q_shape[0];
    Var eye = g.constant(Tensor::identity(n));
    Var pos = g.scale(g.sum_cols(g.mul(g.matmul(qn, g.transpose(kn)), eye)), inv_tau);  // [n,1]
    Var logits = pos;
    if (has_queue) {
        Var queue_n = g.l2_normalize_rows(queue);
        Var negs = g.scale(g.matmul(qn, g.transpose(queue_n)), inv_tau);  // [n,K]
        logits = g.concat_cols({pos, negs});
    }
    Var log_denom = g.log(g.sum_cols(g.exp(logits)));
    return g.mean_all(g.sub(log_denom, pos));
}

// Weighted joint objective.
inline Var joint(Graph& g, Var rec_cd, Var rec_bce, Var moco, Var iml, Var cml,
                 const LossWeights& w) {
    w.require_valid();
    Var rec = g.scale(g.add(rec_cd, rec_bce), w.alpha);
    Var contrast = g.scale(g.add(iml, cml), w.w_contrast);
    return g.add(g.add(rec, g.scale(moco, w.beta)), contrast);
}

}  // namespace lossops

// Convenience double-valued wrappers over the graph compositions; these are
// the same code paths the trainer differentiates.
inline double ntxent_intra(const Tensor& z3d, const Tensor& s3d, double tau) {
    Graph g;
    return g.value(lossops::ntxent_intra(g, g.constant(z3d), g.constant(s3d), tau)).item();
}

inline double ntxent_cross(const Tensor& s3d, const Tensor& z2d, double tau) {
    Graph g;
    return g.value(lossops::ntxent_cross(g, g.constant(s3d), g.constant(z2d), tau)).item();
}

inline double moco_loss(const Tensor& queries, const Tensor& key_pos, const Tensor& queue,
                        double tau) {
    Graph g;
    return g.value(lossops::moco_loss(g, g.constant(queries), g.constant(key_pos), g.constant(queue), tau))
        .item();
}

inline double query_bce(const std::vector<double>& probs, const std::vector<double>& labels) {
    if (probs.size() != labels.size()) throw ShapeError("query_bce: length mismatch");
    Graph g;
    Tensor p({probs.size(), 1}, std::vector<double>(probs));
    Tensor l({labels.size(), 1}, std::vector<double>(labels));
    return g.value(lossops::query_bce(g, g.constant(p), g.constant(l))).item();
}

}  // namespace mmpt
