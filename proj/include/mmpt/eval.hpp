#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mmpt/checkpoint.hpp"
#include "mmpt/train.hpp"

namespace mmpt {

// ---------------------------------------------------------------------------
// Frozen-encoder features
// ---------------------------------------------------------------------------

// CLS ⊕ max-pool global feature for every sample, eval mode (no masking, no
// augmentation). Row i corresponds to data sample i.
inline Tensor extract_global_features(const Model& model, const Dataset& data,
                                      const PipelineConfig& pc) {
    const std::size_t width = 2 * model.cfg.bb.dim;
    Tensor out({data.size(), width});
    Rng unused(0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        Graph g;
        Var f = f3d_global(g, model, data.clouds[i], pc, unused, false);
        const Tensor& row = g.value(f);
        for (std::size_t j = 0; j < width; ++j) out.data[i * width + j] = row.data[j];
    }
    return out;
}

// g3d projection of the global feature (the embedding emitted for external
// visualization).
inline Tensor extract_projected_features(const Model& model, const Dataset& data,
                                         const PipelineConfig& pc) {
    const std::size_t width = model.cfg.proj_dim;
    Tensor out({data.size(), width});
    Rng unused(0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        Graph g;
        Var z = model.g3d.apply(g, f3d_global(g, model, data.clouds[i], pc, unused, false));
        const Tensor& row = g.value(z);
        for (std::size_t j = 0; j < width; ++j) out.data[i * width + j] = row.data[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multinomial logistic probe
// ---------------------------------------------------------------------------

struct ProbeHead {
    Tensor w;            // [F, C]
    Tensor b;            // [1, C]
    Tensor feat_mean;    // [1, F] standardization fitted on the training set
    Tensor feat_scale;   // [1, F]
    std::size_t classes = 0;
};

namespace eval_detail {

inline Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& scale) {
    Tensor out = x;
    const std::size_t f = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < f; ++j)
            out.data[i * f + j] = (x.data[i * f + j] - mean.data[j]) * scale.data[j];
    return out;
}

}  // namespace eval_detail

// Full-batch softmax regression on frozen features. Deterministic: zero
// init, fixed iteration count, AdamW updates.
inline ProbeHead fit_probe(const Tensor& features, const std::vector<std::size_t>& labels,
                           std::size_t classes, std::size_t epochs, double lr) {
    if (features.rows() != labels.size()) throw ShapeError("fit_probe: feature/label count mismatch");
    if (features.rows() == 0) throw InvalidArgument("fit_probe: empty training set");
    const std::size_t n = features.rows(), f = features.cols();

    ProbeHead head;
    head.classes = classes;
    head.feat_mean = Tensor({1, f});
    head.feat_scale = Tensor({1, f});
    for (std::size_t j = 0; j < f; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += features.data[i * f + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = features.data[i * f + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        head.feat_mean.data[j] = mean;
        head.feat_scale.data[j] = 1.0 / std::sqrt(var + 1e-8);
    }
    const Tensor x = eval_detail::standardize(features, head.feat_mean, head.feat_scale);

    Tensor onehot({n, classes});
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= classes) throw InvalidArgument("fit_probe: label out of range");
        onehot.data[i * classes + labels[i]] = 1.0;
    }

    Param w("probe.w", Tensor::zeros({f, classes}));
    Param b("probe.b", Tensor::zeros({1, classes}));
    AdamW opt(0.9, 0.999, 1e-8, 1e-4);
    std::vector<Param*> params{&w, &b};
    opt.init(params);
    for (std::size_t e = 0; e < epochs; ++e) {
        Graph g;
        Var logits = g.add(g.matmul(g.constant(x), g.param(w)), g.param(b));
        Var logp = g.log(g.softmax(logits));
        Var picked = g.mul(logp, g.constant(onehot));
        Var loss = g.scale(g.sum_all(picked), -1.0 / static_cast<double>(n));
        w.zero_grad();
        b.zero_grad();
        g.backward(loss);
        opt.step(params, lr);
    }
    head.w = w.value;
    head.b = b.value;
    return head;
}

inline std::vector<std::size_t> probe_predict(const ProbeHead& head, const Tensor& features) {
    const Tensor x = eval_detail::standardize(features, head.feat_mean, head.feat_scale);
    const std::size_t n = x.rows(), f = x.cols(), c = head.classes;
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_v = -1e300;
        for (std::size_t k = 0; k < c; ++k) {
            double v = head.b.data[k];
            for (std::size_t j = 0; j < f; ++j) v += x.data[i * f + j] * head.w.data[j * c + k];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out[i] = best;
    }
    return out;
}

inline Tensor gather_feature_rows(const Tensor& features, const std::vector<std::size_t>& rows) {
    const std::size_t f = features.cols();
    Tensor out({rows.size(), f});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < f; ++j) out.data[i * f + j] = features.data[rows[i] * f + j];
    return out;
}

// Frozen encoder, logistic head on the train split, accuracy on the test
// split.
inline double linear_probe(const Model& model, const Dataset& data, const PipelineConfig& pc,
                           std::size_t epochs, double lr) {
    const Tensor features = extract_global_features(model, data, pc);
    const auto train_idx = data.indices_of(Split::Train);
    const auto test_idx = data.indices_of(Split::Test);
    if (train_idx.empty() || test_idx.empty())
        throw InvalidArgument("linear_probe: dataset needs non-empty train and test splits");
    std::vector<std::size_t> train_y;
    for (auto i : train_idx) train_y.push_back(data.class_ids[i]);
    const ProbeHead head =
        fit_probe(gather_feature_rows(features, train_idx), train_y, kNumShapeClasses, epochs, lr);
    const auto pred = probe_predict(head, gather_feature_rows(features, test_idx));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test_idx.size(); ++i)
        if (pred[i] == data.class_ids[test_idx[i]]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(test_idx.size());
}

inline double linear_probe(Trainer& t, const Dataset& data, std::size_t epochs) {
    return linear_probe(t.model(), data, t.config().pipeline(), epochs, t.config().probe_lr);
}

// ---------------------------------------------------------------------------
// k-way m-shot episodes
// ---------------------------------------------------------------------------

struct FewShotResult {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_episode;
};

constexpr std::size_t kFewShotQueriesPerClass = 20;

// Per episode: sample k classes, m support samples per class, fit the probe
// head on support, evaluate on 20 disjoint queries per class.
inline FewShotResult few_shot_eval(const Model& model, const Dataset& data,
                                   const PipelineConfig& pc, std::size_t k_way, std::size_t m_shot,
                                   std::size_t episodes, std::uint64_t seed,
                                   std::size_t probe_epochs = 150, double probe_lr = 0.05) {
    if (k_way < 1 || k_way > kNumShapeClasses)
        throw InvalidArgument("few_shot_eval: k_way out of range");
    if (episodes < 1) throw InvalidArgument("few_shot_eval: episodes must be >= 1");
    std::vector<std::vector<std::size_t>> by_class(kNumShapeClasses);
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data.class_ids[i]].push_back(i);
    for (std::size_t c = 0; c < kNumShapeClasses; ++c)
        if (by_class[c].size() < m_shot + kFewShotQueriesPerClass)
            throw InvalidArgument("few_shot_eval: class " + std::to_string(c) +
                                  " has too few samples for " + std::to_string(m_shot) + "-shot + " +
                                  std::to_string(kFewShotQueriesPerClass) + " queries");

    const Tensor features = extract_global_features(model, data, pc);
    FewShotResult res;
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        Rng rng = Rng::substream(seed, ep);
        auto class_pick = rng.sample_without_replacement(kNumShapeClasses, k_way);
        std::vector<std::size_t> support_rows, query_rows, support_y, query_y;
        for (std::size_t ci = 0; ci < k_way; ++ci) {
            std::vector<std::size_t> pool = by_class[class_pick[ci]];
            rng.shuffle(pool);
            for (std::size_t i = 0; i < m_shot; ++i) {
                support_rows.push_back(pool[i]);
                support_y.push_back(ci);
            }
            for (std::size_t i = 0; i < kFewShotQueriesPerClass; ++i) {
                query_rows.push_back(pool[m_shot + i]);
                query_y.push_back(ci);
            }
        }
        const ProbeHead head = fit_probe(gather_feature_rows(features, support_rows), support_y,
                                         k_way, probe_epochs, probe_lr);
        const auto pred = probe_predict(head, gather_feature_rows(features, query_rows));
        std::size_t hits = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == query_y[i]) ++hits;
        res.per_episode.push_back(static_cast<double>(hits) / static_cast<double>(pred.size()));
    }
    double mean = 0.0;
    for (double a : res.per_episode) mean += a;
    mean /= static_cast<double>(res.per_episode.size());
    double var = 0.0;
    for (double a : res.per_episode) var += (a - mean) * (a - mean);
    res.mean = mean;
    res.stddev = res.per_episode.size() > 1
                     ? std::sqrt(var / static_cast<double>(res.per_episode.size() - 1))
                     : 0.0;
    return res;
}

inline FewShotResult few_shot_eval(Trainer& t, const Dataset& data, std::size_t k_way,
                                   std::size_t m_shot, std::size_t episodes, std::uint64_t seed) {
    return few_shot_eval(t.model(), data, t.config().pipeline(), k_way, m_shot, episodes, seed);
}

// ---------------------------------------------------------------------------
// Masked-reconstruction metric table
// ---------------------------------------------------------------------------

struct ReconRow {
    std::string name;
    std::size_t count = 0;
    double cd_l1_x1e3 = 0.0;
    double cd_l2_x1e3 = 0.0;
    double fscore_at_1pct = 0.0;
};

struct ReconTable {
    std::vector<ReconRow> rows;  // one per class plus a trailing average row
};

// Mask each test cloud at the configured ratio, reconstruct, assemble the
// predicted masked patches into world coordinates and score against the
// ground-truth masked points. CD values use the x10^3 convention.
inline ReconTable recon_eval(const Model& model, const Dataset& data, const PipelineConfig& pc,
                             std::uint64_t eval_seed = 0xeea1) {
    ReconTable table;
    std::vector<double> cd1(kNumShapeClasses, 0.0), cd2(kNumShapeClasses, 0.0),
        fs(kNumShapeClasses, 0.0);
    std::vector<std::size_t> counts(kNumShapeClasses, 0);
    const auto test_idx = data.indices_of(Split::Test);
    if (test_idx.empty()) throw InvalidArgument("recon_eval: dataset has no test split");
    for (auto idx : test_idx) {
        Rng rng = Rng::substream(eval_seed, idx);
        Graph g;
        TlrForward t = tlr_forward(g, model, data.clouds[idx], pc, rng, false);
        const Tensor& pred = g.value(t.pred);
        const std::size_t mask_count = t.part.masked_idx.size();
        const std::size_t k = pc.k_neighbors;
        std::vector<Vec3> pred_world, gt_world;
        pred_world.reserve(mask_count * k);
        gt_world.reserve(mask_count * k);
        for (std::size_t j = 0; j < mask_count; ++j) {
            const Vec3 center = t.patches.centers[t.part.masked_idx[j]];
            for (std::size_t i = 0; i < k; ++i) {
                pred_world.push_back(Vec3{pred.data[(j * k + i) * 3 + 0], pred.data[(j * k + i) * 3 + 1],
                                          pred.data[(j * k + i) * 3 + 2]} +
                                     center);
                gt_world.push_back(Vec3{t.gt.data[(j * k + i) * 3 + 0], t.gt.data[(j * k + i) * 3 + 1],
                                        t.gt.data[(j * k + i) * 3 + 2]} +
                                   center);
            }
        }
        const std::size_t cls = data.class_ids[idx];
        cd1[cls] += chamfer_l1(pred_world, gt_world) * 1e3;
        cd2[cls] += chamfer_l2(pred_world, gt_world) * 1e3;
        fs[cls] += fscore(pred_world, gt_world, 0.01);
        counts[cls] += 1;
    }
    double a1 = 0.0, a2 = 0.0, af = 0.0;
    std::size_t total = 0;
    for (std::size_t c = 0; c < kNumShapeClasses; ++c) {
        ReconRow row;
        row.name = shape_name(static_cast<ShapeKind>(c));
        row.count = counts[c];
        if (counts[c] > 0) {
            row.cd_l1_x1e3 = cd1[c] / static_cast<double>(counts[c]);
            row.cd_l2_x1e3 = cd2[c] / static_cast<double>(counts[c]);
            row.fscore_at_1pct = fs[c] / static_cast<double>(counts[c]);
        }
        a1 += cd1[c];
        a2 += cd2[c];
        af += fs[c];
        total += counts[c];
        table.rows.push_back(row);
    }
    ReconRow avg;
    avg.name = "avg";
    avg.count = total;
    if (total > 0) {
        avg.cd_l1_x1e3 = a1 / static_cast<double>(total);
        avg.cd_l2_x1e3 = a2 / static_cast<double>(total);
        avg.fscore_at_1pct = af / static_cast<double>(total);
    }
    table.rows.push_back(avg);
    return table;
}

inline ReconTable recon_eval(Trainer& t, const Dataset& data) {
    return recon_eval(t.model(), data, t.config().pipeline());
}

// ---------------------------------------------------------------------------
// Embedding dump
// ---------------------------------------------------------------------------

// One line per sample: class_id then the projected feature components,
// tab-separated. Deterministic bytes for a fixed checkpoint.
inline void embed_dump(const Model& model, const Dataset& data, const PipelineConfig& pc,
                       const std::string& path) {
    const Tensor z = extract_projected_features(model, data, pc);
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    char buf[40];
    for (std::size_t i = 0; i < data.size(); ++i) {
        f << data.class_ids[i];
        for (std::size_t j = 0; j < z.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", z.data[i * z.cols() + j]);
            f << '\t' << buf;
        }
        f << '\n';
    }
    if (!f) throw IoError("write failed: " + path);
}

inline void embed_dump(Trainer& t, const Dataset& data, const std::string& path) {
    embed_dump(t.model(), data, t.config().pipeline(), path);
}

}  // namespace mmpt
