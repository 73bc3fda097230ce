// Acceptance suite: one pass/fail line per criterion, non-zero exit when any
// criterion fails. Runs the kernel oracles, the gradient suite, pinned
// formula identities, masking exactness, the PLR leakage guard, the desk
// training-signal run, the multi-task monotone-benefit check, and the
// determinism/persistence contract.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "mmpt/checkpoint.hpp"
#include "mmpt/eval.hpp"
#include "mmpt/gradsuite.hpp"
#include "mmpt/mmpt.hpp"

using namespace mmpt;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %-24s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

PointCloud random_cloud(std::size_t n, Rng& rng) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i)
        c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    return c;
}

// --- independent oracles -----------------------------------------------------

std::vector<std::size_t> fps_oracle(const PointCloud& cloud, std::size_t m, std::size_t seed_index) {
    std::vector<std::size_t> picked{seed_index};
    while (picked.size() < m) {
        double best = -1.0;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < cloud.n(); ++i) {
            double dmin = std::numeric_limits<double>::infinity();
            for (auto j : picked) dmin = std::min(dmin, sqdist(cloud.points[i], cloud.points[j]));
            if (dmin > best) {
                best = dmin;
                best_i = i;
            }
        }
        picked.push_back(best_i);
    }
    return picked;
}

std::vector<std::size_t> knn_oracle(const PointCloud& cloud, std::size_t center, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < cloud.n(); ++i)
        all.emplace_back(sqdist(cloud.points[i], cloud.points[center]), i);
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
    return out;
}

double chamfer_l2_brute(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s1 = 0.0, s2 = 0.0;
    for (const auto& p : a) {
        double best = 1e300;
        for (const auto& q : b) best = std::min(best, (p - q).norm2());
        s1 += best;
    }
    for (const auto& q : b) {
        double best = 1e300;
        for (const auto& p : a) best = std::min(best, (q - p).norm2());
        s2 += best;
    }
    return s1 / a.size() + s2 / b.size();
}

double chamfer_l1_brute(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s1 = 0.0, s2 = 0.0;
    for (const auto& p : a) {
        double best = 1e300;
        for (const auto& q : b) best = std::min(best, (p - q).norm());
        s1 += best;
    }
    for (const auto& q : b) {
        double best = 1e300;
        for (const auto& p : a) best = std::min(best, (q - p).norm());
        s2 += best;
    }
    return 0.5 * (s1 / a.size() + s2 / b.size());
}

// --- criteria ----------------------------------------------------------------

void criterion_kernel_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::string why;

    Rng rng(4201);
    for (int trial = 0; trial < 200 && ok; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.below(63));
        const PointCloud c = random_cloud(n, rng);
        const std::size_t m = 1 + static_cast<std::size_t>(rng.below(n));
        const std::size_t seed = static_cast<std::size_t>(rng.below(n));
        if (farthest_point_sample(c, m, seed) != fps_oracle(c, m, seed)) {
            ok = false;
            why = "fps mismatch at trial " + std::to_string(trial);
        }
    }
    for (int trial = 0; trial < 200 && ok; ++trial) {
        const std::size_t n = 4 + static_cast<std::size_t>(rng.below(60));
        const PointCloud c = random_cloud(n, rng);
        const std::size_t k = 1 + static_cast<std::size_t>(rng.below(n));
        const std::size_t center = static_cast<std::size_t>(rng.below(n));
        const PatchSet ps = knn_group(c, {center}, k);
        const auto oracle = knn_oracle(c, center, k);
        for (std::size_t i = 0; i < k; ++i) {
            const Vec3 expect = c.points[oracle[i]] - c.points[center];
            if ((ps.patches[0][i] - expect).norm() != 0.0) {
                ok = false;
                why = "knn mismatch at trial " + std::to_string(trial);
                break;
            }
        }
    }
    double max_cd_err = 0.0;
    for (int trial = 0; trial < 100 && ok; ++trial) {
        std::vector<Vec3> a, b;
        const std::size_t na = 5 + rng.below(40), nb = 5 + rng.below(40);
        for (std::size_t i = 0; i < na; ++i) a.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        for (std::size_t i = 0; i < nb; ++i) b.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        max_cd_err = std::max(max_cd_err, std::fabs(chamfer_l2(a, b) - chamfer_l2_brute(a, b)));
        max_cd_err = std::max(max_cd_err, std::fabs(chamfer_l1(a, b) - chamfer_l1_brute(a, b)));
    }
    if (ok && max_cd_err >= 1e-12) {
        ok = false;
        why = "chamfer err " + std::to_string(max_cd_err);
    }
    const double dt = seconds_since(t0);
    if (ok && dt >= 30.0) {
        ok = false;
        why = "runtime " + std::to_string(dt) + "s over 30s budget";
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "fps/knn 200 trials each, chamfer max err %.2e, %.1fs", max_cd_err, dt);
    report("kernel-oracles", ok, ok ? buf : why);
}

void criterion_gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const GradSuiteResult suite = run_gradient_suite(1e-5, 1e-4);
    const double dt = seconds_since(t0);
    double worst = 0.0;
    std::string worst_name;
    for (const auto& e : suite.entries) {
        if (e.max_rel_err > worst) {
            worst = e.max_rel_err;
            worst_name = e.name;
        }
        if (!e.pass) std::printf("       gradient-suite detail: %s err %.3e\n", e.name.c_str(), e.max_rel_err);
    }
    bool ok = suite.all_pass;
    std::string why;
    if (ok && dt >= 60.0) {
        ok = false;
        why = "runtime over 60s budget";
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu checks, worst %s err %.2e (tol 1e-4), %.1fs",
                  suite.entries.size(), worst_name.c_str(), worst, dt);
    report("gradient-suite", ok, ok ? buf : why);
}

void criterion_formula_identities() {
    bool ok = true;
    std::string why;

    const double bce_half = query_bce({0.5}, {1.0});
    if (std::fabs(bce_half - std::log(2.0)) > 1e-9) {
        ok = false;
        why = "bce(0.5) != ln2";
    }

    Rng rng(4202);
    const Tensor q = Tensor::randn({3, 4}, rng);
    if (std::fabs(moco_loss(q, q, Tensor({0, 4}), 0.2)) > 1e-12) {
        ok = false;
        why = "moco with empty queue not zero";
    }

    // two-pair NT-Xent, tau=1: every direction is -log(e / (1 + e + 1));
    // the hand-derived value is log((2+e)/e)
    const Tensor z({2, 2}, {1, 0, 0, 1});
    const double hand = std::log((2.0 + M_E) / M_E);
    if (std::fabs(ntxent_intra(z, z, 1.0) - hand) > 1e-3) {
        ok = false;
        why = "ntxent two-pair value off";
    }

    std::vector<Vec3> cloud;
    for (int i = 0; i < 30; ++i) cloud.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    if (fscore(cloud, cloud, 0.01) != 1.0) {
        ok = false;
        why = "fscore identical clouds != 1";
    }

    double max_joint_err = 0.0;
    for (int t = 0; t < 100; ++t) {
        const double a = rng.uniform(0, 3), b = rng.uniform(0, 3), c = rng.uniform(0, 3);
        const double d = rng.uniform(0, 3), e = rng.uniform(0, 3);
        const LossWeights w{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)};
        const double expect = w.alpha * (a + b) + w.beta * c + w.w_contrast * (d + e);
        max_joint_err = std::max(max_joint_err, std::fabs(joint_loss(a, b, c, d, e, w) - expect));
    }
    if (max_joint_err > 1e-12) {
        ok = false;
        why = "joint decomposition err " + std::to_string(max_joint_err);
    }

    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "bce(0.5)=ln2, moco(K=0)=0, ntxent=log((2+e)/e)=%.4f, fscore=1, joint err %.1e",
                  hand, max_joint_err);
    report("formula-identities", ok, ok ? buf : why);
}

void criterion_masking_exactness() {
    bool ok = true;
    std::string why;

    // exact counts wherever round(gamma*M) leaves at least one visible patch
    const std::size_t ms[] = {3, 4, 5, 8, 10, 16, 25, 32, 40, 64, 100};
    const double gammas[] = {0.1, 0.25, 0.5, 0.75, 0.8, 0.9};
    Rng rng(4203);
    for (std::size_t m : ms)
        for (double gamma : gammas) {
            const std::size_t rounded =
                static_cast<std::size_t>(std::floor(gamma * static_cast<double>(m) + 0.5));
            if (rounded > m - 1) continue;  // capped cells are covered below
            const MaskPartition p = random_mask(m, gamma, rng);
            if (p.masked_idx.size() != rounded || p.masked_idx.size() + p.visible_idx.size() != m) {
                ok = false;
                why = "count mismatch at m=" + std::to_string(m) + " gamma=" + std::to_string(gamma);
            }
        }
    // the cap keeps one patch visible at extreme ratios
    {
        const MaskPartition p = random_mask(64, 0.999, rng);
        if (p.masked_idx.size() != 63) {
            ok = false;
            why = "cap at m-1 violated";
        }
    }

    // Monte Carlo uniformity at the paper ratio and others
    double worst_freq_dev = 0.0;
    const std::pair<std::size_t, double> mc_cells[] = {{5, 0.8}, {10, 0.8}, {32, 0.8}, {8, 0.5}};
    for (const auto& [m, gamma] : mc_cells) {
        std::vector<std::size_t> hits(m, 0);
        const std::size_t expect_count = mask_count(m, gamma);
        for (int d = 0; d < 10000; ++d) {
            const MaskPartition p = random_mask(m, gamma, rng);
            for (auto i : p.masked_idx) hits[i]++;
        }
        const double expect = static_cast<double>(expect_count) / static_cast<double>(m);
        for (auto h : hits)
            worst_freq_dev = std::max(worst_freq_dev, std::fabs(static_cast<double>(h) / 10000.0 - expect));
    }
    if (worst_freq_dev >= 0.02) {
        ok = false;
        why = "uniformity deviation " + std::to_string(worst_freq_dev);
    }

    char buf[128];
    std::snprintf(buf, sizeof(buf), "grid exact incl. gamma=0.8; MC dev %.4f < 0.02", worst_freq_dev);
    report("masking-exactness", ok, ok ? buf : why);
}

void criterion_leakage_guard() {
    bool ok = true;
    std::string why;
    ModelConfig mc;
    mc.bb.depth = 2;
    mc.bb.dim = 32;
    mc.bb.heads = 4;
    mc.bb.ffn_ratio = 2;
    mc.bb.decoder_depth = 1;
    mc.bb.drop_path = 0.1;
    mc.k_neighbors = 8;
    mc.proj_dim = 8;
    ModelState state;
    Rng init(4204);
    const Model model = Model::register_params(state, mc, init);

    Rng rng(4205);
    for (int trial = 0; trial < 20 && ok; ++trial) {
        const std::size_t n = 64 + rng.below(128);
        const PointCloud cloud = normalize_unit_sphere(random_cloud(n, rng));
        const std::size_t m = 8 + rng.below(8);
        const auto centers = farthest_point_sample(cloud, m, 0);
        const PatchSet patches = knn_group(cloud, centers, mc.k_neighbors);
        const MaskPartition part = random_mask(m, 0.8, rng);

        auto activations = [&](const PatchSet& ps) {
            Rng er(1000 + trial);
            Graph g;
            return g.value(plr_encode(g, model, ps, part, er, false).enc);
        };
        const Tensor base = activations(patches);
        PatchSet zeroed = patches;
        for (auto j : part.masked_idx) {
            zeroed.centers[j] = {0, 0, 0};
            for (auto& p : zeroed.patches[j]) p = {0, 0, 0};
        }
        if (!tensors_equal(base, activations(zeroed))) {
            ok = false;
            why = "activations differ at trial " + std::to_string(trial);
        }
    }
    report("leakage-guard", ok, ok ? "20 clouds, encoder activations bit-identical" : why);
}

Dataset transfer_eval_dataset() {
    // Distorted variants of the synthetic shapes: the probe has to rely on
    // distortion-robust features rather than raw canonical geometry.
    Dataset ds = build_dataset(30, 512, 0.08, 0.6, 0.1, 0.3, 777);
    AugmentSpec spec = AugmentSpec::identity();
    spec.rotation_max_angle = 0.8;
    spec.dropout_prob = 0.5;
    spec.elastic_granularity = 0.4;
    spec.elastic_magnitude = 0.25;
    spec.jitter_sigma = 0.04;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Rng r = Rng::substream(777 ^ 0xabcd, i);
        ds.clouds[i] = augment(ds.clouds[i], spec, r);
    }
    return ds;
}

void criterion_training_signal() {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig cfg = TrainConfig::desk();  // seed 42, weights 1:1:0.1
    Trainer trainer = Trainer::fresh(cfg);

    double first = 0.0, tail = 0.0;
    for (int s = 0; s < 200; ++s) {
        const auto e = trainer.step_once();
        if (s == 0) first = e.losses.joint;
        if (s >= 190) tail += e.losses.joint / 10.0;
    }
    const double ratio = tail / first;

    const Dataset eval_data = transfer_eval_dataset();
    const double probe = linear_probe(trainer, eval_data, cfg.probe_epochs);
    const FewShotResult fs = few_shot_eval(trainer, eval_data, 5, 10, 10, 2024);
    const double dt = seconds_since(t0);

    bool ok = true;
    std::string why;
    if (ratio > 0.5) {
        ok = false;
        why = "joint ratio " + std::to_string(ratio) + " > 0.5";
    } else if (probe < 0.9) {
        ok = false;
        why = "probe " + std::to_string(probe) + " < 0.9";
    } else if (fs.mean < 0.85) {
        ok = false;
        why = "fewshot " + std::to_string(fs.mean) + " < 0.85";
    } else if (dt >= 300.0) {
        ok = false;
        why = "runtime " + std::to_string(dt) + "s over 5min budget";
    }
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "joint %.2f->%.2f (ratio %.3f <= 0.5), probe %.3f >= 0.9, fewshot %.3f+/-%.3f >= 0.85, %.0fs",
                  first, tail, ratio, probe, fs.mean, fs.stddev, dt);
    report("training-signal", ok, ok ? buf : why);
}

void criterion_monotone_benefit() {
    const Dataset eval_data = transfer_eval_dataset();
    const std::size_t budget = 120;
    std::size_t ties = 0;
    bool ordered = true;
    std::string detail = "probe ";
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        TrainConfig tlr_cfg = TrainConfig::desk();
        tlr_cfg.seed = seed;
        tlr_cfg.max_steps = budget;
        tlr_cfg.enable_plr = false;
        tlr_cfg.enable_mcl = false;
        Trainer a = Trainer::fresh(tlr_cfg);
        a.run(budget);
        const double acc_tlr = linear_probe(a, eval_data, tlr_cfg.probe_epochs);

        TrainConfig full_cfg = TrainConfig::desk();
        full_cfg.seed = seed;
        full_cfg.max_steps = budget;
        Trainer b = Trainer::fresh(full_cfg);
        b.run(budget);
        const double acc_full = linear_probe(b, eval_data, full_cfg.probe_epochs);

        char buf[80];
        std::snprintf(buf, sizeof(buf), "[seed %llu: tlr %.3f vs full %.3f] ",
                      static_cast<unsigned long long>(seed), acc_tlr, acc_full);
        detail += buf;
        if (acc_tlr > acc_full) ordered = false;
        if (acc_tlr == acc_full) ++ties;
    }
    const bool ok = ordered && ties <= 1;
    report("monotone-benefit", ok, detail + (ordered ? "" : "ordering violated ") +
                                       (ties > 1 ? "too many ties" : ""));
}

void criterion_determinism_persistence() {
    namespace fs = std::filesystem;
    bool ok = true;
    std::string why;

    TrainConfig cfg = TrainConfig::desk();
    cfg.max_steps = 30;
    cfg.per_class = 4;
    cfg.n_points = 128;
    cfg.m_groups = 16;
    cfg.k_neighbors = 8;
    cfg.batch_size = 2;
    cfg.depth = 2;
    cfg.dim = 32;
    cfg.queue_capacity = 8;

    {  // bit-identical re-runs
        Trainer a = Trainer::fresh(cfg);
        Trainer b = Trainer::fresh(cfg);
        const auto ea = a.run(5);
        const auto eb = b.run(5);
        for (std::size_t i = 0; i < ea.size() && ok; ++i)
            if (ea[i].losses.joint != eb[i].losses.joint) {
                ok = false;
                why = "loss curves differ between identical runs";
            }
        const auto pa = a.state().params();
        const auto pb = b.state().params();
        for (std::size_t i = 0; i < pa.size() && ok; ++i)
            if (pa[i]->value.data != pb[i]->value.data) {
                ok = false;
                why = "parameters differ between identical runs";
            }
    }

    if (ok) {  // checkpoint continuation over 10 steps
        const std::string path = (fs::temp_directory_path() / "mmpt_acceptance.mmck").string();
        Trainer reference = Trainer::fresh(cfg);
        reference.run(5);
        save_checkpoint(reference, path);
        const auto tail_ref = reference.run(15);

        Trainer resumed = load_checkpoint(path);
        const auto tail_new = resumed.run(15);
        if (tail_ref.size() != tail_new.size()) {
            ok = false;
            why = "resumed run length mismatch";
        }
        for (std::size_t i = 0; i < tail_ref.size() && ok; ++i)
            if (tail_ref[i].losses.joint != tail_new[i].losses.joint ||
                tail_ref[i].losses.moco != tail_new[i].losses.moco) {
                ok = false;
                why = "resumed losses diverge at step " + std::to_string(i + 6);
            }
        const auto pa = reference.state().params();
        const auto pb = resumed.state().params();
        for (std::size_t i = 0; i < pa.size() && ok; ++i)
            if (pa[i]->value.data != pb[i]->value.data) {
                ok = false;
                why = "resumed parameters diverge";
            }
    }
    report("determinism-persistence", ok,
           ok ? "re-runs bit-identical; save/load/continue matches 10 steps exactly" : why);
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    criterion_kernel_oracles();
    criterion_gradient_suite();
    criterion_formula_identities();
    criterion_masking_exactness();
    criterion_leakage_guard();
    criterion_training_signal();
    criterion_monotone_benefit();
    criterion_determinism_persistence();
    std::printf("%d/8 criteria passed in %.0fs\n", 8 - g_failures, seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
