#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmpt/backbone.hpp"
#include "mmpt/losses.hpp"
#include "mmpt/synthetic.hpp"
#include "mmpt/tasks.hpp"

namespace mmpt {

struct GradSuiteEntry {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

struct GradSuiteResult {
    std::vector<GradSuiteEntry> entries;
    bool all_pass = true;

    void add(const std::string& name, const GradCheckReport& report, double tol) {
        GradSuiteEntry e{name, report.max_rel_err, tol, report.max_rel_err < tol};
        all_pass = all_pass && e.pass;
        entries.push_back(e);
    }
};

namespace gradsuite_detail {

inline ModelConfig toy_model_config() {
    ModelConfig mc;
    mc.bb.depth = 1;
    mc.bb.dim = 8;
    mc.bb.heads = 2;
    mc.bb.ffn_ratio = 2;
    mc.bb.decoder_depth = 1;
    mc.bb.drop_path = 0.0;
    mc.k_neighbors = 4;
    mc.proj_dim = 8;
    mc.conv_c1 = 2;
    mc.conv_c2 = 3;
    mc.conv_c3 = 4;
    return mc;
}

inline PipelineConfig toy_pipeline(std::size_t m_groups) {
    PipelineConfig pc;
    pc.m_groups = m_groups;
    pc.k_neighbors = 4;
    pc.mask_ratio = 0.5;
    pc.n_real = 4;
    pc.n_fake = 4;
    pc.n_views = 1;
    pc.view_res = 8;
    pc.tau = 0.5;
    pc.aug.scale_lo = 0.9;
    pc.aug.scale_hi = 1.1;
    pc.aug.rotation_max_angle = 0.5;
    pc.aug.translation_range = 0.05;
    return pc;
}

inline PointCloud toy_cloud(std::uint64_t seed, std::size_t n = 32) {
    Rng rng = Rng::substream(seed, 99);
    return generate_shape(ShapeSpec{ShapeKind::Torus, std::max<std::size_t>(n, 32), 0.02}, rng);
}

inline std::vector<Param*> select_params(ModelState& s,
                                         const std::vector<std::string>& prefixes) {
    std::vector<Param*> out;
    for (Param* p : s.params())
        for (const auto& pre : prefixes)
            if (p->name.rfind(pre, 0) == 0) {
                out.push_back(p);
                break;
            }
    return out;
}

}  // namespace gradsuite_detail

// Loss-operation and end-to-end task gradient checks against central finite
// differences on toy instances. Every expected/tolerance pair here is pinned;
// the acceptance suite reruns the same list.
inline GradSuiteResult run_gradient_suite(double h = 1e-5, double tol = 1e-4) {
    using namespace gradsuite_detail;
    GradSuiteResult result;

    {  // chamfer_l2
        Rng rng(11);
        Param pred("pred", Tensor::randn({5, 3}, rng));
        const Tensor gt = Tensor::randn({7, 3}, rng);
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::chamfer_l2(g, g.param(pred), g.constant(gt));
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("chamfer_l2", grad_check({&pred}, run, h, tol), tol);
    }
    {  // chamfer_l1
        Rng rng(12);
        Param pred("pred", Tensor::randn({5, 3}, rng));
        const Tensor gt = Tensor::randn({6, 3}, rng);
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::chamfer_l1(g, g.param(pred), g.constant(gt));
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("chamfer_l1", grad_check({&pred}, run, h, tol), tol);
    }
    {  // query_bce through sigmoid logits
        Rng rng(13);
        Param logits("logits", Tensor::randn({8, 1}, rng));
        Tensor labels({8, 1});
        for (std::size_t i = 0; i < 8; ++i) labels.data[i] = i % 2 ? 1.0 : 0.0;
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::query_bce(g, g.sigmoid(g.param(logits)), g.constant(labels));
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("query_bce", grad_check({&logits}, run, h, tol), tol);
    }
    {  // ntxent_intra
        Rng rng(14);
        Param z("z", Tensor::randn({3, 4}, rng));
        Param s("s", Tensor::randn({3, 4}, rng));
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::ntxent_intra(g, g.param(z), g.param(s), 0.5);
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("ntxent_intra", grad_check({&z, &s}, run, h, tol), tol);
    }
    {  // ntxent_cross
        Rng rng(15);
        Param s("s", Tensor::randn({4, 5}, rng));
        Param z2("z2", Tensor::randn({4, 5}, rng));
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::ntxent_cross(g, g.param(s), g.param(z2), 0.3);
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("ntxent_cross", grad_check({&s, &z2}, run, h, tol), tol);
    }
    {  // moco_loss
        Rng rng(16);
        Param q("q", Tensor::randn({3, 4}, rng));
        const Tensor keys = Tensor::randn({3, 4}, rng);
        const Tensor queue = Tensor::randn({5, 4}, rng);
        auto run = [&](bool with_grad) {
            Graph g;
            Var loss = lossops::moco_loss(g, g.param(q), g.constant(keys), g.constant(queue), 0.4);
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("moco_loss", grad_check({&q}, run, h, tol), tol);
    }
    {  // joint weighting over parameterized terms
        Rng rng(17);
        Param a("a", Tensor::randn({2, 3}, rng));
        auto run = [&](bool with_grad) {
            Graph g;
            Var x = g.param(a);
            Var sq = g.mean_all(g.mul(x, x));
            Var ab = g.mean_all(x);
            Var loss = lossops::joint(g, sq, ab, sq, ab, sq, LossWeights{1.0, 1.0, 0.1});
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        result.add("joint_loss", grad_check({&a}, run, h, tol), tol);
    }

    // --- end-to-end task losses on a toy backbone ---------------------------

    {  // TLR, 4 groups
        ModelState state;
        Rng init = Rng::substream(21, 0);
        Model model = Model::register_params(state, toy_model_config(), init);
        const PointCloud cloud = toy_cloud(21);
        const PipelineConfig pc = toy_pipeline(4);
        auto run = [&](bool with_grad) {
            Rng rng = Rng::substream(22, 0);
            Graph g;
            TlrForward t = tlr_forward(g, model, cloud, pc, rng, false);
            if (with_grad) g.backward(t.cd_loss);
            return g.value(t.cd_loss).item();
        };
        auto params = select_params(state, {"embed.", "pos.", "enc.", "dec.", "rec_head."});
        result.add("tlr_end_to_end", grad_check(params, run, h, tol), tol);
    }
    {  // TLR on 2 patches (1 visible, 1 masked)
        ModelState state;
        Rng init = Rng::substream(23, 0);
        Model model = Model::register_params(state, toy_model_config(), init);
        const PointCloud cloud = toy_cloud(23);
        const PipelineConfig pc = toy_pipeline(2);
        auto run = [&](bool with_grad) {
            Rng rng = Rng::substream(24, 0);
            Graph g;
            TlrForward t = tlr_forward(g, model, cloud, pc, rng, false);
            if (with_grad) g.backward(t.cd_loss);
            return g.value(t.cd_loss).item();
        };
        auto params = select_params(state, {"embed.", "pos.", "enc.", "dec.", "rec_head."});
        result.add("tlr_two_patches", grad_check(params, run, h, tol), tol);
    }
    {  // PLR
        ModelState state;
        Rng init = Rng::substream(25, 0);
        Model model = Model::register_params(state, toy_model_config(), init);
        const PointCloud cloud = toy_cloud(25);
        const PipelineConfig pc = toy_pipeline(4);
        auto run = [&](bool with_grad) {
            Rng rng = Rng::substream(26, 0);
            Graph g;
            PlrForward p = plr_forward(g, model, cloud, pc, rng, false);
            if (with_grad) g.backward(p.bce);
            return g.value(p.bce).item();
        };
        auto params = select_params(state, {"embed.", "pos.", "cls.", "enc.", "plr."});
        result.add("plr_end_to_end", grad_check(params, run, h, tol), tol);
    }
    {  // MCL with N=3 pairs: iml + cml over the batch
        ModelState state;
        Rng init = Rng::substream(27, 0);
        Model model = Model::register_params(state, toy_model_config(), init);
        std::vector<PointCloud> clouds{toy_cloud(31), toy_cloud(32), toy_cloud(33)};
        const PipelineConfig pc = toy_pipeline(4);
        auto run = [&](bool with_grad) {
            Rng rng = Rng::substream(28, 0);
            Graph g;
            std::vector<Var> z3s, s3s, z2s;
            for (const auto& c : clouds) {
                MclForward m = mcl_forward(g, model, c, pc, rng, false);
                z3s.push_back(m.z3d);
                s3s.push_back(m.s3d);
                z2s.push_back(m.z2d);
            }
            Var z3 = g.concat_rows(z3s);
            Var s3 = g.concat_rows(s3s);
            Var z2 = g.concat_rows(z2s);
            Var loss = g.add(lossops::ntxent_intra(g, z3, s3, pc.tau),
                             lossops::ntxent_cross(g, s3, z2, pc.tau));
            if (with_grad) g.backward(loss);
            return g.value(loss).item();
        };
        auto params =
            select_params(state, {"embed.", "pos.", "cls.", "enc.", "s3d.", "g3d.", "img.", "g2d."});
        result.add("mcl_end_to_end", grad_check(params, run, h, tol), tol);
    }

    return result;
}

}  // namespace mmpt
