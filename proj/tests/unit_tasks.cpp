#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "mmpt/optim.hpp"
#include "mmpt/synthetic.hpp"
#include "mmpt/tasks.hpp"

using namespace mmpt;

namespace {

ModelConfig small_config() {
    ModelConfig mc;
    mc.bb.depth = 2;
    mc.bb.dim = 16;
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

PipelineConfig small_pipeline() {
    PipelineConfig pc;
    pc.m_groups = 8;
    pc.k_neighbors = 4;
    pc.mask_ratio = 0.5;
    pc.n_real = 4;
    pc.n_fake = 4;
    pc.n_views = 1;
    pc.view_res = 8;
    pc.tau = 0.5;
    return pc;
}

PointCloud test_cloud(std::uint64_t seed, std::size_t n = 64) {
    Rng rng(seed);
    return generate_shape({ShapeKind::Cylinder, n, 0.01}, rng);
}

}  // namespace

TEST_CASE("tlr_forward produces matching prediction and target shapes") {
    ModelState state;
    Rng rng(101);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(102);
    PipelineConfig pc = small_pipeline();
    pc.mask_ratio = 0.8;
    Rng r(103);
    Graph g;
    TlrForward t = tlr_forward(g, m, cloud, pc, r, false);
    const std::size_t expect = mask_count(pc.m_groups, pc.mask_ratio);
    REQUIRE(expect == 6);  // round(0.8 * 8)
    REQUIRE(g.value(t.pred).shape == Shape{expect, 4, 3});
    REQUIRE(t.gt.shape == Shape{expect, 4, 3});
}

TEST_CASE("mask arithmetic at extreme ratios") {
    REQUIRE(mask_count(64, 0.999) == 63);  // capped so one patch stays visible
    REQUIRE(mask_count(64, 0.8) == 51);    // round(51.2)
    REQUIRE(mask_count(10, 0.8) == 8);
    REQUIRE(mask_count(1, 0.8) == 0);
}

TEST_CASE("tlr_forward is bit-deterministic under a fixed seed") {
    ModelState state;
    Rng rng(104);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(105);
    const PipelineConfig pc = small_pipeline();
    auto run = [&] {
        Rng r(106);
        Graph g;
        TlrForward t = tlr_forward(g, m, cloud, pc, r, true);
        return g.value(t.pred);
    };
    REQUIRE(tensors_equal(run(), run()));
}

TEST_CASE("sample_queries labels and counts") {
    const PointCloud cloud = test_cloud(107);
    const auto centers = farthest_point_sample(cloud, 8, 0);
    const PatchSet patches = knn_group(cloud, centers, 4);
    Rng mr(108);
    const MaskPartition part = random_mask(8, 0.5, mr);

    Rng qr(109);
    const QueryBatch qb = sample_queries(patches, part, 4, 4, qr);
    REQUIRE(qb.coords.rows() == 8);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(qb.labels.data[i] == 1.0);
    for (std::size_t i = 4; i < 8; ++i) REQUIRE(qb.labels.data[i] == 0.0);

    Rng qr2(110);
    const QueryBatch all_real = sample_queries(patches, part, 6, 0, qr2);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(all_real.labels.data[i] == 1.0);
}

TEST_CASE("real queries coincide with masked-group points in world coordinates") {
    const PointCloud cloud = test_cloud(111);
    const auto centers = farthest_point_sample(cloud, 8, 0);
    const PatchSet patches = knn_group(cloud, centers, 4);
    Rng mr(112);
    const MaskPartition part = random_mask(8, 0.5, mr);
    Rng qr(113);
    const QueryBatch qb = sample_queries(patches, part, 8, 0, qr);
    for (std::size_t q = 0; q < 8; ++q) {
        const Vec3 query{qb.coords.at(q, 0), qb.coords.at(q, 1), qb.coords.at(q, 2)};
        double best = 1e300;
        for (auto j : part.masked_idx)
            for (const auto& p : patches.patches[j])
                best = std::min(best, (p + patches.centers[j] - query).norm());
        REQUIRE(best < 1e-9);
    }
}

TEST_CASE("fake queries fill the inflated bounding box uniformly") {
    const PointCloud cloud = test_cloud(114, 128);
    const auto centers = farthest_point_sample(cloud, 16, 0);
    const PatchSet patches = knn_group(cloud, centers, 8);
    Rng mr(115);
    const MaskPartition part = random_mask(16, 0.5, mr);

    Vec3 lo = patches.centers[0] + patches.patches[0][0], hi = lo;
    for (std::size_t j = 0; j < patches.m(); ++j)
        for (const auto& p : patches.patches[j]) {
            const Vec3 w = p + patches.centers[j];
            lo = {std::min(lo.x, w.x), std::min(lo.y, w.y), std::min(lo.z, w.z)};
            hi = {std::max(hi.x, w.x), std::max(hi.y, w.y), std::max(hi.z, w.z)};
        }
    const Vec3 mid = (lo + hi) * 0.5;
    const Vec3 half = (hi - lo) * (0.5 * 1.1);

    Rng qr(116);
    const std::size_t draws = 10000;
    std::vector<double> xs;
    xs.reserve(draws);
    const QueryBatch qb = sample_queries(patches, part, 1, draws, qr);
    for (std::size_t i = 1; i <= draws; ++i) {
        for (int a = 0; a < 3; ++a) {
            const double v = qb.coords.data[i * 3 + a];
            const double lo_a = (&mid.x)[a] - (&half.x)[a];
            const double hi_a = (&mid.x)[a] + (&half.x)[a];
            REQUIRE(v >= lo_a);
            REQUIRE(v <= hi_a);
        }
        xs.push_back((qb.coords.data[i * 3] - (mid.x - half.x)) / (2 * half.x));
    }
    // one-sample KS statistic against U[0,1] on the x axis
    std::sort(xs.begin(), xs.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double cdf = static_cast<double>(i + 1) / xs.size();
        ks = std::max(ks, std::fabs(cdf - xs[i]));
        ks = std::max(ks, std::fabs(xs[i] - static_cast<double>(i) / xs.size()));
    }
    REQUIRE(ks < 0.02);
}

TEST_CASE("sample_queries validates its preconditions") {
    const PointCloud cloud = test_cloud(117);
    const auto centers = farthest_point_sample(cloud, 8, 0);
    const PatchSet patches = knn_group(cloud, centers, 4);
    MaskPartition empty;
    empty.visible_idx = {0, 1, 2, 3, 4, 5, 6, 7};
    Rng qr(118);
    REQUIRE_THROWS_AS(sample_queries(patches, empty, 1, 1, qr), InvalidState);

    Rng mr(119);
    const MaskPartition part = random_mask(8, 0.5, mr);
    REQUIRE_THROWS_AS(sample_queries(patches, part, 999, 0, qr), InvalidArgument);
}

TEST_CASE("plr_forward emits one logit per query") {
    ModelState state;
    Rng rng(120);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(121);
    const PipelineConfig pc = small_pipeline();
    Rng r(122);
    Graph g;
    PlrForward p = plr_forward(g, m, cloud, pc, r, false);
    REQUIRE(g.value(p.logits).shape == Shape{8, 1});
    REQUIRE(g.value(p.s3d).shape == Shape{1, 8});
}

TEST_CASE("duplicated queries produce identical logits") {
    ModelState state;
    Rng rng(123);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(124);
    const PipelineConfig pc = small_pipeline();

    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    Rng mr(125);
    MaskPartition part = random_mask(pc.m_groups, pc.mask_ratio, mr);
    Rng qr(126);
    QueryBatch qb = sample_queries(patches, part, 2, 2, qr);
    // duplicate query row 1 into row 3
    for (int a = 0; a < 3; ++a) qb.coords.at(3, a) = qb.coords.at(1, a);
    qb.labels.data[3] = qb.labels.data[1];

    Rng fr(127);
    Graph g;
    PlrForward p = plr_forward_with_queries(g, m, patches, part, qb, fr, false);
    REQUIRE(g.value(p.logits).at(1, 0) == g.value(p.logits).at(3, 0));
}

TEST_CASE("masked coordinates never reach the PLR encoder") {
    ModelState state;
    Rng rng(128);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(129);
    const PipelineConfig pc = small_pipeline();

    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    Rng mr(130);
    const MaskPartition part = random_mask(pc.m_groups, pc.mask_ratio, mr);

    auto encoder_activations = [&](const PatchSet& ps) {
        Rng er(131);
        Graph g;
        PlrEncode pe = plr_encode(g, m, ps, part, er, false);
        return g.value(pe.enc);
    };
    const Tensor base = encoder_activations(patches);

    PatchSet zeroed = patches;
    for (auto j : part.masked_idx) {
        zeroed.centers[j] = {0, 0, 0};
        for (auto& p : zeroed.patches[j]) p = {0, 0, 0};
    }
    const Tensor z = encoder_activations(zeroed);
    REQUIRE(tensors_equal(base, z));
}

TEST_CASE("render_views puts a single origin point in the center pixel") {
    PointCloud c(std::vector<Vec3>{{0, 0, 0}});
    Rng rng(132);
    const auto views = render_views(c, 1, 8, 8, rng);
    REQUIRE(views.size() == 1);
    std::size_t non_background = 0;
    for (std::size_t row = 0; row < 8; ++row)
        for (std::size_t col = 0; col < 8; ++col) {
            const double v = views[0].data[row * 8 + col];
            if (v != 1.0) {
                ++non_background;
                REQUIRE(row == 4);
                REQUIRE(col == 4);
                REQUIRE(v == Catch::Approx(0.5));
            }
        }
    REQUIRE(non_background == 1);
}

TEST_CASE("render_views background and coverage behave") {
    Rng srng(133);
    const PointCloud sphere = generate_shape({ShapeKind::Sphere, 512, 0.0}, srng);
    Rng rng(134);
    for (int trial = 0; trial < 5; ++trial) {
        const auto views = render_views(sphere, 1, 32, 32, rng);
        std::size_t covered = 0;
        for (double v : views[0].data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
            if (v != 1.0) ++covered;
        }
        const double frac = static_cast<double>(covered) / 1024.0;
        REQUIRE(frac > 0.3);
        REQUIRE(frac < 0.9);
    }
    REQUIRE_THROWS_AS(render_views(sphere, 1, 4, 4, rng), InvalidArgument);
}

TEST_CASE("mcl projections collapse for identity augmentations") {
    ModelState state;
    Rng rng(135);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(136);
    PipelineConfig pc = small_pipeline();
    pc.aug = AugmentSpec::identity();

    Rng r(137);
    const PointCloud v1 = augment(cloud, pc.aug, r);
    const PointCloud v2 = augment(cloud, pc.aug, r);
    Graph g;
    Rng er(138);
    Var z1 = m.g3d.apply(g, f3d_global(g, m, v1, pc, er, false));
    Var z2 = m.g3d.apply(g, f3d_global(g, m, v2, pc, er, false));
    Var z3d = mcl_project_views(g, m, v1, v2, pc, er, false);
    REQUIRE(tensors_equal(g.value(z1), g.value(z2)));
    REQUIRE(tensors_equal(g.value(z1), g.value(z3d)));
}

TEST_CASE("z3d is invariant under view exchange") {
    ModelState state;
    Rng rng(139);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(140);
    PipelineConfig pc = small_pipeline();
    pc.aug.scale_lo = 0.8;
    pc.aug.scale_hi = 1.2;
    pc.aug.rotation_max_angle = 1.0;

    Rng ar(141);
    const PointCloud v1 = augment(cloud, pc.aug, ar);
    const PointCloud v2 = augment(cloud, pc.aug, ar);
    Graph g;
    Rng er(142);
    Var a = mcl_project_views(g, m, v1, v2, pc, er, false);
    Var b = mcl_project_views(g, m, v2, v1, pc, er, false);
    REQUIRE(tensors_equal(g.value(a), g.value(b)));
}

TEST_CASE("identical views average to the single-view projection") {
    ModelState state;
    Rng rng(143);
    const Model m = Model::register_params(state, small_config(), rng);
    const PointCloud cloud = test_cloud(144);
    Rng vr(145);
    const auto one = render_views(cloud, 1, 8, 8, vr);
    const std::vector<Tensor> three{one[0], one[0], one[0]};
    Graph g;
    Var single = mcl_project_images(g, m, one);
    Var averaged = mcl_project_images(g, m, three);
    REQUIRE(max_abs_diff(g.value(single), g.value(averaged)) < 1e-15);
}

TEST_CASE("momentum keys track the query weights and cycle the queue") {
    ModelState state;
    Rng rng(146);
    const Model m = Model::register_params(state, small_config(), rng);
    MomentumKeys keys = MomentumKeys::init(state, small_config(), 0.5, 3);
    const double before = keys.key_state.get("cls.token").value.data[0];
    state.get("cls.token").value.data[0] = before + 1.0;
    keys.ema_update(state);
    REQUIRE(keys.key_state.get("cls.token").value.data[0] ==
            Catch::Approx(before + 0.5));

    Tensor row({1, 8});
    for (int i = 0; i < 5; ++i) {
        row.fill(static_cast<double>(i + 1));
        keys.push(row);
    }
    REQUIRE(keys.fill == 3);
    const Tensor snap = keys.snapshot();
    REQUIRE(snap.rows() == 3);
}

TEST_CASE("plr overfits a single cloud to high query accuracy") {
    ModelConfig mc = small_config();
    mc.bb.dim = 32;
    mc.k_neighbors = 8;
    ModelState state;
    Rng rng(147);
    const Model m = Model::register_params(state, mc, rng);
    Rng crng(148);
    const PointCloud cloud = generate_shape({ShapeKind::Cube, 256, 0.01}, crng);
    PipelineConfig pc = small_pipeline();
    pc.m_groups = 16;
    pc.k_neighbors = 8;
    pc.n_real = 16;
    pc.n_fake = 16;

    // one fixed cloud, one fixed grouping/mask/query draw
    const auto centers = farthest_point_sample(cloud, pc.m_groups, 0);
    PatchSet patches = knn_group(cloud, centers, pc.k_neighbors);
    Rng fixed(149);
    MaskPartition part = random_mask(pc.m_groups, pc.mask_ratio, fixed);
    QueryBatch qb = sample_queries(patches, part, pc.n_real, pc.n_fake, fixed);

    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    auto params = state.params();
    opt.init(params);
    double accuracy = 0.0;
    for (int step = 0; step < 300; ++step) {
        Rng r(1234);
        Graph g;
        PlrForward p = plr_forward_with_queries(g, m, patches, part, qb, r, false);
        state.zero_grads();
        g.backward(p.bce);
        opt.step(params, 1e-3);
        if (step == 299) {
            const Tensor& probs = g.value(p.probs);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < probs.rows(); ++i)
                if ((probs.data[i] > 0.5) == (p.queries.labels.data[i] > 0.5)) ++hits;
            accuracy = static_cast<double>(hits) / static_cast<double>(probs.rows());
        }
    }
    REQUIRE(accuracy > 0.9);
}
