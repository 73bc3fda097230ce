#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mmpt/losses.hpp"

using namespace mmpt;

namespace {

std::vector<Vec3> random_points(std::size_t n, Rng& rng, double spread = 1.0) {
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back({rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                       rng.uniform(-spread, spread)});
    return out;
}

// Independent O(n*m) accumulation written directly from the displayed
// formulas, kept separate from the library implementations.
double chamfer_l2_brute(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s1 = 0.0;
    for (const auto& p : a) {
        double best = 1e300;
        for (const auto& q : b) best = std::min(best, (p - q).norm2());
        s1 += best;
    }
    double s2 = 0.0;
    for (const auto& q : b) {
        double best = 1e300;
        for (const auto& p : a) best = std::min(best, (q - p).norm2());
        s2 += best;
    }
    return s1 / a.size() + s2 / b.size();
}

double chamfer_l1_brute(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s1 = 0.0;
    for (const auto& p : a) {
        double best = 1e300;
        for (const auto& q : b) best = std::min(best, (p - q).norm());
        s1 += best;
    }
    double s2 = 0.0;
    for (const auto& q : b) {
        double best = 1e300;
        for (const auto& p : a) best = std::min(best, (q - p).norm());
        s2 += best;
    }
    return 0.5 * (s1 / a.size() + s2 / b.size());
}

Tensor points_tensor(const std::vector<Vec3>& pts) {
    Tensor t({pts.size(), 3});
    for (std::size_t i = 0; i < pts.size(); ++i) {
        t.data[i * 3 + 0] = pts[i].x;
        t.data[i * 3 + 1] = pts[i].y;
        t.data[i * 3 + 2] = pts[i].z;
    }
    return t;
}

// d x d rotation from QR-style Gram-Schmidt on a random matrix.
Tensor random_orthogonal(std::size_t d, Rng& rng) {
    Tensor q = Tensor::randn({d, d}, rng);
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t prev = 0; prev < c; ++prev) {
            double dot = 0.0;
            for (std::size_t r = 0; r < d; ++r) dot += q.at(r, c) * q.at(r, prev);
            for (std::size_t r = 0; r < d; ++r) q.at(r, c) -= dot * q.at(r, prev);
        }
        double nrm = 0.0;
        for (std::size_t r = 0; r < d; ++r) nrm += q.at(r, c) * q.at(r, c);
        nrm = std::sqrt(nrm);
        for (std::size_t r = 0; r < d; ++r) q.at(r, c) /= nrm;
    }
    return q;
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k)
            for (std::size_t j = 0; j < b.cols(); ++j)
                out.at(i, j) += a.at(i, k) * b.at(k, j);
    return out;
}

}  // namespace

TEST_CASE("chamfer distances on pinned examples") {
    const std::vector<Vec3> x{{0, 0, 0}};
    const std::vector<Vec3> y{{1, 0, 0}};
    REQUIRE(chamfer_l2(x, x) == 0.0);
    REQUIRE(chamfer_l2(x, y) == Catch::Approx(2.0));
    REQUIRE(chamfer_l1(x, x) == 0.0);
    REQUIRE(chamfer_l1(x, y) == Catch::Approx(1.0));
    REQUIRE_THROWS_AS(chamfer_l2(x, std::vector<Vec3>{}), InvalidArgument);
}

TEST_CASE("chamfer matches the brute-force oracle on random pairs") {
    Rng rng(31);
    for (int t = 0; t < 25; ++t) {
        const auto a = random_points(20, rng);
        const auto b = random_points(30, rng);
        REQUIRE(std::fabs(chamfer_l2(a, b) - chamfer_l2_brute(a, b)) < 1e-12);
        REQUIRE(std::fabs(chamfer_l1(a, b) - chamfer_l1_brute(a, b)) < 1e-12);
        REQUIRE(chamfer_l2(a, b) == chamfer_l2(b, a));
    }
}

TEST_CASE("differentiable chamfer agrees with the numeric version") {
    Rng rng(32);
    for (int t = 0; t < 10; ++t) {
        const auto a = random_points(8, rng);
        const auto b = random_points(11, rng);
        Graph g;
        const double l2 =
            g.value(lossops::chamfer_l2(g, g.constant(points_tensor(a)), g.constant(points_tensor(b)))).item();
        const double l1 =
            g.value(lossops::chamfer_l1(g, g.constant(points_tensor(a)), g.constant(points_tensor(b)))).item();
        REQUIRE(l2 == Catch::Approx(chamfer_l2(a, b)).margin(1e-10));
        REQUIRE(l1 == Catch::Approx(chamfer_l1(a, b)).margin(1e-8));
    }
}

TEST_CASE("fscore on pinned examples") {
    Rng rng(33);
    const auto cloud = random_points(40, rng);
    REQUIRE(fscore(cloud, cloud, 0.01) == 1.0);

    auto far = cloud;
    for (auto& p : far) p += Vec3{1.0, 0, 0};  // 100x the threshold
    REQUIRE(fscore(cloud, far, 0.01) == 0.0);

    // pred = gt plus an equal count of far outliers: P=0.5, R=1, F=2/3
    auto pred = cloud;
    for (const auto& p : cloud) pred.push_back(p + Vec3{5, 5, 5});
    REQUIRE(fscore(pred, cloud, 0.01) == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("fscore is monotone in the threshold") {
    Rng rng(34);
    const auto a = random_points(25, rng);
    const auto b = random_points(25, rng);
    double prev = -1.0;
    for (double t : {0.01, 0.05, 0.1, 0.3, 0.6, 1.2, 2.5, 5.0}) {
        const double f = fscore(a, b, t);
        REQUIRE(f >= prev);
        prev = f;
    }
}

TEST_CASE("query_bce on pinned examples") {
    REQUIRE(query_bce({0.5, 0.5, 0.5}, {1, 0, 1}) == Catch::Approx(std::log(2.0)).margin(1e-9));
    REQUIRE(query_bce({1.0, 0.0}, {1, 0}) < 1e-6);  // exact prediction after clamping
    Rng rng(35);
    // direct summation oracle
    for (int t = 0; t < 10; ++t) {
        std::vector<double> p, l;
        for (int i = 0; i < 12; ++i) {
            p.push_back(rng.uniform(0.01, 0.99));
            l.push_back(rng.below(2) ? 1.0 : 0.0);
        }
        double expect = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            expect += -(l[i] * std::log(p[i]) + (1 - l[i]) * std::log(1 - p[i]));
        expect /= static_cast<double>(p.size());
        REQUIRE(query_bce(p, l) == Catch::Approx(expect).margin(1e-12));
    }
    REQUIRE_THROWS_AS(query_bce({0.5}, {1, 0}), ShapeError);
}

TEST_CASE("ntxent matches the hand-derived two-pair value") {
    // z = s = ((1,0),(0,1)), tau = 1. Every direction evaluates to
    //   -log(e / (1 + e + 1)) = log((2+e)/e)
    // by summing the three denominator terms of the displayed loss.
    const Tensor z({2, 2}, {1, 0, 0, 1});
    const double expect = std::log((2.0 + M_E) / M_E);
    REQUIRE(ntxent_intra(z, z, 1.0) == Catch::Approx(expect).margin(1e-12));
    // formula symmetry: the cross-modal loss is the same function
    REQUIRE(ntxent_cross(z, z, 1.0) == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("ntxent is scale-invariant thanks to internal normalization") {
    Rng rng(36);
    const Tensor z = Tensor::randn({4, 6}, rng);
    const Tensor s = Tensor::randn({4, 6}, rng);
    Tensor z5 = z, s5 = s;
    for (auto& v : z5.data) v *= 5.0;
    for (auto& v : s5.data) v *= 11.0;
    REQUIRE(ntxent_intra(z, s, 0.3) == Catch::Approx(ntxent_intra(z5, s5, 0.3)).margin(1e-12));
}

TEST_CASE("ntxent large-temperature limit approaches log(2N-1)") {
    Rng rng(37);
    const std::size_t n = 4;
    const Tensor z = Tensor::randn({n, 5}, rng);
    const Tensor s = Tensor::randn({n, 5}, rng);
    const double loss = ntxent_intra(z, s, 1e6);
    REQUIRE(loss == Catch::Approx(std::log(2.0 * n - 1.0)).margin(1e-4));
}

TEST_CASE("ntxent with perfect one-hot alignment is near zero at low temperature") {
    Tensor z({4, 4});
    for (std::size_t i = 0; i < 4; ++i) z.at(i, i) = 1.0;
    REQUIRE(ntxent_cross(z, z, 0.1) < 0.01);
}

TEST_CASE("aligned pairs beat permuted pairings") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng = Rng::substream(38, seed);
        const Tensor z = Tensor::randn({5, 8}, rng);
        Tensor permuted({5, 8});
        // rotate rows by one: a derangement of the pairing
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 8; ++j) permuted.at(i, j) = z.at((i + 1) % 5, j);
        REQUIRE(ntxent_intra(z, z, 0.5) < ntxent_intra(z, permuted, 0.5));
    }
}

TEST_CASE("ntxent is invariant under a common rotation of all rows") {
    Rng rng(39);
    const Tensor z = Tensor::randn({4, 6}, rng);
    const Tensor s = Tensor::randn({4, 6}, rng);
    const Tensor q = random_orthogonal(6, rng);
    REQUIRE(ntxent_intra(matmul_plain(z, q), matmul_plain(s, q), 0.4) ==
            Catch::Approx(ntxent_intra(z, s, 0.4)).margin(1e-9));
    REQUIRE(ntxent_cross(matmul_plain(z, q), matmul_plain(s, q), 0.4) ==
            Catch::Approx(ntxent_cross(z, s, 0.4)).margin(1e-9));
}

TEST_CASE("ntxent strictly decreases as one positive similarity rises") {
    Rng rng(40);
    Tensor zz = Tensor::randn({3, 3}, rng);
    Tensor zs = Tensor::randn({3, 3}, rng);
    Graph g;
    auto eval = [&](const Tensor& cross) {
        Graph gg;
        return gg.value(lossops::detail::ntxent_direction_from_sims(gg, gg.constant(zz),
                                                                    gg.constant(cross)))
            .item();
    };
    const double before = eval(zs);
    Tensor bumped = zs;
    bumped.at(1, 1) += 0.25;  // only the (i=1) positive term moves
    REQUIRE(eval(bumped) < before);
}

TEST_CASE("ntxent requires at least two pairs") {
    const Tensor z({1, 3}, {1, 2, 3});
    REQUIRE_THROWS_AS(ntxent_intra(z, z, 0.5), InvalidArgument);
}

TEST_CASE("moco loss on pinned examples") {
    // empty queue: denominator is the positive alone
    Rng rng(41);
    const Tensor q = Tensor::randn({3, 4}, rng);
    REQUIRE(std::fabs(moco_loss(q, q, Tensor({0, 4}), 0.2)) < 1e-12);

    // positive similarity 1, two orthogonal negatives, tau=1:
    //   -log(e / (e + 2))
    const Tensor s({1, 3}, {1, 0, 0});
    const Tensor queue({2, 3}, {0, 1, 0, 0, 0, 1});
    REQUIRE(moco_loss(s, s, queue, 1.0) ==
            Catch::Approx(std::log((M_E + 2.0) / M_E)).margin(1e-12));
}

TEST_CASE("moco loss is invariant under queue permutation") {
    Rng rng(42);
    const Tensor q = Tensor::randn({3, 4}, rng);
    const Tensor k = Tensor::randn({3, 4}, rng);
    Tensor queue = Tensor::randn({6, 4}, rng);
    Tensor shuffled({6, 4});
    const std::size_t perm[6] = {4, 2, 0, 5, 1, 3};
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) shuffled.at(i, j) = queue.at(perm[i], j);
    REQUIRE(moco_loss(q, k, queue, 0.3) == Catch::Approx(moco_loss(q, k, shuffled, 0.3)).margin(1e-12));
}

TEST_CASE("joint loss weighting") {
    const LossWeights w{1.0, 1.0, 0.1};  // the selected 1:1:0.1 ratio
    REQUIRE(joint_loss(0, 0, 0, 0, 0, w) == 0.0);
    const double j = joint_loss(0.5, 0.25, 2.0, 3.0, 4.0, w);
    REQUIRE(j == Catch::Approx(0.75 + 2.0 + 0.7).margin(1e-15));
    const LossWeights w2{2.0, 2.0, 0.2};
    REQUIRE(joint_loss(0.5, 0.25, 2.0, 3.0, 4.0, w2) == Catch::Approx(2.0 * j).margin(1e-12));
    // decomposition identity on random reports
    Rng rng(43);
    for (int t = 0; t < 20; ++t) {
        const double a = rng.uniform(0, 2), b = rng.uniform(0, 2), c = rng.uniform(0, 2);
        const double d = rng.uniform(0, 2), e = rng.uniform(0, 2);
        const LossWeights wr{rng.uniform(0, 3), rng.uniform(0, 3), rng.uniform(0, 3)};
        const double expect = wr.alpha * (a + b) + wr.beta * c + wr.w_contrast * (d + e);
        REQUIRE(std::fabs(joint_loss(a, b, c, d, e, wr) - expect) < 1e-12);
    }
}

TEST_CASE("focal variant stays finite and penalizes confident mistakes more") {
    Graph g;
    const Tensor labels({2, 1}, {1.0, 0.0});
    const Tensor good({2, 1}, {0.9, 0.1});
    const Tensor bad({2, 1}, {0.1, 0.9});
    const double lg =
        g.value(lossops::query_focal(g, g.constant(good), g.constant(labels))).item();
    const double lb =
        g.value(lossops::query_focal(g, g.constant(bad), g.constant(labels))).item();
    REQUIRE(std::isfinite(lg));
    REQUIRE(lb > lg);
}
