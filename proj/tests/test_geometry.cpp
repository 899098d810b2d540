#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "afr/geometry.hpp"
#include "afr/synth.hpp"
#include "afr/util.hpp"
#include "oracles.hpp"

using namespace afr;
using namespace afr::geometry;

TEST_CASE("patch_centers covers the grid row-major") {
    auto kps = patch_centers(14, 14, 16);
    REQUIRE(kps.size() == 196);
    CHECK(kps[0].x == doctest::Approx(8));
    CHECK(kps[0].y == doctest::Approx(8));
    CHECK(kps[1].x == doctest::Approx(24));
    CHECK(kps[1].y == doctest::Approx(8));
    CHECK(kps[14].x == doctest::Approx(8));
    CHECK(kps[14].y == doctest::Approx(24));

    auto one = patch_centers(1, 1, 16);
    REQUIRE(one.size() == 1);
    CHECK(one[0].x == doctest::Approx(8));
    CHECK(one[0].y == doctest::Approx(8));
}

TEST_CASE("match_descriptors: self match is the identity pairing") {
    util::Rng rng(7);
    auto a = oracle::random_unit_descriptors(32, 16, rng);
    auto corr = match_descriptors(a, a, 0.6);
    REQUIRE(corr.size() == 32);
    for (const auto& c : corr) {
        CHECK(c.idx_a == c.idx_b);
        CHECK(c.similarity == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("match_descriptors: recovers a permutation of 196 random vectors") {
    util::Rng rng(11);
    auto a = oracle::random_unit_descriptors(196, 32, rng);
    std::vector<int> perm(196);
    for (int i = 0; i < 196; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    DescriptorSet b = a;
    for (int i = 0; i < 196; ++i)
        std::copy(a.row(perm[i]), a.row(perm[i]) + a.dim, b.data.data() + size_t(i) * b.dim);
    auto corr = match_descriptors(a, b, 0.6);
    REQUIRE(corr.size() == 196);
    for (const auto& c : corr) CHECK(perm[c.idx_b] == c.idx_a);
}

TEST_CASE("match_descriptors: threshold excludes everything / dim mismatch throws") {
    util::Rng rng(3);
    auto a = oracle::random_unit_descriptors(8, 64, rng);
    auto b = oracle::random_unit_descriptors(8, 64, rng);
    // random 64-d unit vectors have cosine well below 0.999
    CHECK(match_descriptors(a, b, 0.999).empty());
    auto c = oracle::random_unit_descriptors(8, 32, rng);
    CHECK_THROWS_AS(match_descriptors(a, c, 0.6), std::invalid_argument);
}

TEST_CASE("match_descriptors equals the O(n^2) oracle on random instances") {
    for (int trial = 0; trial < 100; ++trial) {
        util::Rng rng(1000 + trial);
        int na = 5 + int(rng() % 60), nb = 5 + int(rng() % 60);
        auto a = oracle::random_unit_descriptors(na, 24, rng);
        auto b = oracle::random_unit_descriptors(nb, 24, rng);
        double tau = -0.2 + 0.4 * double(rng() % 100) / 100.0;
        auto got = match_descriptors(a, b, tau);
        auto want = oracle::mutual_nn(a, b, tau);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].idx_a == want[i].idx_a);
            CHECK(got[i].idx_b == want[i].idx_b);
            CHECK(got[i].similarity == doctest::Approx(want[i].similarity).epsilon(1e-6));
        }
    }
}

namespace {

std::vector<Keypoint> random_keypoints(int n, util::Rng& rng, double span = 200) {
    std::uniform_real_distribution<double> u(5, span);
    std::vector<Keypoint> kp(n);
    for (auto& k : kp) k = {u(rng), u(rng)};
    return kp;
}

std::vector<Correspondence> identity_corr(int n) {
    std::vector<Correspondence> c(n);
    for (int i = 0; i < n; ++i) c[i] = {i, i, 1.0};
    return c;
}

}  // namespace

TEST_CASE("estimate_affine: exact recovery of a planted transform") {
    util::Rng rng(21);
    auto kp_a = random_keypoints(40, rng);
    AffineTransform want;
    want.m[0][0] = 1;
    want.m[0][1] = 0;
    want.m[0][2] = 10;
    want.m[1][0] = 0;
    want.m[1][1] = 1;
    want.m[1][2] = -5;
    std::vector<Keypoint> kp_b;
    for (const auto& k : kp_a) kp_b.push_back(want.apply(k));
    auto got = estimate_affine(identity_corr(40), kp_a, kp_b, RansacParams{}, 5);
    REQUIRE(got.has_value());
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(got->m[i][j] == doctest::Approx(want.m[i][j]).epsilon(1e-6));

    // matches the closed-form least-squares oracle
    double m[2][3];
    REQUIRE(oracle::affine_lsq(kp_a, kp_b, m));
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(got->m[i][j] == doctest::Approx(m[i][j]).epsilon(1e-6));
}

TEST_CASE("estimate_affine: identity correspondences give the identity") {
    util::Rng rng(22);
    auto kp = random_keypoints(30, rng);
    auto got = estimate_affine(identity_corr(30), kp, kp, RansacParams{}, 9);
    REQUIRE(got.has_value());
    CHECK(got->is_identity(1e-9));
}

TEST_CASE("estimate_affine: robust to 30% outliers") {
    int ok = 0;
    for (int trial = 0; trial < 100; ++trial) {
        util::Rng rng(4000 + trial);
        auto kp_a = random_keypoints(60, rng);
        AffineTransform planted = AffineTransform::about_point(100, 100, 1.1, 20, 7, -4);
        std::vector<Keypoint> kp_b;
        for (const auto& k : kp_a) kp_b.push_back(planted.apply(k));
        std::uniform_real_distribution<double> u(5, 200);
        for (int i = 0; i < 18; ++i) {  // 30% corrupted
            kp_b[i].x = u(rng);
            kp_b[i].y = u(rng);
        }
        RansacParams params;
        params.inlier_px = 2.0;
        auto got = estimate_affine(identity_corr(60), kp_a, kp_b, params, 777 + trial);
        if (!got) continue;
        double max_err = 0;
        for (int i = 18; i < 60; ++i) {
            Keypoint p = got->apply(kp_a[i]);
            max_err = std::max(max_err, std::hypot(p.x - kp_b[i].x, p.y - kp_b[i].y));
        }
        if (max_err < 1.0) ++ok;
    }
    CHECK(ok >= 95);
}

TEST_CASE("estimate_affine: degenerate inputs give NotFound") {
    std::vector<Keypoint> kp = {{0, 0}, {10, 10}, {20, 20}, {30, 30}};  // collinear
    CHECK(!estimate_affine(identity_corr(2), kp, kp, RansacParams{}, 1).has_value());
    RansacParams params;
    params.min_inliers = 3;
    CHECK(!estimate_affine(identity_corr(4), kp, kp, params, 1).has_value());
}

TEST_CASE("estimate_affine is translation-equivariant") {
    for (int trial = 0; trial < 20; ++trial) {
        util::Rng rng(300 + trial);
        auto kp_a = random_keypoints(25, rng);
        AffineTransform planted = AffineTransform::about_point(80, 90, 0.95, -15, 3, 6);
        std::vector<Keypoint> kp_b, kp_b_shift;
        double dx = 17.5, dy = -8.25;
        for (const auto& k : kp_a) {
            Keypoint p = planted.apply(k);
            kp_b.push_back(p);
            kp_b_shift.push_back({p.x + dx, p.y + dy});
        }
        auto t0 = estimate_affine(identity_corr(25), kp_a, kp_b, RansacParams{}, 42);
        auto t1 = estimate_affine(identity_corr(25), kp_a, kp_b_shift, RansacParams{}, 42);
        REQUIRE(t0.has_value());
        REQUIRE(t1.has_value());
        CHECK(t1->m[0][2] - t0->m[0][2] == doctest::Approx(dx).epsilon(1e-6));
        CHECK(t1->m[1][2] - t0->m[1][2] == doctest::Approx(dy).epsilon(1e-6));
    }
}

TEST_CASE("decompose handles canonical cases and round-trips") {
    auto d = decompose(AffineTransform::identity());
    CHECK(d.scale_x == doctest::Approx(1));
    CHECK(d.scale_y == doctest::Approx(1));
    CHECK(d.rotation_deg == doctest::Approx(0));
    CHECK(d.shear == doctest::Approx(0));

    d = decompose(AffineTransform::similarity(1, 30, 0, 0));
    CHECK(d.rotation_deg == doctest::Approx(30).epsilon(1e-9));
    CHECK(d.scale_x == doctest::Approx(1).epsilon(1e-12));
    CHECK(d.shear == doctest::Approx(0).epsilon(1e-12));

    AffineTransform t;
    t.m[0][0] = 2;
    t.m[0][1] = 0;
    t.m[0][2] = 5;
    t.m[1][0] = 0;
    t.m[1][1] = 2;
    t.m[1][2] = 0;
    d = decompose(t);
    CHECK(d.scale_x == doctest::Approx(2));
    CHECK(d.scale_y == doctest::Approx(2));
    CHECK(d.rotation_deg == doctest::Approx(0));
    CHECK(d.tx == doctest::Approx(5));

    // random non-singular transforms round-trip to 1e-9
    util::Rng rng(5);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int trial = 0; trial < 200; ++trial) {
        AffineTransform r;
        do {
            r.m[0][0] = u(rng);
            r.m[0][1] = u(rng);
            r.m[1][0] = u(rng);
            r.m[1][1] = u(rng);
        } while (std::abs(r.det2()) < 1e-3);
        r.m[0][2] = 50 * u(rng);
        r.m[1][2] = 50 * u(rng);
        AffineTransform back = recompose(decompose(r));
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) CHECK(std::abs(back.m[i][j] - r.m[i][j]) < 1e-9);
    }

    AffineTransform sing;
    sing.m[0][0] = 1;
    sing.m[0][1] = 2;
    sing.m[1][0] = 2;
    sing.m[1][1] = 4;
    CHECK_THROWS_AS(decompose(sing), std::invalid_argument);
}

TEST_CASE("transform_ok applies the configured limits") {
    TransformLimits limits;  // defaults: scale [0.5,2], rot 60, translation 112
    CHECK(transform_ok(AffineTransform::identity(), limits));
    CHECK_FALSE(transform_ok(AffineTransform::similarity(3.0, 0, 0, 0), limits));
    CHECK(transform_ok(AffineTransform::similarity(1.0, 30, 0, 0), limits));
    CHECK_FALSE(transform_ok(AffineTransform::similarity(1.0, 75, 0, 0), limits));
    CHECK_FALSE(transform_ok(AffineTransform::similarity(1.0, 0, 150, 0), limits));

    // identity passes for every valid limit setting
    util::Rng rng(9);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 50; ++i) {
        TransformLimits l;
        l.scale_min = 0.1 + 0.9 * u(rng);
        l.scale_max = 1.0 + 3 * u(rng);
        l.max_rotation_deg = 1 + 179 * u(rng);
        l.max_translation_px = 1 + 300 * u(rng);
        CHECK(transform_ok(AffineTransform::identity(), l));
    }
}

namespace {
Image test_pattern(int side) {
    Image img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) img.at(x, y) = uint8_t((x * 7 + y * 13 + x * y) % 256);
    return img;
}
}  // namespace

TEST_CASE("warp_image: identity is bit-exact, shift matches the pixel oracle") {
    Image img = test_pattern(64);
    Image same = warp_image(img, AffineTransform::identity(), 255);
    CHECK(same == img);

    AffineTransform shift;
    shift.m[0][2] = 16;
    Image moved = warp_image(img, shift, 255);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            uint8_t want = x >= 16 ? img.at(x - 16, y) : 255;
            CHECK(moved.at(x, y) == want);
        }

    AffineTransform offscreen;
    offscreen.m[0][2] = 1000;
    Image gone = warp_image(img, offscreen, 77);
    for (uint8_t v : gone.px) CHECK(v == 77);

    AffineTransform sing;
    sing.m[0][0] = 0;
    sing.m[1][1] = 0;
    CHECK_THROWS_AS(warp_image(img, sing, 0), std::invalid_argument);
}

TEST_CASE("warp by t then t^-1 returns the original within bilinear tolerance") {
    // smooth content: resampling error is curvature-limited
    Image img(96, 96);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x)
            img.at(x, y) = uint8_t(std::lround(
                128 + 60 * std::sin(2 * std::numbers::pi * x / 48.0) *
                          std::cos(2 * std::numbers::pi * y / 64.0)));
    AffineTransform t = AffineTransform::about_point(48, 48, 1.05, 12, 4, -3);
    Image fwd = warp_image(img, t, 255);
    Image back = warp_image(fwd, *t.inverse(), 255);
    double total = 0;
    int n = 0;
    for (int y = 16; y < 80; ++y)
        for (int x = 16; x < 80; ++x) {
            total += std::abs(int(back.at(x, y)) - int(img.at(x, y)));
            ++n;
        }
    CHECK(total / n < 2.0);
}

TEST_CASE("overlap_masks: full overlap, disjoint halves, analytic fraction") {
    Image a(64, 64, 10), b(64, 64, 30);
    Mask full(64, 64, 1);
    auto both = overlap_masks(a, b, full, full, 255);
    REQUIRE(both.has_value());
    CHECK(both->first == a);
    CHECK(both->second == b);

    Mask left(64, 64, 0), right(64, 64, 0);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 32; ++x) {
            left.at(x, y) = 1;
            right.at(x + 32, y) = 1;
        }
    CHECK(!overlap_masks(a, b, left, right, 255).has_value());

    // half-overlapping rectangles: masked area equals the analytic overlap
    Mask m1(64, 64, 0), m2(64, 64, 0);
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 48; ++x) m1.at(x, y) = 1;
        for (int x = 16; x < 64; ++x) m2.at(x, y) = 1;
    }
    auto crops = overlap_masks(a, b, m1, m2, 255);
    REQUIRE(crops.has_value());
    int64_t kept = 0;
    for (uint8_t v : crops->first.px)
        if (v != 255) ++kept;
    CHECK(kept == 32 * 64);  // [16, 48) overlap columns

    Image small(32, 32, 0);
    CHECK_THROWS_AS(overlap_masks(small, b, m1, m2, 255), std::invalid_argument);
}

namespace {
Image synth_finger(uint64_t seed = 42) {
    auto id = afr::synth::gen_identity(seed);
    return afr::synth::render_impression(id, afr::synth::Perturbation::identity(), 224);
}
}  // namespace

TEST_CASE("random_occlusion: hits the requested ratio and is deterministic") {
    Image img = synth_finger();
    CHECK(random_occlusion(img, 0.0, 5) == img);

    Mask fg = foreground_mask(img);
    const double denom = double(fg.count());
    for (double ratio : {0.1, 0.2, 0.4}) {
        for (int s = 0; s < 4; ++s) {
            Image occ = random_occlusion(img, ratio, 5 + s);
            // the painted foreground area lies between the strictly-changed
            // count (excludes repainted white pixels) and the all-white count
            int64_t strictly_painted = 0, white_after = 0;
            for (size_t i = 0; i < img.px.size(); ++i) {
                if (!fg.on[i]) continue;
                if (occ.px[i] == 255 && img.px[i] != 255) ++strictly_painted;
                if (occ.px[i] == 255) ++white_after;
            }
            CHECK(strictly_painted / denom <= ratio + 0.021);
            CHECK(white_after / denom >= ratio - 0.021);
        }
    }

    Image occ1 = random_occlusion(img, 0.2, 99);
    Image occ2 = random_occlusion(img, 0.2, 99);
    CHECK(occ1 == occ2);
    CHECK_THROWS_AS(random_occlusion(img, 1.0, 1), std::invalid_argument);
}

TEST_CASE("random_partial_affine: removes the requested foreground fraction") {
    Image img = synth_finger(11);
    CHECK(random_partial_affine(img, 0.0, 3) == img);
    const int64_t fg_before = foreground_mask(img).count();
    for (double ratio : {0.2, 0.4}) {
        for (int s = 0; s < 3; ++s) {
            Image cut = random_partial_affine(img, ratio, 50 + s);
            int64_t fg_after = foreground_mask(cut).count();
            double remaining = double(fg_after) / double(fg_before);
            CHECK(remaining == doctest::Approx(1.0 - ratio).epsilon(0.08));
        }
    }
    Image c1 = random_partial_affine(img, 0.3, 8);
    Image c2 = random_partial_affine(img, 0.3, 8);
    CHECK(c1 == c2);
}

TEST_CASE("foreground_mask marks ridge blocks, not the background") {
    Image img = synth_finger(13);
    Mask fg = foreground_mask(img);
    // corners are blank background
    CHECK(fg.at(2, 2) == 0);
    CHECK(fg.at(221, 2) == 0);
    // the center holds ridges
    CHECK(fg.at(112, 112) == 1);
    CHECK(fg.count() > 10000);
}
