#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "afr/checkpoint.hpp"
#include "afr/model.hpp"
#include "afr/synth.hpp"
#include "afr/util.hpp"

using namespace afr;
using namespace afr::model;
using nn::Tensor;

namespace {

Image random_image(int side, uint64_t seed) {
    util::Rng rng(seed);
    Image img(side, side);
    std::uniform_int_distribution<int> u(0, 255);
    for (auto& px : img.px) px = uint8_t(u(rng));
    return img;
}

template <typename T>
Tensor<T> random_input(int n, int side, uint64_t seed) {
    std::vector<Image> imgs;
    std::vector<const Image*> ptrs;
    for (int i = 0; i < n; ++i) imgs.push_back(random_image(side, seed + i));
    for (auto& im : imgs) ptrs.push_back(&im);
    return images_to_tensor<T>(ptrs, side);
}

// smooth ridge-like inputs: finite differences through the resampler stay
// well-behaved on smooth content
template <typename T>
Tensor<T> ridge_input(int n, int side, uint64_t seed) {
    std::vector<Image> imgs;
    std::vector<const Image*> ptrs;
    for (int i = 0; i < n; ++i) {
        auto id = synth::gen_identity(seed + i, side);
        imgs.push_back(synth::render_impression(id, synth::Perturbation::identity(), side));
    }
    for (auto& im : imgs) ptrs.push_back(&im);
    return images_to_tensor<T>(ptrs, side);
}

}  // namespace

TEST_CASE("ModelConfig validates, serializes, and hashes stably") {
    ModelConfig tiny = ModelConfig::tiny(50);
    tiny.validate();
    ModelConfig back = ModelConfig::deserialize(tiny.serialize());
    CHECK(back == tiny);
    CHECK(back.hash() == tiny.hash());

    ModelConfig bad = tiny;
    bad.grid = 10;  // input_size / patch != grid
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny;
    bad.embed_dim = 97;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny;
    bad.num_classes = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("micro forward produces contract shapes and unit embeddings") {
    ModelConfig cfg = ModelConfig::micro(3);
    AfrNet<float> net(cfg, 123);
    auto x = random_input<float>(2, cfg.input_size, 99);
    auto out = net.forward(x, false);
    CHECK(out.z_c.shape == std::vector<int>{2, cfg.embed_dim});
    CHECK(out.z_a.shape == std::vector<int>{2, cfg.embed_dim});
    CHECK(out.locals.shape == std::vector<int>{2, cfg.grid * cfg.grid, cfg.local_dim});
    CHECK(out.tokens.shape == std::vector<int>{2, cfg.grid * cfg.grid, cfg.embed_dim});
    for (int n = 0; n < 2; ++n) {
        double nc = 0, na = 0;
        for (int i = 0; i < cfg.embed_dim; ++i) {
            nc += double(out.z_c.v[n * cfg.embed_dim + i]) * out.z_c.v[n * cfg.embed_dim + i];
            na += double(out.z_a.v[n * cfg.embed_dim + i]) * out.z_a.v[n * cfg.embed_dim + i];
        }
        CHECK(std::abs(std::sqrt(nc) - 1.0) < 1e-5);
        CHECK(std::abs(std::sqrt(na) - 1.0) < 1e-5);
    }
    // every local descriptor cell is unit norm
    for (int t = 0; t < cfg.grid * cfg.grid; ++t) {
        double nl = 0;
        for (int c = 0; c < cfg.local_dim; ++c) {
            float v = out.locals.v[size_t(t) * cfg.local_dim + c];
            nl += double(v) * v;
        }
        CHECK(std::abs(std::sqrt(nl) - 1.0) < 1e-4);
    }
}

TEST_CASE("tiny config arities match the scaled architecture") {
    ModelConfig cfg = ModelConfig::tiny(2);
    CHECK(cfg.embed_dim == 96);
    CHECK(cfg.local_dim == 128);
    CHECK(cfg.grid == 14);
    AfrNet<float> net(cfg, 5);
    net.record_shapes(true);
    auto x = random_input<float>(1, cfg.input_size, 7);
    auto out = net.forward(x, false);
    CHECK(out.z_c.dim(1) == 96);
    CHECK(out.locals.dim(1) == 196);
    CHECK(out.locals.dim(2) == 128);
    for (const auto& [name, dims] : net.shape_ledger()) {
        if (name == "Conv4") CHECK(dims == std::vector<int>{128, 14, 14});
        if (name == "Conv5") CHECK(dims == std::vector<int>{256, 7, 7});
    }
}

TEST_CASE("forward is deterministic in inference mode") {
    ModelConfig cfg = ModelConfig::micro(3);
    AfrNet<float> net(cfg, 44);
    auto x = random_input<float>(1, cfg.input_size, 1);
    auto a = net.forward(x, false);
    auto b = net.forward(x, false);
    CHECK(a.z_c.v == b.z_c.v);
    CHECK(a.z_a.v == b.z_a.v);
    CHECK(a.locals.v == b.locals.v);
}

TEST_CASE("constant-zero input stays finite") {
    ModelConfig cfg = ModelConfig::micro(3);
    AfrNet<float> net(cfg, 3);
    Tensor<float> x({1, 3, cfg.input_size, cfg.input_size});
    auto out = net.forward(x, false);
    for (float v : out.z_c.v) CHECK(std::isfinite(v));
    for (float v : out.z_a.v) CHECK(std::isfinite(v));
    for (float v : out.locals.v) CHECK(std::isfinite(v));
}

TEST_CASE("STN is the identity map at initialization") {
    for (auto cfg : {ModelConfig::micro(3), ModelConfig::tiny(2)}) {
        util::Rng rng(17);
        SpatialAlignment<float> stn(cfg, rng);
        auto x = random_input<float>(2, cfg.input_size, 23);
        auto out = stn.forward(x, false, nullptr);
        double max_diff = 0;
        for (size_t i = 0; i < x.numel(); ++i)
            max_diff = std::max(max_diff, std::abs(double(out.aligned.v[i]) - x.v[i]));
        CHECK(max_diff < 1e-6);
        for (int n = 0; n < 2; ++n) {
            CHECK(out.params.v[n * 4 + 0] == doctest::Approx(1.0));  // scale
            CHECK(out.params.v[n * 4 + 1] == doctest::Approx(0.0));  // theta
            CHECK(out.params.v[n * 4 + 2] == doctest::Approx(0.0));  // tx
            CHECK(out.params.v[n * 4 + 3] == doctest::Approx(0.0));  // ty
        }
    }
}

TEST_CASE("forcing a 90 degree rotation matches the exact pixel permutation") {
    const int S = 32;
    auto x = random_input<float>(1, S, 5);
    AlignmentParams p;
    p.scale = 1.0;
    p.theta_deg = 90.0;
    auto out = SpatialAlignment<float>::apply_params(x, p);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                float want = x.v[(size_t(c) * S + j) * S + (S - 1 - i)];
                float got = out.v[(size_t(c) * S + i) * S + j];
                CHECK(std::abs(want - got) < 1e-6f);
            }
}

TEST_CASE("two different inputs give different embeddings") {
    ModelConfig cfg = ModelConfig::micro(3);
    AfrNet<float> net(cfg, 8);
    auto x1 = random_input<float>(1, cfg.input_size, 100);
    auto x2 = random_input<float>(1, cfg.input_size, 200);
    auto o1 = net.forward(x1, false);
    auto o2 = net.forward(x2, false);
    double cos_c = 0, cos_a = 0;
    for (int i = 0; i < cfg.embed_dim; ++i) {
        cos_c += double(o1.z_c.v[i]) * o2.z_c.v[i];
        cos_a += double(o1.z_a.v[i]) * o2.z_a.v[i];
    }
    CHECK(cos_c < 1.0 - 1e-6);
    CHECK(cos_a < 1.0 - 1e-6);
}

// ---------------------------------------------------------------------------
// Attention permutation equivariance: permuting the token order together with
// the positional embeddings leaves the class-token readout unchanged.

TEST_CASE("token permutation with permuted positions leaves the readout fixed") {
    const int D = 16, heads = 2, depth = 2, Tn = 8;
    util::Rng rng(31);
    std::vector<nn::EncoderBlock<double>> blocks;
    for (int i = 0; i < depth; ++i) blocks.emplace_back(D, heads, 4 * D, rng);
    nn::LayerNorm<double> ln(D);
    Tensor<double> feats({1, Tn, D}), pos({Tn + 1, D}), cls({D});
    std::normal_distribution<double> g(0, 1);
    for (auto& v : feats.v) v = g(rng);
    for (auto& v : pos.v) v = g(rng);
    for (auto& v : cls.v) v = g(rng);

    auto run = [&](const std::vector<int>& perm) {
        Tensor<double> tokens({1, Tn + 1, D});
        for (int i = 0; i < D; ++i) tokens.v[i] = cls.v[i] + pos.v[i];
        for (int t = 0; t < Tn; ++t) {
            int src = perm[t];
            for (int i = 0; i < D; ++i)
                tokens.v[size_t(t + 1) * D + i] =
                    feats.v[size_t(src) * D + i] + pos.v[size_t(src + 1) * D + i];
        }
        for (auto& b : blocks) tokens = b.forward(tokens, false);
        Tensor<double> rows = tokens;
        rows.shape = {Tn + 1, D};
        rows = ln.forward(rows, false);
        return std::vector<double>(rows.v.begin(), rows.v.begin() + D);  // cls state
    };

    std::vector<int> ident(Tn), perm(Tn);
    for (int i = 0; i < Tn; ++i) ident[i] = perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    auto a = run(ident);
    auto b = run(perm);
    for (int i = 0; i < D; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-5);
}

// ---------------------------------------------------------------------------
// ArcFace

TEST_CASE("arcface_logits reference behavior") {
    std::vector<double> z = {1, 0, 0};
    std::vector<std::vector<double>> w = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};

    // margin-free reduction: logits equal raw cosines
    auto plain = arcface_logits(z, w, 1, 0.0, 1.0);
    CHECK(plain[0] == doctest::Approx(1.0));
    CHECK(plain[1] == doctest::Approx(0.0));
    CHECK(plain[2] == doctest::Approx(0.0));

    // aligned target with margin 0.5, scale 64
    auto margined = arcface_logits(z, w, 0, 0.5, 64.0);
    CHECK(margined[0] == doctest::Approx(64.0 * std::cos(0.5)).epsilon(1e-9));
    CHECK(margined[0] == doctest::Approx(56.166).epsilon(1e-3));
    CHECK(margined[1] == doctest::Approx(0.0));

    // monotonicity: larger margin lowers the target logit only
    util::Rng rng(3);
    std::normal_distribution<double> g(0, 1);
    std::vector<double> zr(8);
    double n2 = 0;
    for (auto& v : zr) {
        v = g(rng);
        n2 += v * v;
    }
    for (auto& v : zr) v /= std::sqrt(n2);
    std::vector<std::vector<double>> wr;
    for (int j = 0; j < 5; ++j) {
        std::vector<double> row(8);
        double m2 = 0;
        for (auto& v : row) {
            v = g(rng);
            m2 += v * v;
        }
        for (auto& v : row) v /= std::sqrt(m2);
        wr.push_back(row);
    }
    double prev = std::numeric_limits<double>::infinity();
    for (double m : {0.0, 0.2, 0.4, 0.6}) {
        auto logits = arcface_logits(zr, wr, 2, m, 64.0);
        CHECK(logits[2] < prev);
        prev = logits[2];
        auto base = arcface_logits(zr, wr, 2, 0.0, 64.0);
        for (int j = 0; j < 5; ++j)
            if (j != 2) CHECK(logits[j] == doctest::Approx(base[j]));
    }

    // non-normalized inputs are rejected
    std::vector<double> bad = {2, 0, 0};
    CHECK_THROWS_AS(arcface_logits(bad, w, 0, 0.5, 64.0), std::invalid_argument);
}

TEST_CASE("arcface loss gradient w.r.t. z matches finite differences") {
    const int C = 7, D = 12, N = 3;
    util::Rng rng(77);
    ArcFaceParams ap;
    ArcFaceHead<double> head(C, D, ap, rng);
    std::normal_distribution<double> g(0, 1);

    Tensor<double> z({N, D});
    for (auto& v : z.v) v = g(rng);
    for (int n = 0; n < N; ++n) {
        double n2 = 0;
        for (int i = 0; i < D; ++i) n2 += z.v[n * D + i] * z.v[n * D + i];
        for (int i = 0; i < D; ++i) z.v[n * D + i] /= std::sqrt(n2);
    }
    std::vector<int> labels = {1, 4, 6};

    Tensor<double> dz;
    head.loss(z, labels, &dz);

    // central differences along random tangent directions of the unit sphere
    // (the head's contract keeps z rows unit norm)
    const double h = 1e-4;
    util::Rng pick(5);
    for (int trial = 0; trial < 60; ++trial) {
        int n = int(pick() % N);
        std::vector<double> dir(D);
        double dot = 0;
        for (int i = 0; i < D; ++i) {
            dir[i] = g(pick);
            dot += dir[i] * z.v[n * D + i];
        }
        double m2 = 0;
        for (int i = 0; i < D; ++i) {
            dir[i] -= dot * z.v[n * D + i];
            m2 += dir[i] * dir[i];
        }
        for (int i = 0; i < D; ++i) dir[i] /= std::sqrt(m2);

        auto eval = [&](double step) {
            Tensor<double> zz = z;
            double n2e = 0;
            for (int i = 0; i < D; ++i) {
                zz.v[n * D + i] += step * dir[i];
                n2e += zz.v[n * D + i] * zz.v[n * D + i];
            }
            for (int i = 0; i < D; ++i) zz.v[n * D + i] /= std::sqrt(n2e);
            ArcFaceHead<double> fresh = head;
            return fresh.loss(zz, labels, nullptr);
        };
        double fd = (eval(h) - eval(-h)) / (2 * h);
        double analytic = 0;
        for (int i = 0; i < D; ++i) analytic += dz.v[n * D + i] * dir[i];
        double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
        CHECK(std::abs(fd - analytic) / denom < 1e-4);
    }
}

// ---------------------------------------------------------------------------
// End-to-end gradient check (micro config, double precision)

namespace {

struct GradCheckHarness {
    ModelConfig cfg;
    AfrNet<double> net;
    util::Rng arc_rng;
    ArcFaceHead<double> arc_c, arc_a;
    Tensor<double> x;
    std::vector<int> labels;

    explicit GradCheckHarness(uint64_t seed)
        : cfg(ModelConfig::micro(3)),
          net(cfg, seed),
          arc_rng(seed + 1),
          arc_c(3, cfg.embed_dim, cfg.arcface, arc_rng),
          arc_a(3, cfg.embed_dim, cfg.arcface, arc_rng),
          x(ridge_input<double>(2, cfg.input_size, seed + 3)),
          labels{0, 2} {
        // jitter every parameter so the loss sits away from ReLU/grid kinks
        util::Rng jit(seed + 4);
        std::uniform_real_distribution<double> u(-0.02, 0.02);
        for_each_param([&](nn::Param<double>& p) {
            for (auto& v : p.value.v) v += u(jit);
        });
    }

    void for_each_param(const std::function<void(nn::Param<double>&)>& fn) {
        net.visit_params(fn);
        arc_c.visit_params("arcface_c", fn);
        arc_a.visit_params("arcface_a", fn);
    }

    double loss() {
        auto out = net.forward(x, true);
        return arc_c.loss(out.z_c, labels, nullptr) + arc_a.loss(out.z_a, labels, nullptr);
    }

    double loss_and_grads() {
        for_each_param([](nn::Param<double>& p) { p.grad.zero(); });
        auto out = net.forward(x, true);
        Tensor<double> dzc, dza;
        double l = arc_c.loss(out.z_c, labels, &dzc) + arc_a.loss(out.z_a, labels, &dza);
        net.backward(dzc, dza);
        return l;
    }
};

}  // namespace

TEST_CASE("end-to-end analytic gradients match central differences") {
    GradCheckHarness h(2024);
    h.loss_and_grads();

    std::vector<nn::Param<double>*> params;
    h.for_each_param([&](nn::Param<double>& p) { params.push_back(&p); });

    util::Rng pick(99);
    int checked = 0, zeros = 0;
    while (checked < 120) {
        auto* p = params[pick() % params.size()];
        size_t e = pick() % p->value.numel();
        double analytic = p->grad.v[e];
        // step sized to the gradient so the loss difference clears the
        // double-precision noise floor at every magnitude
        double step = std::clamp(3e-7 / std::max(std::abs(analytic), 1e-6), 1e-7, 1e-4);
        double old = p->value.v[e];
        p->value.v[e] = old + step;
        double lp = h.loss();
        p->value.v[e] = old - step;
        double lm = h.loss();
        p->value.v[e] = old;
        double fd = (lp - lm) / (2 * step);
        if (std::max(std::abs(fd), std::abs(analytic)) < 1e-4) {
            ++zeros;  // below FD resolution; treated as agreeing at zero
            ++checked;
            continue;
        }
        double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-10});
        INFO(p->name << "[" << e << "] analytic=" << analytic << " fd=" << fd);
        CHECK(rel < 1e-3);
        ++checked;
    }
    CHECK(zeros < 60);  // most sampled parameters carry real gradient
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_CASE("checkpoint round-trips bit-exactly and reproduces outputs") {
    namespace fs = std::filesystem;
    ModelConfig cfg = ModelConfig::micro(4);
    AfrNet<float> net(cfg, 909);
    util::Rng rng(910);
    ArcFaceHead<float> arc(4, cfg.embed_dim, cfg.arcface, rng);

    fs::path dir = fs::temp_directory_path() / "afr_ckpt_test";
    fs::create_directories(dir);
    std::string p1 = (dir / "a.afrn").string(), p2 = (dir / "b.afrn").string();
    save_checkpoint(p1, net, &arc);
    auto loaded = load_checkpoint(p1);
    REQUIRE(loaded.net != nullptr);
    REQUIRE(loaded.arcface != nullptr);
    CHECK(loaded.net->config() == cfg);
    save_checkpoint(p2, *loaded.net, loaded.arcface.get());
    CHECK(util::read_file_bytes(p1) == util::read_file_bytes(p2));

    auto x = random_input<float>(1, cfg.input_size, 31);
    auto a = net.forward(x, false);
    auto b = loaded.net->forward(x, false);
    CHECK(a.z_c.v == b.z_c.v);
    CHECK(a.z_a.v == b.z_a.v);
}
