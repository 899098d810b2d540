#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "afr/checkpoint.hpp"
#include "afr/train.hpp"
#include "afr/util.hpp"

using namespace afr;
using namespace afr::train;

namespace fs = std::filesystem;

TEST_CASE("poly_lr follows the decay schedule") {
    TrainConfig cfg;  // lr0 1e-4, lr_min 1e-5, power 3
    const int64_t total = 1000;
    CHECK(poly_lr(0, total, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(poly_lr(total, total, cfg) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(poly_lr(500, total, cfg) == doctest::Approx(1e-5 + 9e-5 * 0.125).epsilon(1e-12));
    CHECK(poly_lr(500, total, cfg) == doctest::Approx(2.125e-5).epsilon(1e-9));

    // monotone non-increasing, continuous at the ends, clamped past the end
    double prev = poly_lr(0, total, cfg);
    for (int64_t s = 1; s <= total; ++s) {
        double lr = poly_lr(s, total, cfg);
        CHECK(lr <= prev + 1e-18);
        prev = lr;
    }
    CHECK(poly_lr(total - 1, total, cfg) - poly_lr(total, total, cfg) < 1e-9);
    CHECK(poly_lr(total + 100, total, cfg) == cfg.lr_min);
    CHECK_THROWS_AS(poly_lr(-1, total, cfg), std::invalid_argument);
}

namespace {

TrainConfig micro_train_config(int epochs) {
    TrainConfig cfg;
    cfg.identities = 6;
    cfg.impressions_per_id = 4;
    cfg.epochs = epochs;
    cfg.batch = 6;
    cfg.seed = 11;
    return cfg;
}

std::string temp_dir(const char* name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("micro training learns and logs per-epoch metrics") {
    auto cfg = micro_train_config(6);
    model::ModelConfig mcfg = model::ModelConfig::micro(cfg.identities);
    auto result = train::train(cfg, mcfg, temp_dir("afr_train_learn"));

    REQUIRE(int(result.log.size()) == cfg.epochs);
    double first = result.log.front().loss_cnn_head + result.log.front().loss_attn_head;
    double last = result.log.back().loss_cnn_head + result.log.back().loss_attn_head;
    CHECK(last < first);
    for (const auto& m : result.log) {
        CHECK(std::isfinite(m.loss_cnn_head));
        CHECK(std::isfinite(m.loss_attn_head));
        CHECK(m.lr <= cfg.lr0 + 1e-15);
        CHECK(m.lr >= cfg.lr_min - 1e-15);
    }
    CHECK(fs::exists(result.best_checkpoint));
    CHECK(fs::exists(result.last_checkpoint));
}

TEST_CASE("held-out genuine scores beat imposter scores after training") {
    auto cfg = micro_train_config(8);
    model::ModelConfig mcfg = model::ModelConfig::micro(cfg.identities);
    std::string dir = temp_dir("afr_train_sep");
    auto result = train::train(cfg, mcfg, dir);

    auto ckpt = model::load_checkpoint(result.best_checkpoint);
    synth::DatasetSpec spec{cfg.identities, cfg.impressions_per_id, cfg.seed,
                            mcfg.input_size};
    auto data = synth::render_dataset(spec);
    auto embed = [&](const Image& img) {
        std::vector<const Image*> one{&img};
        auto x = model::images_to_tensor<float>(one, mcfg.input_size);
        auto out = ckpt.net->forward(x, false);
        return std::make_pair(out.z_c.v, out.z_a.v);
    };
    double genuine = 0, imposter = 0;
    int gn = 0, in = 0;
    const int imps = cfg.impressions_per_id;
    for (int i = 0; i < cfg.identities; ++i) {
        auto [vc, va] = embed(data[size_t(i) * imps + imps - 1].image);
        for (int j = 0; j < cfg.identities; ++j) {
            auto [rc, ra] = embed(data[size_t(j) * imps].image);
            double sc = 0, sa = 0;
            for (size_t k = 0; k < vc.size(); ++k) sc += double(vc[k]) * rc[k];
            for (size_t k = 0; k < va.size(); ++k) sa += double(va[k]) * ra[k];
            double s = 0.2 * sc + 0.8 * sa;
            if (i == j) {
                genuine += s;
                ++gn;
            } else {
                imposter += s;
                ++in;
            }
        }
    }
    CHECK(genuine / gn > imposter / in);
}

TEST_CASE("training is reproducible and thread-count invariant") {
    auto cfg = micro_train_config(2);
    model::ModelConfig mcfg = model::ModelConfig::micro(cfg.identities);

    util::set_threads(2);
    std::string d1 = temp_dir("afr_train_det1");
    train::train(cfg, mcfg, d1);
    std::string d2 = temp_dir("afr_train_det2");
    train::train(cfg, mcfg, d2);
    CHECK(util::read_file_bytes(d1 + "/metrics.csv") == util::read_file_bytes(d2 + "/metrics.csv"));
    CHECK(util::read_file_bytes(d1 + "/last.afrn") == util::read_file_bytes(d2 + "/last.afrn"));

    util::set_threads(1);
    std::string d3 = temp_dir("afr_train_det3");
    train::train(cfg, mcfg, d3);
    util::set_threads(2);
    CHECK(util::read_file_bytes(d1 + "/metrics.csv") == util::read_file_bytes(d3 + "/metrics.csv"));
    CHECK(util::read_file_bytes(d1 + "/last.afrn") == util::read_file_bytes(d3 + "/last.afrn"));
}

TEST_CASE("an interrupted run resumes from the last epoch checkpoint") {
    auto cfg = micro_train_config(5);
    model::ModelConfig mcfg = model::ModelConfig::micro(cfg.identities);

    std::string full_dir = temp_dir("afr_train_full");
    auto full = train::train(cfg, mcfg, full_dir);

    // interrupt after 2 epochs, then resume to 5
    auto short_cfg = cfg;
    short_cfg.stop_after_epochs = 2;
    std::string part_dir = temp_dir("afr_train_part");
    train::train(short_cfg, mcfg, part_dir);
    auto resumed = train::train(cfg, mcfg, part_dir, /*resume=*/true);

    REQUIRE(resumed.log.size() == full.log.size());
    for (size_t i = 0; i < full.log.size(); ++i) {
        CHECK(resumed.log[i].loss_cnn_head == doctest::Approx(full.log[i].loss_cnn_head));
        CHECK(resumed.log[i].loss_attn_head == doctest::Approx(full.log[i].loss_attn_head));
        CHECK(resumed.log[i].val_tar == doctest::Approx(full.log[i].val_tar));
    }
    CHECK(util::read_file_bytes(part_dir + "/last.afrn") ==
          util::read_file_bytes(full_dir + "/last.afrn"));
}

TEST_CASE("divergence aborts with a diagnostic") {
    auto cfg = micro_train_config(2);
    // a non-finite learning rate wrecks the weights after the first step
    cfg.lr0 = std::numeric_limits<double>::infinity();
    cfg.lr_min = cfg.lr0;
    model::ModelConfig mcfg = model::ModelConfig::micro(cfg.identities);
    CHECK_THROWS_AS(train::train(cfg, mcfg, temp_dir("afr_train_nan")),
                    train::DivergenceError);
}
