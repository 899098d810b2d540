// End-to-end checks of the command-line tool. The binary path comes from the
// AFR_CLI environment variable (set by ctest).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "afr/util.hpp"

namespace fs = std::filesystem;
using afr::util::read_file_bytes;
using afr::util::run_command;
using json = nlohmann::json;

namespace {

std::string cli() {
    const char* env = std::getenv("AFR_CLI");
    REQUIRE(env != nullptr);
    return env;
}

std::string work_dir() {
    static std::string dir = [] {
        fs::path d = fs::temp_directory_path() / "afr_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d.string();
    }();
    return dir;
}

// micro model + micro dataset keep the CLI suite fast
void write_micro_config(const std::string& path, int epochs) {
    std::ofstream out(path);
    out << "[model]\n"
        << "preset = micro\n"
        << "\n"
        << "[train]\n"
        << "identities = 4\n"
        << "impressions = 3\n"
        << "epochs = " << epochs << "\n"
        << "batch = 4\n"
        << "seed = 5\n";
}

struct Fixture {
    std::string dir = work_dir();
    std::string data = dir + "/data";
    std::string model_dir = dir + "/model";
    std::string model = model_dir + "/best.afrn";

    Fixture() {
        static bool prepared = [this] {
            auto gen = run_command(cli() + " gen --identities 4 --impressions 3 --seed 5"
                                           " --size 32 --out " + data);
            REQUIRE(gen.exit_code == 0);
            write_micro_config(dir + "/micro.cfg", 2);
            auto train = run_command(cli() + " train --data " + data + " --config " + dir +
                                     "/micro.cfg --out " + model_dir);
            INFO(train.output);
            REQUIRE(train.exit_code == 0);
            return true;
        }();
        (void)prepared;
    }
};

}  // namespace

TEST_CASE("gen writes images plus a manifest and validates flags") {
    Fixture f;
    CHECK(fs::exists(f.data + "/manifest.json"));
    int pgm_count = 0;
    for (const auto& e : fs::directory_iterator(f.data))
        if (e.path().extension() == ".pgm") ++pgm_count;
    CHECK(pgm_count == 12);

    // identical seed gives a byte-identical manifest
    std::string again = work_dir() + "/data_again";
    auto r = run_command(cli() + " gen --identities 4 --impressions 3 --seed 5 --size 32"
                                 " --out " + again);
    CHECK(r.exit_code == 0);
    CHECK(read_file_bytes(f.data + "/manifest.json") ==
          read_file_bytes(again + "/manifest.json"));
    CHECK(read_file_bytes(f.data + "/id_000_imp_00.pgm") ==
          read_file_bytes(again + "/id_000_imp_00.pgm"));

    auto bad = run_command(cli() + " gen --identities 0 --impressions 3 --seed 1 --out " +
                           work_dir() + "/bad");
    CHECK(bad.exit_code == 2);
}

TEST_CASE("train writes checkpoints, metrics, and a manifest echoing defaults") {
    Fixture f;
    CHECK(fs::exists(f.model));
    CHECK(fs::exists(f.model_dir + "/last.afrn"));
    CHECK(fs::exists(f.model_dir + "/metrics.csv"));

    std::ifstream in(f.model_dir + "/manifest.json");
    json manifest = json::parse(in);
    CHECK(manifest.at("train").at("arc_margin").get<double>() == doctest::Approx(0.5));
    CHECK(manifest.at("train").at("lr0").get<double>() == doctest::Approx(1e-4));
    CHECK(manifest.at("train").at("power").get<double>() == doctest::Approx(3.0));
    CHECK(manifest.at("train").at("weight_decay").get<double>() == doctest::Approx(2e-5));

    std::ifstream metrics(f.model_dir + "/metrics.csv");
    std::string header;
    std::getline(metrics, header);
    CHECK(header == "epoch,step,lr,loss_cnn_head,loss_attn_head,val_tar");

    // image size mismatched against the model config is a usage error
    std::string cfg224 = work_dir() + "/tiny224.cfg";
    {
        std::ofstream out(cfg224);
        out << "[model]\npreset = tiny\n[train]\nidentities = 4\nimpressions = 3\nepochs = 1\n";
    }
    auto bad = run_command(cli() + " train --data " + f.data + " --config " + cfg224 +
                           " --out " + work_dir() + "/bad_model");
    CHECK(bad.exit_code == 2);
}

TEST_CASE("verify decides, reports JSON, and honors --no-realign") {
    Fixture f;
    std::string img0 = f.data + "/id_000_imp_00.pgm";
    std::string img0b = f.data + "/id_000_imp_01.pgm";
    std::string img1 = f.data + "/id_001_imp_00.pgm";

    auto same = run_command(cli() + " verify --model " + f.model + " --img1 " + img0 +
                            " --img2 " + img0 + " --json");
    CHECK(same.exit_code == 0);
    json j = json::parse(same.output);
    CHECK(j.at("score").get<double>() == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(j.at("threshold").get<double>() == doctest::Approx(0.36));
    CHECK(j.at("decision") == "accept");

    auto norealign = run_command(cli() + " verify --model " + f.model + " --img1 " + img0 +
                                 " --img2 " + img1 + " --json --no-realign");
    json j2 = json::parse(norealign.output);
    CHECK(j2.at("realign_attempted").get<bool>() == false);

    // force a reject with a threshold just above the reported score
    double score = j2.at("score").get<double>();
    if (score < 0.999) {
        auto reject = run_command(cli() + " verify --model " + f.model + " --img1 " + img0 +
                                  " --img2 " + img1 + " --threshold 0.9995");
        CHECK(reject.exit_code == 1);
    }
    auto same_strict = run_command(cli() + " verify --model " + f.model + " --img1 " + img0 +
                                   " --img2 " + img0b + " --threshold -1.0");
    CHECK(same_strict.exit_code == 0);

    auto missing = run_command(cli() + " verify --model " + f.model + " --img1 " + img0);
    CHECK(missing.exit_code == 2);
}

TEST_CASE("enroll and search work end to end") {
    Fixture f;
    std::string gallery = work_dir() + "/gallery";
    auto en = run_command(cli() + " enroll --model " + f.model + " --gallery " + gallery +
                          " --data " + f.data + " --impression 0");
    INFO(en.output);
    CHECK(en.exit_code == 0);
    CHECK(fs::exists(gallery + "/manifest.json"));

    std::string out = work_dir() + "/search_out";
    auto se = run_command(cli() + " search --model " + f.model + " --gallery " + gallery +
                          " --probe " + f.data + "/id_002_imp_00.pgm -k 10 --out " + out);
    INFO(se.output);
    CHECK(se.exit_code == 0);
    std::ifstream csv(out + "/search.csv");
    std::string header, first;
    std::getline(csv, header);
    std::getline(csv, first);
    CHECK(first.find("1,id_002") == 0);

    // searching against a gallery from a different model errors out
    std::string cfg_other = work_dir() + "/other.cfg";
    {
        std::ofstream o(cfg_other);
        o << "[model]\npreset = micro\n[train]\nidentities = 3\nimpressions = 2\nepochs = 1\n"
             "batch = 3\nseed = 9\n";
    }
    std::string other_data = work_dir() + "/other_data";
    run_command(cli() + " gen --identities 3 --impressions 2 --seed 9 --size 32 --out " +
                other_data);
    std::string other_model = work_dir() + "/other_model";
    auto tr = run_command(cli() + " train --data " + other_data + " --config " + cfg_other +
                          " --out " + other_model);
    REQUIRE(tr.exit_code == 0);
    auto bad = run_command(cli() + " search --model " + other_model + "/best.afrn --gallery " +
                           gallery + " --probe " + f.data + "/id_002_imp_00.pgm");
    CHECK(bad.exit_code == 3);
}

TEST_CASE("eval emits protocol artifacts deterministically across thread counts") {
    Fixture f;
    std::string out1 = work_dir() + "/eval1";
    auto r1 = run_command(cli() + " --threads 1 eval --model " + f.model + " --data " + f.data +
                          " --protocol fvc --out " + out1 + " --far 0.25");
    INFO(r1.output);
    CHECK(r1.exit_code == 0);
    std::ifstream in(out1 + "/manifest.json");
    json manifest = json::parse(in);
    // 4 fingers x 3 impressions: 4*C(3,2)=12 genuine, C(4,2)=6 imposter
    CHECK(manifest.at("genuine_pairs").get<int>() == 12);
    CHECK(manifest.at("imposter_pairs").get<int>() == 6);
    CHECK(fs::exists(out1 + "/roc.csv"));
    CHECK(fs::exists(out1 + "/histograms.csv"));

    std::string out2 = work_dir() + "/eval2";
    auto r2 = run_command(cli() + " --threads 2 eval --model " + f.model + " --data " + f.data +
                          " --protocol fvc --out " + out2 + " --far 0.25");
    CHECK(r2.exit_code == 0);
    CHECK(read_file_bytes(out1 + "/roc.csv") == read_file_bytes(out2 + "/roc.csv"));
    CHECK(read_file_bytes(out1 + "/histograms.csv") == read_file_bytes(out2 + "/histograms.csv"));
    CHECK(read_file_bytes(out1 + "/manifest.json") == read_file_bytes(out2 + "/manifest.json"));
}

TEST_CASE("robustness sweep logs ratio x repeat runs") {
    Fixture f;
    std::string out = work_dir() + "/robust";
    auto r = run_command(cli() + " robustness --model " + f.model + " --data " + f.data +
                         " --mode occlusion --out " + out +
                         " --ratios 0.1 0.2 --repeats 2 --seed 3 --far 0.25");
    INFO(r.output);
    CHECK(r.exit_code == 0);
    std::ifstream runs(out + "/robustness_runs.csv");
    std::string line;
    int rows = 0;
    std::getline(runs, line);  // header
    while (std::getline(runs, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 4);
    CHECK(fs::exists(out + "/robustness.csv"));

    // a repeat with the same seed is byte-identical
    std::string out2 = work_dir() + "/robust2";
    auto r2 = run_command(cli() + " robustness --model " + f.model + " --data " + f.data +
                          " --mode occlusion --out " + out2 +
                          " --ratios 0.1 0.2 --repeats 2 --seed 3 --far 0.25");
    CHECK(r2.exit_code == 0);
    CHECK(read_file_bytes(out + "/robustness_runs.csv") ==
          read_file_bytes(out2 + "/robustness_runs.csv"));
}

TEST_CASE("saliency writes one heatmap per image") {
    Fixture f;
    std::string out = work_dir() + "/saliency";
    auto r = run_command(cli() + " saliency --model " + f.model + " --img1 " + f.data +
                         "/id_000_imp_00.pgm --img2 " + f.data + "/id_000_imp_01.pgm --out " +
                         out);
    INFO(r.output);
    CHECK(r.exit_code == 0);
    for (const char* name : {"saliency_1.csv", "saliency_2.csv"}) {
        std::ifstream csv(out + "/" + std::string(name));
        std::string line;
        int rows = 0;
        std::getline(csv, line);
        while (std::getline(csv, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 4);  // micro grid is 2x2
    }
}
