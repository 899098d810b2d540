#include "afr/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "afr/checkpoint.hpp"
#include "afr/eval.hpp"
#include "afr/util.hpp"

namespace afr::train {

namespace fs = std::filesystem;
using model::AfrNet;
using model::ArcFaceHead;
using nn::Param;
using nn::Tensor;

void TrainConfig::validate() const {
    if (identities < 2) throw std::invalid_argument("TrainConfig: identities >= 2");
    if (impressions_per_id < 2) throw std::invalid_argument("TrainConfig: impressions >= 2");
    if (epochs < 1 || batch < 1) throw std::invalid_argument("TrainConfig: epochs/batch >= 1");
    if (!(lr_min <= lr0)) throw std::invalid_argument("TrainConfig: lr_min <= lr0");
    if (!(power > 0)) throw std::invalid_argument("TrainConfig: power > 0");
}

double poly_lr(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
    if (step < 0) throw std::invalid_argument("poly_lr: step >= 0");
    if (step >= total_steps) return cfg.lr_min;
    double frac = 1.0 - double(step) / double(total_steps);
    return cfg.lr_min + (cfg.lr0 - cfg.lr_min) * std::pow(frac, cfg.power);
}

namespace {

struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0;
    int64_t t = 0;
    std::vector<Tensor<float>> m, v;

    void init(const std::vector<Param<float>*>& params) {
        m.clear();
        v.clear();
        for (auto* p : params) {
            m.emplace_back(p->value.shape);
            v.emplace_back(p->value.shape);
        }
    }

    void step(const std::vector<Param<float>*>& params, double lr) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, double(t));
        double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            Param<float>& p = *params[pi];
            float* w = p.value.data();
            const float* g = p.grad.data();
            float* mm = m[pi].data();
            float* vv = v[pi].data();
            const double wd = p.decay ? weight_decay : 0.0;
            for (size_t i = 0; i < p.value.numel(); ++i) {
                double gi = g[i];
                double mi = beta1 * mm[i] + (1 - beta1) * gi;
                double vi = beta2 * vv[i] + (1 - beta2) * gi * gi;
                mm[i] = float(mi);
                vv[i] = float(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                w[i] = float(w[i] - lr * update - lr * wd * w[i]);
            }
        }
    }
};

std::vector<Param<float>*> collect_params(AfrNet<float>& net, ArcFaceHead<float>& arc_c,
                                          ArcFaceHead<float>& arc_a) {
    std::vector<Param<float>*> out;
    net.visit_params([&](Param<float>& p) { out.push_back(&p); });
    arc_c.visit_params("arcface_c", [&](Param<float>& p) { out.push_back(&p); });
    arc_a.visit_params("arcface_a", [&](Param<float>& p) { out.push_back(&p); });
    return out;
}

/// Validation TAR @ FAR=0.01: last impression of every identity probes
/// against the canonical first impressions.
double validation_tar(AfrNet<float>& net, const std::vector<synth::Sample>& data,
                      const TrainConfig& cfg) {
    const int ids = cfg.identities, imps = cfg.impressions_per_id;
    const int S = net.config().input_size;
    std::vector<const Image*> refs, vals;
    for (int i = 0; i < ids; ++i) {
        refs.push_back(&data[size_t(i) * imps + 0].image);
        vals.push_back(&data[size_t(i) * imps + imps - 1].image);
    }
    auto embed_all = [&](const std::vector<const Image*>& imgs) {
        std::vector<std::vector<float>> zc(imgs.size()), za(imgs.size());
        const int chunk = 32;
        for (size_t b = 0; b < imgs.size(); b += chunk) {
            std::vector<const Image*> part(imgs.begin() + b,
                                           imgs.begin() + std::min(imgs.size(), b + chunk));
            auto x = model::images_to_tensor<float>(part, S);
            auto out = net.forward(x, false);
            const int D = net.config().embed_dim;
            for (size_t k = 0; k < part.size(); ++k) {
                zc[b + k].assign(out.z_c.data() + k * D, out.z_c.data() + (k + 1) * D);
                za[b + k].assign(out.z_a.data() + k * D, out.z_a.data() + (k + 1) * D);
            }
        }
        return std::make_pair(zc, za);
    };
    auto [ref_c, ref_a] = embed_all(refs);
    auto [val_c, val_a] = embed_all(vals);
    auto score = [&](int i, int j) {
        double sc = 0, sa = 0;
        for (size_t k = 0; k < ref_c[j].size(); ++k) sc += double(val_c[i][k]) * ref_c[j][k];
        for (size_t k = 0; k < ref_a[j].size(); ++k) sa += double(val_a[i][k]) * ref_a[j][k];
        return 0.2 * sc + 0.8 * sa;
    };
    eval::ScoreSet scores;
    for (int i = 0; i < ids; ++i) scores.genuine.push_back(score(i, i));
    for (int i = 0; i < ids; ++i)
        for (int j = i + 1; j < ids; ++j) scores.imposter.push_back(score(i, j));
    return eval::tar_at_far(scores, 0.01).tar;
}

struct TrainState {
    int next_epoch = 0;
    int64_t global_step = 0;
    double best_val_tar = -1;
    int best_epoch = -1;
};

const char kStateMagic[4] = {'A', 'F', 'R', 'S'};

void save_state(const std::string& path, const AdamW& opt,
                const std::vector<Param<float>*>& params, const TrainState& st) {
    model::BlobFile file;
    std::ostringstream meta;
    meta << "next_epoch=" << st.next_epoch << "\n";
    meta << "global_step=" << st.global_step << "\n";
    meta << "opt_t=" << opt.t << "\n";
    meta << "best_val_tar=" << util::fmt_double(st.best_val_tar) << "\n";
    meta << "best_epoch=" << st.best_epoch << "\n";
    file.meta = meta.str();
    for (size_t i = 0; i < params.size(); ++i) {
        file.tensors.push_back({"m." + params[i]->name, opt.m[i].shape, opt.m[i].v});
        file.tensors.push_back({"v." + params[i]->name, opt.v[i].shape, opt.v[i].v});
    }
    model::write_blob_file(path, kStateMagic, file);
}

void load_state(const std::string& path, AdamW& opt, const std::vector<Param<float>*>& params,
                TrainState& st) {
    model::BlobFile file = model::read_blob_file(path, kStateMagic);
    std::istringstream meta(file.meta);
    std::string line;
    while (std::getline(meta, line)) {
        size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "next_epoch") st.next_epoch = std::stoi(v);
        else if (k == "global_step") st.global_step = std::stoll(v);
        else if (k == "opt_t") opt.t = std::stoll(v);
        else if (k == "best_val_tar") st.best_val_tar = std::stod(v);
        else if (k == "best_epoch") st.best_epoch = std::stoi(v);
    }
    std::map<std::string, const model::TensorBlob*> by_name;
    for (const auto& t : file.tensors) by_name[t.name] = &t;
    for (size_t i = 0; i < params.size(); ++i) {
        auto mi = by_name.find("m." + params[i]->name);
        auto vi = by_name.find("v." + params[i]->name);
        if (mi == by_name.end() || vi == by_name.end())
            throw std::runtime_error("training state missing moments for " + params[i]->name);
        opt.m[i].v = mi->second->data;
        opt.v[i].v = vi->second->data;
    }
}

std::vector<EpochMetrics> load_metrics_csv(const std::string& path) {
    std::vector<EpochMetrics> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochMetrics m;
        std::istringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        m.epoch = std::stoi(tok);
        std::getline(ss, tok, ',');
        m.step = std::stoll(tok);
        std::getline(ss, tok, ',');
        m.lr = std::stod(tok);
        std::getline(ss, tok, ',');
        m.loss_cnn_head = std::stod(tok);
        std::getline(ss, tok, ',');
        m.loss_attn_head = std::stod(tok);
        std::getline(ss, tok, ',');
        m.val_tar = std::stod(tok);
        out.push_back(m);
    }
    return out;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,step,lr,loss_cnn_head,loss_attn_head,val_tar\n";
    for (const auto& m : log)
        out << m.epoch << "," << m.step << "," << util::fmt_double(m.lr) << ","
            << util::fmt_double(m.loss_cnn_head) << "," << util::fmt_double(m.loss_attn_head)
            << "," << util::fmt_double(m.val_tar) << "\n";
}

TrainResult train(const TrainConfig& cfg, const model::ModelConfig& mcfg_in,
                  const std::string& out_dir, bool resume, std::ostream* progress,
                  const std::vector<synth::Sample>* external_data) {
    cfg.validate();
    model::ModelConfig mcfg = mcfg_in;
    mcfg.num_classes = cfg.identities;
    mcfg.validate();
    fs::create_directories(out_dir);
    const std::string best_path = out_dir + "/best.afrn";
    const std::string last_path = out_dir + "/last.afrn";
    const std::string state_path = out_dir + "/state.afrs";
    const std::string metrics_path = out_dir + "/metrics.csv";

    // dataset: impressions [0, k-2] train, impression k-1 held out
    std::vector<synth::Sample> data;
    if (external_data) {
        if (int(external_data->size()) != cfg.identities * cfg.impressions_per_id)
            throw std::invalid_argument("train: dataset size does not match config");
        for (const auto& s : *external_data)
            if (s.image.width != mcfg.input_size || s.image.height != mcfg.input_size)
                throw std::invalid_argument("train: image size does not match model input size");
        data = *external_data;
    } else {
        synth::DatasetSpec dspec{cfg.identities, cfg.impressions_per_id, cfg.seed,
                                 mcfg.input_size};
        data = synth::render_dataset(dspec);
    }
    std::vector<int> train_idx;
    for (int i = 0; i < cfg.identities; ++i)
        for (int j = 0; j + 1 < cfg.impressions_per_id; ++j)
            train_idx.push_back(i * cfg.impressions_per_id + j);

    const int64_t steps_per_epoch =
        (int64_t(train_idx.size()) + cfg.batch - 1) / cfg.batch;
    const int64_t total_steps = steps_per_epoch * cfg.epochs;

    AfrNet<float> net(mcfg, util::seed_mix(cfg.seed, 0x1417ull));
    util::Rng arc_rng(util::seed_mix(cfg.seed, 0xa3cfull));
    ArcFaceHead<float> arc_c(cfg.identities, mcfg.embed_dim, mcfg.arcface, arc_rng);
    ArcFaceHead<float> arc_a(cfg.identities, mcfg.embed_dim, mcfg.arcface, arc_rng);
    auto params = collect_params(net, arc_c, arc_a);

    AdamW opt;
    opt.weight_decay = cfg.weight_decay;
    opt.init(params);

    TrainResult result;
    TrainState st;
    if (resume && fs::exists(state_path) && fs::exists(last_path)) {
        auto ckpt = model::load_checkpoint(last_path);
        if (ckpt.net->config() != mcfg)
            throw std::runtime_error("resume: config mismatch with " + last_path);
        // adopt the saved tensors
        std::map<std::string, Param<float>*> mine;
        for (auto* p : params) mine[p->name] = p;
        ckpt.net->visit_params([&](Param<float>& p) { mine.at(p.name)->value.v = p.value.v; });
        {
            model::BlobFile file = model::read_blob_file(last_path, "AFRN");
            for (const auto& t : file.tensors)
                if (t.name.rfind("arcface_", 0) == 0) mine.at(t.name)->value.v = t.data;
                else if (t.name.rfind("stats.", 0) == 0) {
                    // running statistics restored below via net stats visitor
                }
            std::map<std::string, const model::TensorBlob*> by_name;
            for (const auto& t : file.tensors) by_name[t.name] = &t;
            net.visit_stats([&](const std::string& name, std::vector<float>& v) {
                auto it = by_name.find("stats." + name);
                if (it != by_name.end())
                    v.assign(it->second->data.begin(), it->second->data.end());
            });
        }
        load_state(state_path, opt, params, st);
        result.log = load_metrics_csv(metrics_path);
        if (progress)
            (*progress) << "resuming from epoch " << st.next_epoch << "\n";
    }

    auto save_full = [&](const std::string& path) {
        model::BlobFile file;
        file.meta = mcfg.serialize();
        net.visit_params([&](Param<float>& p) {
            file.tensors.push_back({p.name, p.value.shape, p.value.v});
        });
        net.visit_stats([&](const std::string& name, std::vector<float>& v) {
            model::TensorBlob b;
            b.name = "stats." + name;
            b.dims = {int(v.size())};
            b.data.assign(v.begin(), v.end());
            file.tensors.push_back(std::move(b));
        });
        arc_c.visit_params("arcface_c", [&](Param<float>& p) {
            file.tensors.push_back({p.name, p.value.shape, p.value.v});
        });
        arc_a.visit_params("arcface_a", [&](Param<float>& p) {
            file.tensors.push_back({p.name, p.value.shape, p.value.v});
        });
        model::write_blob_file(path, "AFRN", file);
    };

    const int S = mcfg.input_size;
    int epochs_this_run = 0;
    for (int epoch = st.next_epoch; epoch < cfg.epochs; ++epoch) {
        // per-epoch derived shuffle keeps resume and thread count immaterial
        std::vector<int> order = train_idx;
        util::Rng shuffle_rng(util::seed_mix(cfg.seed, 0x54fful, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double sum_loss_c = 0, sum_loss_a = 0;
        int64_t batches = 0;
        double lr = cfg.lr0;
        for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
            size_t b1 = std::min(order.size(), b0 + cfg.batch);
            std::vector<const Image*> imgs;
            std::vector<int> labels;
            for (size_t k = b0; k < b1; ++k) {
                imgs.push_back(&data[order[k]].image);
                labels.push_back(data[order[k]].identity);
            }
            auto x = model::images_to_tensor<float>(imgs, S);
            auto out = net.forward(x, true);
            Tensor<float> dzc, dza;
            double loss_c = arc_c.loss(out.z_c, labels, &dzc);
            double loss_a = arc_a.loss(out.z_a, labels, &dza);
            if (!std::isfinite(loss_c) || !std::isfinite(loss_a))
                throw DivergenceError("training loss is not finite at epoch " +
                                      std::to_string(epoch));
            net.backward(dzc, dza);
            lr = poly_lr(st.global_step, total_steps, cfg);
            opt.step(params, lr);
            net.zero_grads();
            arc_c.visit_params("arcface_c", [](Param<float>& p) { p.grad.zero(); });
            arc_a.visit_params("arcface_a", [](Param<float>& p) { p.grad.zero(); });
            ++st.global_step;
            sum_loss_c += loss_c;
            sum_loss_a += loss_a;
            ++batches;
        }

        double val_tar = validation_tar(net, data, cfg);
        EpochMetrics m;
        m.epoch = epoch;
        m.step = st.global_step;
        m.lr = lr;
        m.loss_cnn_head = sum_loss_c / double(batches);
        m.loss_attn_head = sum_loss_a / double(batches);
        m.val_tar = val_tar;
        result.log.push_back(m);
        if (progress)
            (*progress) << "epoch " << epoch << " loss_c=" << m.loss_cnn_head
                        << " loss_a=" << m.loss_attn_head << " val_tar=" << val_tar << "\n";

        if (val_tar > st.best_val_tar) {
            st.best_val_tar = val_tar;
            st.best_epoch = epoch;
            save_full(best_path);
        }
        st.next_epoch = epoch + 1;
        save_full(last_path);
        save_state(state_path, opt, params, st);
        write_metrics_csv(metrics_path, result.log);

        if (val_tar >= cfg.early_stop_val_tar) break;
        ++epochs_this_run;
        if (cfg.stop_after_epochs > 0 && epochs_this_run >= cfg.stop_after_epochs) break;
    }

    result.best_val_tar = st.best_val_tar;
    result.best_epoch = st.best_epoch;
    result.best_checkpoint = best_path;
    result.last_checkpoint = last_path;
    return result;
}

}  // namespace afr::train
