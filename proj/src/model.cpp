#include "afr/model.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace afr::model {

using nn::Tensor;

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::paper(int num_classes) {
    ModelConfig c;
    c.num_classes = num_classes;
    return c;
}

ModelConfig ModelConfig::tiny(int num_classes) {
    ModelConfig c;
    c.input_size = 224;
    c.stem_channels = 8;
    c.stage_channels = {32, 64, 128, 256};
    c.stage_blocks = {3, 4, 6, 3};
    c.stn_channels = {2, 3, 4, 6, 8};
    c.stn_fc = 4;
    c.attn_depth = 4;
    c.attn_heads = 3;
    c.embed_dim = 96;
    c.embed_hidden = 128;
    c.local_dim = 128;
    c.grid = 14;
    c.num_classes = num_classes;
    return c;
}

ModelConfig ModelConfig::micro(int num_classes) {
    ModelConfig c;
    c.input_size = 32;
    c.stem_channels = 4;
    c.stage_channels = {8, 16, 32, 64};
    c.stage_blocks = {1, 1, 1, 1};
    c.stn_channels = {2, 2, 2, 2, 4};
    c.stn_fc = 4;
    c.attn_depth = 2;
    c.attn_heads = 2;
    c.embed_dim = 16;
    c.embed_hidden = 16;
    c.local_dim = 32;
    c.grid = 2;
    c.num_classes = num_classes;
    return c;
}

void ModelConfig::validate() const {
    if (input_size < 32 || input_size % 32 != 0)
        throw std::invalid_argument("ModelConfig: input_size must be a positive multiple of 32");
    if (input_size / patch != grid)
        throw std::invalid_argument("ModelConfig: input_size / patch must equal grid");
    if (embed_dim % attn_heads != 0)
        throw std::invalid_argument("ModelConfig: embed_dim must be divisible by attn_heads");
    if (local_dim != stage_channels[2])
        throw std::invalid_argument("ModelConfig: local_dim must equal stage_channels[2]");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes >= 2");
    for (int i = 0; i < 4; ++i)
        if (stage_channels[i] % 4 != 0)
            throw std::invalid_argument("ModelConfig: stage channels must be multiples of 4");
    if (!(arcface.margin >= 0 && arcface.margin < std::numbers::pi / 2))
        throw std::invalid_argument("ModelConfig: arcface margin in [0, pi/2)");
    if (arcface.scale <= 0) throw std::invalid_argument("ModelConfig: arcface scale > 0");
}

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "input_size=" << input_size << "\n";
    os << "stem_channels=" << stem_channels << "\n";
    os << "stage_channels=" << stage_channels[0] << "," << stage_channels[1] << ","
       << stage_channels[2] << "," << stage_channels[3] << "\n";
    os << "stage_blocks=" << stage_blocks[0] << "," << stage_blocks[1] << "," << stage_blocks[2]
       << "," << stage_blocks[3] << "\n";
    os << "stn_channels=" << stn_channels[0] << "," << stn_channels[1] << "," << stn_channels[2]
       << "," << stn_channels[3] << "," << stn_channels[4] << "\n";
    os << "stn_fc=" << stn_fc << "\n";
    os << "attn_depth=" << attn_depth << "\n";
    os << "attn_heads=" << attn_heads << "\n";
    os << "embed_dim=" << embed_dim << "\n";
    os << "embed_hidden=" << embed_hidden << "\n";
    os << "local_dim=" << local_dim << "\n";
    os << "grid=" << grid << "\n";
    os << "patch=" << patch << "\n";
    os << "num_classes=" << num_classes << "\n";
    os << "arc_margin=" << util::fmt_double(arcface.margin) << "\n";
    os << "arc_scale=" << util::fmt_double(arcface.scale) << "\n";
    return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    auto ints = [](const std::string& s) {
        std::vector<int> out;
        std::istringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
        return out;
    };
    while (std::getline(in, line)) {
        size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "input_size") c.input_size = std::stoi(v);
        else if (k == "stem_channels") c.stem_channels = std::stoi(v);
        else if (k == "stage_channels") {
            auto a = ints(v);
            std::copy(a.begin(), a.end(), c.stage_channels.begin());
        } else if (k == "stage_blocks") {
            auto a = ints(v);
            std::copy(a.begin(), a.end(), c.stage_blocks.begin());
        } else if (k == "stn_channels") {
            auto a = ints(v);
            std::copy(a.begin(), a.end(), c.stn_channels.begin());
        } else if (k == "stn_fc") c.stn_fc = std::stoi(v);
        else if (k == "attn_depth") c.attn_depth = std::stoi(v);
        else if (k == "attn_heads") c.attn_heads = std::stoi(v);
        else if (k == "embed_dim") c.embed_dim = std::stoi(v);
        else if (k == "embed_hidden") c.embed_hidden = std::stoi(v);
        else if (k == "local_dim") c.local_dim = std::stoi(v);
        else if (k == "grid") c.grid = std::stoi(v);
        else if (k == "patch") c.patch = std::stoi(v);
        else if (k == "num_classes") c.num_classes = std::stoi(v);
        else if (k == "arc_margin") c.arcface.margin = std::stod(v);
        else if (k == "arc_scale") c.arcface.scale = std::stod(v);
        else throw std::invalid_argument("ModelConfig: unknown key " + k);
    }
    c.validate();
    return c;
}

uint64_t ModelConfig::hash() const { return util::fnv1a(serialize()); }

geometry::DescriptorSet LocalFeatureMap::to_descriptor_set(int patch) const {
    geometry::DescriptorSet set;
    set.dim = dim;
    set.data = data;
    set.keypoints = geometry::patch_centers(grid_h, grid_w, patch);
    return set;
}

// ---------------------------------------------------------------------------
// Grid sampler

template <typename T>
void grid_sample_similarity(const T* img, int channels, int side, double scale, double theta,
                            double tx, double ty, T fill, T* out) {
    const int S = side;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double half = (S - 1) / 2.0;
    for (int i = 0; i < S; ++i) {
        double yt = S > 1 ? 2.0 * i / (S - 1) - 1.0 : 0.0;
        for (int j = 0; j < S; ++j) {
            double xt = S > 1 ? 2.0 * j / (S - 1) - 1.0 : 0.0;
            double xs = scale * (ct * xt - st * yt) + tx;
            double ys = scale * (st * xt + ct * yt) + ty;
            double u = (xs + 1.0) * half;
            double v = (ys + 1.0) * half;
            int x0 = int(std::floor(u)), y0 = int(std::floor(v));
            double wx = u - x0, wy = v - y0;
            for (int c = 0; c < channels; ++c) {
                const T* plane = img + size_t(c) * S * S;
                auto px = [&](int xi, int yi) -> double {
                    if (xi < 0 || yi < 0 || xi >= S || yi >= S) return double(fill);
                    return double(plane[size_t(yi) * S + xi]);
                };
                double val = (1 - wy) * ((1 - wx) * px(x0, y0) + wx * px(x0 + 1, y0)) +
                             wy * ((1 - wx) * px(x0, y0 + 1) + wx * px(x0 + 1, y0 + 1));
                out[size_t(c) * S * S + size_t(i) * S + j] = T(val);
            }
        }
    }
}

template <typename T>
void grid_sample_similarity_grad(const T* img, int channels, int side, double scale, double theta,
                                 double tx, double ty, T fill, const T* dout, double grad4[4]) {
    const int S = side;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double half = (S - 1) / 2.0;
    double g_scale = 0, g_theta = 0, g_tx = 0, g_ty = 0;
    for (int i = 0; i < S; ++i) {
        double yt = S > 1 ? 2.0 * i / (S - 1) - 1.0 : 0.0;
        for (int j = 0; j < S; ++j) {
            double xt = S > 1 ? 2.0 * j / (S - 1) - 1.0 : 0.0;
            double xs = scale * (ct * xt - st * yt) + tx;
            double ys = scale * (st * xt + ct * yt) + ty;
            double u = (xs + 1.0) * half;
            double v = (ys + 1.0) * half;
            int x0 = int(std::floor(u)), y0 = int(std::floor(v));
            double wx = u - x0, wy = v - y0;
            double dval_du = 0, dval_dv = 0;
            for (int c = 0; c < channels; ++c) {
                const T* plane = img + size_t(c) * S * S;
                auto px = [&](int xi, int yi) -> double {
                    if (xi < 0 || yi < 0 || xi >= S || yi >= S) return double(fill);
                    return double(plane[size_t(yi) * S + xi]);
                };
                double p00 = px(x0, y0), p10 = px(x0 + 1, y0);
                double p01 = px(x0, y0 + 1), p11 = px(x0 + 1, y0 + 1);
                double d = double(dout[size_t(c) * S * S + size_t(i) * S + j]);
                dval_du += d * ((1 - wy) * (p10 - p00) + wy * (p11 - p01));
                dval_dv += d * ((1 - wx) * (p01 - p00) + wx * (p11 - p10));
            }
            double dxs = dval_du * half;
            double dys = dval_dv * half;
            g_scale += dxs * (ct * xt - st * yt) + dys * (st * xt + ct * yt);
            g_theta += dxs * scale * (-st * xt - ct * yt) + dys * scale * (ct * xt - st * yt);
            g_tx += dxs;
            g_ty += dys;
        }
    }
    grad4[0] = g_scale;
    grad4[1] = g_theta;
    grad4[2] = g_tx;
    grad4[3] = g_ty;
}

template void grid_sample_similarity<float>(const float*, int, int, double, double, double,
                                            double, float, float*);
template void grid_sample_similarity<double>(const double*, int, int, double, double, double,
                                             double, double, double*);
template void grid_sample_similarity_grad<float>(const float*, int, int, double, double, double,
                                                 double, float, const float*, double[4]);
template void grid_sample_similarity_grad<double>(const double*, int, int, double, double,
                                                  double, double, double, const double*,
                                                  double[4]);

// ---------------------------------------------------------------------------
// Bottleneck

template <typename T>
Bottleneck<T>::Bottleneck(int in_c, int out_c, int stride, util::Rng& rng) {
    const int mid = out_c / 4;
    c1_ = nn::Conv2d<T>(in_c, mid, 1, 1, 0, false, rng);
    b1_ = nn::BatchNorm2d<T>(mid);
    c2_ = nn::Conv2d<T>(mid, mid, 3, stride, 1, false, rng);
    b2_ = nn::BatchNorm2d<T>(mid);
    c3_ = nn::Conv2d<T>(mid, out_c, 1, 1, 0, false, rng);
    b3_ = nn::BatchNorm2d<T>(out_c);
    // residual branches start at zero: each block is the identity at init,
    // which speeds up from-scratch training markedly
    b3_.zero_gamma();
    has_down_ = (in_c != out_c || stride != 1);
    if (has_down_) {
        cd_ = nn::Conv2d<T>(in_c, out_c, 1, stride, 0, false, rng);
        bd_ = nn::BatchNorm2d<T>(out_c);
    }
}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x, bool train) {
    Tensor<T> y = r1_.forward(b1_.forward(c1_.forward(x, train), train), train);
    y = r2_.forward(b2_.forward(c2_.forward(y, train), train), train);
    y = b3_.forward(c3_.forward(y, train), train);
    Tensor<T> skip = has_down_ ? bd_.forward(cd_.forward(x, train), train) : x;
    for (size_t i = 0; i < y.numel(); ++i) y.v[i] += skip.v[i];
    return r3_.forward(y, train);
}

template <typename T>
Tensor<T> Bottleneck<T>::backward(const Tensor<T>& dy) {
    Tensor<T> d = r3_.backward(dy);
    Tensor<T> d_main = b3_.backward(d);  // same tensor feeds both branches
    Tensor<T> dx = c3_.backward(d_main);
    dx = r2_.backward(dx);
    dx = b2_.backward(dx);
    dx = c2_.backward(dx);
    dx = r1_.backward(dx);
    dx = b1_.backward(dx);
    dx = c1_.backward(dx);
    if (has_down_) {
        Tensor<T> ds = bd_.backward(d);
        ds = cd_.backward(ds);
        for (size_t i = 0; i < dx.numel(); ++i) dx.v[i] += ds.v[i];
    } else {
        for (size_t i = 0; i < dx.numel(); ++i) dx.v[i] += d.v[i];
    }
    return dx;
}

template <typename T>
void Bottleneck<T>::visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    c1_.visit_params(prefix + ".conv1", fn);
    b1_.visit_params(prefix + ".bn1", fn);
    c2_.visit_params(prefix + ".conv2", fn);
    b2_.visit_params(prefix + ".bn2", fn);
    c3_.visit_params(prefix + ".conv3", fn);
    b3_.visit_params(prefix + ".bn3", fn);
    if (has_down_) {
        cd_.visit_params(prefix + ".down.conv", fn);
        bd_.visit_params(prefix + ".down.bn", fn);
    }
}

template <typename T>
void Bottleneck<T>::visit_stats(
    const std::string& prefix,
    const std::function<void(const std::string&, std::vector<float>&)>& fn) {
    fn(prefix + ".bn1.mean", b1_.running_mean());
    fn(prefix + ".bn1.var", b1_.running_var());
    fn(prefix + ".bn2.mean", b2_.running_mean());
    fn(prefix + ".bn2.var", b2_.running_var());
    fn(prefix + ".bn3.mean", b3_.running_mean());
    fn(prefix + ".bn3.var", b3_.running_var());
    if (has_down_) {
        fn(prefix + ".down.bn.mean", bd_.running_mean());
        fn(prefix + ".down.bn.var", bd_.running_var());
    }
}

// ---------------------------------------------------------------------------
// SpatialAlignment

template <typename T>
SpatialAlignment<T>::SpatialAlignment(const ModelConfig& cfg, util::Rng& rng) {
    side_ = cfg.input_size;
    const auto& ch = cfg.stn_channels;
    const int ks[5] = {7, 5, 3, 3, 3};
    int in_c = 3;
    for (int i = 0; i < 5; ++i) {
        convs_[i] = nn::Conv2d<T>(in_c, ch[i], ks[i], 1, ks[i] / 2, true, rng);
        pools_[i] = nn::MaxPool2d<T>(2, 2, 0);
        in_c = ch[i];
    }
    const int flat = ch[4] * (side_ / 32) * (side_ / 32);
    fc1_ = nn::Linear<T>(flat, cfg.stn_fc, rng);
    fc2_ = nn::Linear<T>(cfg.stn_fc, 4, rng);
    fc2_.zero_init_with_bias({T(1), T(0), T(0), T(0)});
}

template <typename T>
typename SpatialAlignment<T>::Out SpatialAlignment<T>::forward(
    const nn::Tensor<T>& x, bool train,
    std::vector<std::pair<std::string, std::vector<int>>>* ledger) {
    const int N = x.dim(0);
    Tensor<T> h = x;
    for (int i = 0; i < 5; ++i) {
        h = convs_[i].forward(h, train);
        if (ledger)
            ledger->push_back({"Loc" + std::to_string(2 * i + 1), {h.dim(1), h.dim(2), h.dim(3)}});
        h = relus_[i].forward(h, train);
        h = pools_[i].forward(h, train);
        if (ledger)
            ledger->push_back({"Loc" + std::to_string(2 * i + 2), {h.dim(1), h.dim(2), h.dim(3)}});
    }
    h.shape = {N, int(h.numel() / N)};
    h = fc1_.forward(h, train);
    if (ledger) ledger->push_back({"Loc11", {h.dim(1)}});
    h = fc_relu_.forward(h, train);
    Tensor<T> raw = fc2_.forward(h, train);
    if (ledger) ledger->push_back({"Loc12", {raw.dim(1)}});

    Out out;
    out.params = Tensor<T>({N, 4});
    out.aligned = Tensor<T>(x.shape);
    const int S = side_;
    util::parallel_for(N, [&](int64_t n) {
        double p0 = raw.v[n * 4 + 0], p1 = raw.v[n * 4 + 1];
        double p2 = raw.v[n * 4 + 2], p3 = raw.v[n * 4 + 3];
        double scale = std::exp(p0 - 1.0);
        double theta = p1;
        double tx = std::tanh(p2), ty = std::tanh(p3);
        out.params.v[n * 4 + 0] = T(scale);
        out.params.v[n * 4 + 1] = T(theta);
        out.params.v[n * 4 + 2] = T(tx);
        out.params.v[n * 4 + 3] = T(ty);
        grid_sample_similarity(x.data() + n * size_t(3) * S * S, 3, S, scale, theta, tx, ty,
                               T(1), out.aligned.data() + n * size_t(3) * S * S);
    });
    if (train) {
        x_cache_ = x;
        raw_cache_ = raw;
        mapped_cache_ = out.params;
    }
    return out;
}

template <typename T>
void SpatialAlignment<T>::backward(const nn::Tensor<T>& d_aligned) {
    const int N = d_aligned.dim(0), S = side_;
    Tensor<T> draw({N, 4});
    util::parallel_for(N, [&](int64_t n) {
        double g4[4];
        double scale = mapped_cache_.v[n * 4 + 0], theta = mapped_cache_.v[n * 4 + 1];
        double tx = mapped_cache_.v[n * 4 + 2], ty = mapped_cache_.v[n * 4 + 3];
        grid_sample_similarity_grad(x_cache_.data() + n * size_t(3) * S * S, 3, S, scale, theta,
                                    tx, ty, T(1), d_aligned.data() + n * size_t(3) * S * S, g4);
        // chain through the (exp, id, tanh, tanh) mapping
        draw.v[n * 4 + 0] = T(g4[0] * scale);
        draw.v[n * 4 + 1] = T(g4[1]);
        draw.v[n * 4 + 2] = T(g4[2] * (1.0 - tx * tx));
        draw.v[n * 4 + 3] = T(g4[3] * (1.0 - ty * ty));
    });
    Tensor<T> d = fc2_.backward(draw);
    d = fc_relu_.backward(d);
    d = fc1_.backward(d);
    const int flat_h = side_ / 32;
    d.shape = {N, int(d.numel() / (size_t(N) * flat_h * flat_h)), flat_h, flat_h};
    for (int i = 4; i >= 0; --i) {
        d = pools_[i].backward(d);
        d = relus_[i].backward(d);
        d = convs_[i].backward(d);
    }
    // input image is a leaf; gradient dropped
}

template <typename T>
void SpatialAlignment<T>::visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    for (int i = 0; i < 5; ++i)
        convs_[i].visit_params(prefix + ".conv" + std::to_string(i + 1), fn);
    fc1_.visit_params(prefix + ".fc1", fn);
    fc2_.visit_params(prefix + ".fc2", fn);
}

template <typename T>
nn::Tensor<T> SpatialAlignment<T>::apply_params(const nn::Tensor<T>& x, const AlignmentParams& p) {
    const int N = x.dim(0), C = x.dim(1), S = x.dim(2);
    Tensor<T> out(x.shape);
    const double theta = p.theta_deg * std::numbers::pi / 180.0;
    for (int n = 0; n < N; ++n)
        grid_sample_similarity(x.data() + size_t(n) * C * S * S, C, S, p.scale, theta, p.tx, p.ty,
                               T(1), out.data() + size_t(n) * C * S * S);
    return out;
}

// ---------------------------------------------------------------------------
// L2NormRows

template <typename T>
Tensor<T> L2NormRows<T>::forward(const Tensor<T>& x, bool train) {
    const int R = x.dim(0), D = x.dim(1);
    Tensor<T> y(x.shape);
    std::vector<double> norms(R);
    for (int r = 0; r < R; ++r) {
        const T* xr = x.data() + size_t(r) * D;
        double n2 = 0;
        for (int i = 0; i < D; ++i) n2 += double(xr[i]) * xr[i];
        double norm = std::sqrt(std::max(n2, 1e-24));
        norms[r] = norm;
        for (int i = 0; i < D; ++i) y.v[size_t(r) * D + i] = T(xr[i] / norm);
    }
    if (train) {
        y_cache_ = y;
        norms_ = std::move(norms);
    }
    return y;
}

template <typename T>
Tensor<T> L2NormRows<T>::backward(const Tensor<T>& dy) {
    const int R = dy.dim(0), D = dy.dim(1);
    Tensor<T> dx(dy.shape);
    for (int r = 0; r < R; ++r) {
        const T* yr = y_cache_.data() + size_t(r) * D;
        const T* dr = dy.data() + size_t(r) * D;
        double dot = 0;
        for (int i = 0; i < D; ++i) dot += double(yr[i]) * dr[i];
        for (int i = 0; i < D; ++i)
            dx.v[size_t(r) * D + i] = T((double(dr[i]) - double(yr[i]) * dot) / norms_[r]);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// ArcFace

std::vector<double> arcface_logits(const std::vector<double>& z,
                                   const std::vector<std::vector<double>>& w_rows, int label,
                                   double margin, double scale) {
    if (!(margin >= 0 && margin < std::numbers::pi / 2))
        throw std::invalid_argument("arcface_logits: margin in [0, pi/2)");
    auto check_unit = [](const std::vector<double>& v, const char* who) {
        double n2 = 0;
        for (double x : v) n2 += x * x;
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-4)
            throw std::invalid_argument(std::string("arcface_logits: ") + who + " not unit norm");
    };
    check_unit(z, "embedding");
    if (label < 0 || label >= int(w_rows.size()))
        throw std::invalid_argument("arcface_logits: label out of range");
    std::vector<double> logits(w_rows.size());
    for (size_t j = 0; j < w_rows.size(); ++j) {
        check_unit(w_rows[j], "class weight");
        if (w_rows[j].size() != z.size())
            throw std::invalid_argument("arcface_logits: dimension mismatch");
        double cos = 0;
        for (size_t i = 0; i < z.size(); ++i) cos += z[i] * w_rows[j][i];
        cos = std::clamp(cos, -1.0, 1.0);
        if (int(j) == label) {
            double th = std::acos(cos);
            logits[j] = scale * std::cos(th + margin);
        } else {
            logits[j] = scale * cos;
        }
    }
    return logits;
}

template <typename T>
ArcFaceHead<T>::ArcFaceHead(int num_classes, int dim, const ArcFaceParams& p, util::Rng& rng)
    : classes_(num_classes), dim_(dim), p_(p) {
    w_.init_shape({num_classes, dim});
    std::normal_distribution<double> dist(0.0, 0.01);
    for (auto& x : w_.value.v) x = T(dist(rng));
}

template <typename T>
double ArcFaceHead<T>::loss(const Tensor<T>& z, const std::vector<int>& labels, Tensor<T>* dz) {
    const int N = z.dim(0), D = z.dim(1);
    if (int(labels.size()) != N) throw std::invalid_argument("ArcFaceHead: labels size mismatch");

    // row-normalized class weights
    std::vector<double> wn(size_t(classes_) * D), wnorm(classes_);
    for (int j = 0; j < classes_; ++j) {
        double n2 = 0;
        for (int i = 0; i < D; ++i) n2 += double(w_.value.v[size_t(j) * D + i]) *
                                          double(w_.value.v[size_t(j) * D + i]);
        double norm = std::sqrt(std::max(n2, 1e-24));
        wnorm[j] = norm;
        for (int i = 0; i < D; ++i) wn[size_t(j) * D + i] = double(w_.value.v[size_t(j) * D + i]) / norm;
    }

    const double s = p_.scale, m = p_.margin;
    double total = 0;
    if (dz) *dz = Tensor<T>({N, D});
    std::vector<double> dwn(size_t(classes_) * D, 0.0);

    std::vector<double> logits(classes_), probs(classes_), dcos(classes_);
    for (int n = 0; n < N; ++n) {
        const int y = labels[n];
        if (y < 0 || y >= classes_) throw std::invalid_argument("ArcFaceHead: label out of range");
        std::vector<double> cos(classes_);
        for (int j = 0; j < classes_; ++j) {
            double d = 0;
            for (int i = 0; i < D; ++i) d += double(z.v[size_t(n) * D + i]) * wn[size_t(j) * D + i];
            cos[j] = std::clamp(d, -1.0 + 1e-7, 1.0 - 1e-7);
            logits[j] = s * cos[j];
        }
        double th = std::acos(cos[y]);
        logits[y] = s * std::cos(th + m);

        double mx = *std::max_element(logits.begin(), logits.end());
        double sum = 0;
        for (int j = 0; j < classes_; ++j) {
            probs[j] = std::exp(logits[j] - mx);
            sum += probs[j];
        }
        for (int j = 0; j < classes_; ++j) probs[j] /= sum;
        total += -std::log(std::max(probs[y], 1e-300));

        if (!dz) continue;
        for (int j = 0; j < classes_; ++j) {
            double dlogit = (probs[j] - (j == y ? 1.0 : 0.0)) / N;
            double dc = dlogit * s;
            if (j == y) {
                double sin_th = std::sqrt(std::max(1e-12, 1.0 - cos[y] * cos[y]));
                dc = dlogit * s * (std::sin(th + m) / sin_th);
            }
            dcos[j] = dc;
        }
        for (int j = 0; j < classes_; ++j) {
            for (int i = 0; i < D; ++i) {
                (*dz).v[size_t(n) * D + i] += T(dcos[j] * wn[size_t(j) * D + i]);
                dwn[size_t(j) * D + i] += dcos[j] * double(z.v[size_t(n) * D + i]);
            }
        }
    }
    if (dz) {
        // through the row normalization of w
        for (int j = 0; j < classes_; ++j) {
            double dot = 0;
            for (int i = 0; i < D; ++i) dot += dwn[size_t(j) * D + i] * wn[size_t(j) * D + i];
            for (int i = 0; i < D; ++i)
                w_.grad.v[size_t(j) * D + i] +=
                    T((dwn[size_t(j) * D + i] - wn[size_t(j) * D + i] * dot) / wnorm[j]);
        }
    }
    return total / N;
}

template <typename T>
void ArcFaceHead<T>::visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn) {
    w_.name = prefix + ".weight";
    fn(w_);
}

// ---------------------------------------------------------------------------
// AfrNet

template <typename T>
AfrNet<T>::AfrNet(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    util::Rng rng(init_seed);
    stn_ = SpatialAlignment<T>(cfg_, rng);
    stem_ = nn::Conv2d<T>(3, cfg.stem_channels, 7, 2, 3, false, rng);
    stem_bn_ = nn::BatchNorm2d<T>(cfg.stem_channels);
    stem_pool_ = nn::MaxPool2d<T>(3, 2, 1);

    auto make_stage = [&](std::vector<Bottleneck<T>>& stage, int in_c, int out_c, int blocks,
                          int stride) {
        stage.emplace_back(in_c, out_c, stride, rng);
        for (int i = 1; i < blocks; ++i) stage.emplace_back(out_c, out_c, 1, rng);
    };
    make_stage(stage1_, cfg.stem_channels, cfg.stage_channels[0], cfg.stage_blocks[0], 1);
    make_stage(stage2_, cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_blocks[1], 2);
    make_stage(stage3_, cfg.stage_channels[1], cfg.stage_channels[2], cfg.stage_blocks[2], 2);
    make_stage(stage4_, cfg.stage_channels[2], cfg.stage_channels[3], cfg.stage_blocks[3], 2);

    fc_c_ = nn::Linear<T>(cfg.stage_channels[3], cfg.embed_dim, rng, 0.02);

    embed_fc1_ = nn::Linear<T>(cfg.local_dim, cfg.embed_hidden, rng, 0.02);
    embed_fc2_ = nn::Linear<T>(cfg.embed_hidden, cfg.embed_dim, rng, 0.02);
    const int T_tokens = cfg.grid * cfg.grid + 1;
    cls_token_.init_shape({cfg.embed_dim});
    cls_token_.decay = false;
    nn::trunc02_init(cls_token_.value, rng);
    pos_embed_.init_shape({T_tokens, cfg.embed_dim});
    pos_embed_.decay = false;
    nn::trunc02_init(pos_embed_.value, rng);
    blocks_.reserve(cfg.attn_depth);
    for (int i = 0; i < cfg.attn_depth; ++i)
        blocks_.emplace_back(cfg.embed_dim, cfg.attn_heads, 4 * cfg.embed_dim, rng);
    final_ln_ = nn::LayerNorm<T>(cfg.embed_dim);
    fc_a_ = nn::Linear<T>(cfg.embed_dim, cfg.embed_dim, rng, 0.02);
}

template <typename T>
typename AfrNet<T>::Output AfrNet<T>::forward(const Tensor<T>& x, bool train) {
    const int N = x.dim(0), S = cfg_.input_size;
    x.require_shape({N, 3, S, S}, "AfrNet");
    batch_ = N;
    ledger_.clear();
    auto* led = record_shapes_ ? &ledger_ : nullptr;
    if (led) led->push_back({"Input", {3, S, S}});

    auto stn_out = stn_.forward(x, train, led);

    Tensor<T> h = stem_.forward(stn_out.aligned, train);
    if (led) led->push_back({"Conv1", {h.dim(1), h.dim(2), h.dim(3)}});
    h = stem_bn_.forward(h, train);
    h = stem_relu_.forward(h, train);
    h = stem_pool_.forward(h, train);
    for (auto& b : stage1_) h = b.forward(h, train);
    if (led) led->push_back({"Conv2", {h.dim(1), h.dim(2), h.dim(3)}});
    for (auto& b : stage2_) h = b.forward(h, train);
    if (led) led->push_back({"Conv3", {h.dim(1), h.dim(2), h.dim(3)}});
    for (auto& b : stage3_) h = b.forward(h, train);
    if (led) led->push_back({"Conv4", {h.dim(1), h.dim(2), h.dim(3)}});
    Tensor<T> f4 = h;  // (N, local_dim, g, g)

    // CNN head
    for (auto& b : stage4_) h = b.forward(h, train);
    if (led) led->push_back({"Conv5", {h.dim(1), h.dim(2), h.dim(3)}});
    gap_shape_ = h.shape;
    const int C5 = h.dim(1), P5 = h.dim(2) * h.dim(3);
    Tensor<T> pooled({N, C5});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C5; ++c) {
            const T* src = h.data() + (size_t(n) * C5 + c) * P5;
            double s = 0;
            for (int i = 0; i < P5; ++i) s += double(src[i]);
            pooled.v[size_t(n) * C5 + c] = T(s / P5);
        }
    Tensor<T> zc_raw = fc_c_.forward(pooled, train);
    if (led) led->push_back({"Zc", {zc_raw.dim(1)}});

    // attention head: cells -> tokens
    const int g = cfg_.grid, Tn = g * g, D = cfg_.embed_dim, C4 = cfg_.local_dim;
    Tensor<T> cells({N * Tn, C4});
    util::parallel_for(N, [&](int64_t n) {
        for (int t = 0; t < Tn; ++t) {
            int hh = t / g, ww = t % g;
            for (int c = 0; c < C4; ++c)
                cells.v[(size_t(n) * Tn + t) * C4 + c] =
                    f4.v[((size_t(n) * C4 + c) * g + hh) * g + ww];
        }
    });
    Tensor<T> emb = embed_fc1_.forward(cells, train, N);
    emb = embed_gelu_.forward(emb, train);
    emb = embed_fc2_.forward(emb, train, N);
    if (led) led->push_back({"Embed", {D, g, g}});

    Tensor<T> tokens({N, Tn + 1, D});
    util::parallel_for(N, [&](int64_t n) {
        for (int i = 0; i < D; ++i)
            tokens.v[size_t(n) * (Tn + 1) * D + i] = cls_token_.value.v[i] + pos_embed_.value.v[i];
        for (int t = 0; t < Tn; ++t)
            for (int i = 0; i < D; ++i)
                tokens.v[(size_t(n) * (Tn + 1) + t + 1) * D + i] =
                    emb.v[(size_t(n) * Tn + t) * D + i] + pos_embed_.value.v[size_t(t + 1) * D + i];
    });
    if (led) led->push_back({"PosEmbed", {D, Tn + 1}});
    for (size_t bi = 0; bi < blocks_.size(); ++bi) {
        tokens = blocks_[bi].forward(tokens, train);
        if (led) led->push_back({"Attn" + std::to_string(bi + 1), {D, Tn + 1}});
    }
    Tensor<T> rows = tokens;
    rows.shape = {N * (Tn + 1), D};
    rows = final_ln_.forward(rows, train, N);

    Tensor<T> cls({N, D});
    Tensor<T> patch_tokens({N, Tn, D});
    for (int n = 0; n < N; ++n) {
        std::copy(rows.data() + size_t(n) * (Tn + 1) * D, rows.data() + (size_t(n) * (Tn + 1) + 1) * D,
                  cls.data() + size_t(n) * D);
        std::copy(rows.data() + (size_t(n) * (Tn + 1) + 1) * D,
                  rows.data() + (size_t(n) + 1) * (Tn + 1) * D,
                  patch_tokens.data() + size_t(n) * Tn * D);
    }
    Tensor<T> za_raw = fc_a_.forward(cls, train);
    if (led) led->push_back({"Za", {za_raw.dim(1)}});

    Output out;
    out.z_c = norm_c_.forward(zc_raw, train);
    out.z_a = norm_a_.forward(za_raw, train);
    out.align = stn_out.params;
    out.tokens = patch_tokens;

    // per-cell normalized conv4 descriptors (not part of the training graph)
    out.locals = Tensor<T>({N, Tn, C4});
    util::parallel_for(N, [&](int64_t n) {
        for (int t = 0; t < Tn; ++t) {
            int hh = t / g, ww = t % g;
            double n2 = 0;
            for (int c = 0; c < C4; ++c) {
                double v = f4.v[((size_t(n) * C4 + c) * g + hh) * g + ww];
                n2 += v * v;
            }
            double inv = 1.0 / std::sqrt(std::max(n2, 1e-24));
            for (int c = 0; c < C4; ++c)
                out.locals.v[(size_t(n) * Tn + t) * C4 + c] =
                    T(f4.v[((size_t(n) * C4 + c) * g + hh) * g + ww] * inv);
        }
    });
    return out;
}

template <typename T>
void AfrNet<T>::backward(const Tensor<T>& dz_c, const Tensor<T>& dz_a) {
    const int N = batch_, g = cfg_.grid, Tn = g * g, D = cfg_.embed_dim, C4 = cfg_.local_dim;

    // CNN head
    Tensor<T> d_zc_raw = norm_c_.backward(dz_c);
    Tensor<T> d_pooled = fc_c_.backward(d_zc_raw);
    const int C5 = gap_shape_[1], H5 = gap_shape_[2], W5 = gap_shape_[3];
    Tensor<T> d_conv5(gap_shape_);
    const int P5 = H5 * W5;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C5; ++c) {
            T gval = T(double(d_pooled.v[size_t(n) * C5 + c]) / P5);
            T* dst = d_conv5.data() + (size_t(n) * C5 + c) * P5;
            for (int i = 0; i < P5; ++i) dst[i] = gval;
        }
    Tensor<T> d_f4 = d_conv5;
    for (int i = int(stage4_.size()) - 1; i >= 0; --i) d_f4 = stage4_[i].backward(d_f4);

    // attention head
    Tensor<T> d_za_raw = norm_a_.backward(dz_a);
    Tensor<T> d_cls = fc_a_.backward(d_za_raw);
    Tensor<T> d_rows({N * (Tn + 1), D});
    for (int n = 0; n < N; ++n)
        std::copy(d_cls.data() + size_t(n) * D, d_cls.data() + size_t(n + 1) * D,
                  d_rows.data() + size_t(n) * (Tn + 1) * D);
    Tensor<T> d_tokens = final_ln_.backward(d_rows);
    d_tokens.shape = {N, Tn + 1, D};
    for (int i = int(blocks_.size()) - 1; i >= 0; --i) d_tokens = blocks_[i].backward(d_tokens);

    // positional embeddings, class token, per-cell embeddings
    Tensor<T> d_emb({N * Tn, D});
    for (int n = 0; n < N; ++n) {
        for (int i = 0; i < D; ++i)
            cls_token_.grad.v[i] += d_tokens.v[size_t(n) * (Tn + 1) * D + i];
        for (int t = 0; t < Tn + 1; ++t)
            for (int i = 0; i < D; ++i)
                pos_embed_.grad.v[size_t(t) * D + i] +=
                    d_tokens.v[(size_t(n) * (Tn + 1) + t) * D + i];
        for (int t = 0; t < Tn; ++t)
            std::copy(d_tokens.data() + (size_t(n) * (Tn + 1) + t + 1) * D,
                      d_tokens.data() + (size_t(n) * (Tn + 1) + t + 2) * D,
                      d_emb.data() + (size_t(n) * Tn + t) * D);
    }
    Tensor<T> d_cells = embed_fc2_.backward(d_emb);
    d_cells = embed_gelu_.backward(d_cells);
    d_cells = embed_fc1_.backward(d_cells);

    // add the attention branch gradient into the conv4 gradient
    util::parallel_for(N, [&](int64_t n) {
        for (int t = 0; t < Tn; ++t) {
            int hh = t / g, ww = t % g;
            for (int c = 0; c < C4; ++c)
                d_f4.v[((size_t(n) * C4 + c) * g + hh) * g + ww] +=
                    d_cells.v[(size_t(n) * Tn + t) * C4 + c];
        }
    });

    for (int i = int(stage3_.size()) - 1; i >= 0; --i) d_f4 = stage3_[i].backward(d_f4);
    for (int i = int(stage2_.size()) - 1; i >= 0; --i) d_f4 = stage2_[i].backward(d_f4);
    for (int i = int(stage1_.size()) - 1; i >= 0; --i) d_f4 = stage1_[i].backward(d_f4);
    d_f4 = stem_pool_.backward(d_f4);
    d_f4 = stem_relu_.backward(d_f4);
    d_f4 = stem_bn_.backward(d_f4);
    Tensor<T> d_aligned = stem_.backward(d_f4);
    stn_.backward(d_aligned);
}

template <typename T>
void AfrNet<T>::visit_params(const nn::ParamVisitor<T>& fn) {
    stn_.visit_params("stn", fn);
    stem_.visit_params("stem.conv", fn);
    stem_bn_.visit_params("stem.bn", fn);
    auto stage = [&](std::vector<Bottleneck<T>>& s, const std::string& name) {
        for (size_t i = 0; i < s.size(); ++i)
            s[i].visit_params(name + "." + std::to_string(i), fn);
    };
    stage(stage1_, "stage1");
    stage(stage2_, "stage2");
    stage(stage3_, "stage3");
    stage(stage4_, "stage4");
    fc_c_.visit_params("head_c.fc", fn);
    embed_fc1_.visit_params("head_a.embed.fc1", fn);
    embed_fc2_.visit_params("head_a.embed.fc2", fn);
    cls_token_.name = "head_a.cls";
    fn(cls_token_);
    pos_embed_.name = "head_a.pos";
    fn(pos_embed_);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].visit_params("head_a.block" + std::to_string(i), fn);
    final_ln_.visit_params("head_a.ln", fn);
    fc_a_.visit_params("head_a.fc", fn);
}

template <typename T>
void AfrNet<T>::visit_stats(
    const std::function<void(const std::string&, std::vector<float>&)>& fn) {
    fn("stem.bn.mean", stem_bn_.running_mean());
    fn("stem.bn.var", stem_bn_.running_var());
    auto stage = [&](std::vector<Bottleneck<T>>& s, const std::string& name) {
        for (size_t i = 0; i < s.size(); ++i)
            s[i].visit_stats(name + "." + std::to_string(i), fn);
    };
    stage(stage1_, "stage1");
    stage(stage2_, "stage2");
    stage(stage3_, "stage3");
    stage(stage4_, "stage4");
}

template <typename T>
void AfrNet<T>::zero_grads() {
    visit_params([](nn::Param<T>& p) { p.grad.zero(); });
}

// ---------------------------------------------------------------------------
// Preprocessing

Image preprocess_to_canvas(const Image& img, int input_size) {
    return square_pad_resize(img, input_size, 255);
}

template <typename T>
nn::Tensor<T> images_to_tensor(const std::vector<const Image*>& imgs, int input_size) {
    const int N = int(imgs.size()), S = input_size;
    Tensor<T> x({N, 3, S, S});
    for (int n = 0; n < N; ++n) {
        const Image* im = imgs[n];
        if (im->width != S || im->height != S)
            throw std::invalid_argument("images_to_tensor: image must be preprocessed to size");
        for (int i = 0; i < S * S; ++i) {
            T v = T((double(im->px[i]) / 255.0 - 0.5) / 0.5);
            x.v[(size_t(n) * 3 + 0) * S * S + i] = v;
            x.v[(size_t(n) * 3 + 1) * S * S + i] = v;
            x.v[(size_t(n) * 3 + 2) * S * S + i] = v;
        }
    }
    return x;
}

template nn::Tensor<float> images_to_tensor<float>(const std::vector<const Image*>&, int);
template nn::Tensor<double> images_to_tensor<double>(const std::vector<const Image*>&, int);

template class Bottleneck<float>;
template class Bottleneck<double>;
template class SpatialAlignment<float>;
template class SpatialAlignment<double>;
template class L2NormRows<float>;
template class L2NormRows<double>;
template class ArcFaceHead<float>;
template class ArcFaceHead<double>;
template class AfrNet<float>;
template class AfrNet<double>;

}  // namespace afr::model
