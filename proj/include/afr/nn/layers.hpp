#pragma once

#include <cmath>
#include <random>

#include "afr/nn/tensor.hpp"
#include "afr/util.hpp"

// Layer modules with explicit forward/backward. Conventions:
//  - activations are NCHW (4d) or (N, T, D) token tensors (3d) or (N, D) (2d);
//  - forward(x, train): caches are retained only when train is true;
//  - backward(dy) consumes the caches of the latest train forward, accumulates
//    parameter gradients, and returns the input gradient;
//  - every data-parallel loop writes disjoint slots and every cross-sample
//    reduction runs in sample order, so results are identical for any thread
//    count.

namespace afr::nn {

template <typename T>
void he_normal_init(Tensor<T>& w, int fan_in, util::Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
    for (auto& x : w.v) x = T(dist(rng));
}

template <typename T>
void trunc02_init(Tensor<T>& w, util::Rng& rng) {
    std::normal_distribution<double> dist(0.0, 0.02);
    for (auto& x : w.v) {
        double d;
        do {
            d = dist(rng);
        } while (std::abs(d) > 0.04);  // two sigma
        x = T(d);
    }
}

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_c, int out_c, int k, int stride, int pad, bool bias, util::Rng& rng)
        : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad), has_bias_(bias) {
        w_.init_shape({out_c, in_c * k * k});
        he_normal_init(w_.value, in_c * k * k, rng);
        if (bias) {
            b_.init_shape({out_c});
            b_.decay = false;
        }
    }

    int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        x.require_shape({N, in_c_, H, W}, "Conv2d");
        const int Ho = out_size(H), Wo = out_size(W);
        Tensor<T> y({N, out_c_, Ho, Wo});
        const size_t K = size_t(in_c_) * k_ * k_, P = size_t(Ho) * Wo;
        util::parallel_for(N, [&](int64_t n) {
            std::vector<T> cols(K * P);
            im2col(x.data() + n * x.numel() / N, H, W, cols.data());
            MapCM<T> wm(w_.value.data(), out_c_, int(K));
            MapCM<T> cm(cols.data(), int(K), int(P));
            MapM<T> ym(y.data() + n * y.numel() / N, out_c_, int(P));
            ym.noalias() = wm * cm;
            if (has_bias_)
                for (int c = 0; c < out_c_; ++c) ym.row(c).array() += b_.value.v[c];
        });
        if (train) x_cache_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const Tensor<T>& x = x_cache_;
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const int Ho = out_size(H), Wo = out_size(W);
        const size_t K = size_t(in_c_) * k_ * k_, P = size_t(Ho) * Wo;
        Tensor<T> dx({N, in_c_, H, W});
        std::vector<Tensor<T>> dw_n(N);
        std::vector<std::vector<T>> db_n(N);
        util::parallel_for(N, [&](int64_t n) {
            std::vector<T> cols(K * P);
            im2col(x.data() + n * x.numel() / N, H, W, cols.data());
            MapCM<T> cm(cols.data(), int(K), int(P));
            MapCM<T> dym(dy.data() + n * dy.numel() / N, out_c_, int(P));
            dw_n[n] = Tensor<T>({out_c_, int(K)});
            MapM<T> dwm(dw_n[n].data(), out_c_, int(K));
            dwm.noalias() = dym * cm.transpose();
            if (has_bias_) {
                db_n[n].resize(out_c_);
                for (int c = 0; c < out_c_; ++c) db_n[n][c] = dym.row(c).sum();
            }
            std::vector<T> dcols(K * P);
            MapM<T> dcm(dcols.data(), int(K), int(P));
            MapCM<T> wm(w_.value.data(), out_c_, int(K));
            dcm.noalias() = wm.transpose() * dym;
            col2im(dcols.data(), H, W, dx.data() + n * dx.numel() / N);
        });
        for (int n = 0; n < N; ++n) {  // ordered reduction
            for (size_t i = 0; i < w_.grad.numel(); ++i) w_.grad.v[i] += dw_n[n].v[i];
            if (has_bias_)
                for (int c = 0; c < out_c_; ++c) b_.grad.v[c] += db_n[n][c];
        }
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        w_.name = prefix + ".weight";
        fn(w_);
        if (has_bias_) {
            b_.name = prefix + ".bias";
            fn(b_);
        }
    }

private:
    void im2col(const T* img, int H, int W, T* cols) const {
        const int Ho = out_size(H), Wo = out_size(W);
        const size_t P = size_t(Ho) * Wo;
        for (int c = 0; c < in_c_; ++c) {
            const T* src = img + size_t(c) * H * W;
            for (int ky = 0; ky < k_; ++ky) {
                for (int kx = 0; kx < k_; ++kx) {
                    T* dst = cols + (size_t(c) * k_ * k_ + size_t(ky) * k_ + kx) * P;
                    for (int ho = 0; ho < Ho; ++ho) {
                        int iy = ho * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= H) {
                            std::fill(dst, dst + Wo, T(0));
                            dst += Wo;
                            continue;
                        }
                        for (int wo = 0; wo < Wo; ++wo) {
                            int ix = wo * stride_ - pad_ + kx;
                            *dst++ = (ix >= 0 && ix < W) ? src[size_t(iy) * W + ix] : T(0);
                        }
                    }
                }
            }
        }
    }

    void col2im(const T* cols, int H, int W, T* img) const {
        const int Ho = out_size(H), Wo = out_size(W);
        const size_t P = size_t(Ho) * Wo;
        for (int c = 0; c < in_c_; ++c) {
            T* dst = img + size_t(c) * H * W;
            for (int ky = 0; ky < k_; ++ky) {
                for (int kx = 0; kx < k_; ++kx) {
                    const T* src = cols + (size_t(c) * k_ * k_ + size_t(ky) * k_ + kx) * P;
                    for (int ho = 0; ho < Ho; ++ho, src += Wo) {
                        int iy = ho * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int wo = 0; wo < Wo; ++wo) {
                            int ix = wo * stride_ - pad_ + kx;
                            if (ix >= 0 && ix < W) dst[size_t(iy) * W + ix] += src[wo];
                        }
                    }
                }
            }
        }
    }

    int in_c_ = 0, out_c_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
    bool has_bias_ = false;
    Param<T> w_, b_;
    Tensor<T> x_cache_;
};

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels) : c_(channels) {
        gamma_.init_shape({channels});
        beta_.init_shape({channels});
        gamma_.decay = beta_.decay = false;
        std::fill(gamma_.value.v.begin(), gamma_.value.v.end(), T(1));
        running_mean_.assign(channels, 0.0);
        running_var_.assign(channels, 1.0);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        x.require_shape({N, c_, H, W}, "BatchNorm2d");
        const size_t plane = size_t(H) * W, sample = size_t(c_) * plane;
        Tensor<T> y(x.shape);

        if (!train) {
            util::parallel_for(N, [&](int64_t n) {
                for (int c = 0; c < c_; ++c) {
                    double inv = 1.0 / std::sqrt(running_var_[c] + eps_);
                    double g = double(gamma_.value.v[c]) * inv;
                    double b = double(beta_.value.v[c]) - g * running_mean_[c];
                    const T* xs = x.data() + n * sample + c * plane;
                    T* ys = y.data() + n * sample + c * plane;
                    for (size_t i = 0; i < plane; ++i) ys[i] = T(g * xs[i] + b);
                }
            });
            return y;
        }

        // batch statistics; per-sample partial sums reduced in sample order
        std::vector<double> sum(size_t(N) * c_), sum2(size_t(N) * c_);
        util::parallel_for(N, [&](int64_t n) {
            for (int c = 0; c < c_; ++c) {
                const T* xs = x.data() + n * sample + c * plane;
                double s = 0, s2 = 0;
                for (size_t i = 0; i < plane; ++i) {
                    double v = xs[i];
                    s += v;
                    s2 += v * v;
                }
                sum[n * c_ + c] = s;
                sum2[n * c_ + c] = s2;
            }
        });
        mean_.assign(c_, 0.0);
        invstd_.assign(c_, 0.0);
        const double cnt = double(N) * plane;
        for (int c = 0; c < c_; ++c) {
            double s = 0, s2 = 0;
            for (int n = 0; n < N; ++n) {
                s += sum[size_t(n) * c_ + c];
                s2 += sum2[size_t(n) * c_ + c];
            }
            double mean = s / cnt;
            double var = std::max(0.0, s2 / cnt - mean * mean);
            mean_[c] = mean;
            invstd_[c] = 1.0 / std::sqrt(var + eps_);
            running_mean_[c] = float((1 - momentum_) * running_mean_[c] + momentum_ * mean);
            double unbiased = cnt > 1 ? var * cnt / (cnt - 1) : var;
            running_var_[c] = float((1 - momentum_) * running_var_[c] + momentum_ * unbiased);
        }
        xhat_ = Tensor<T>(x.shape);
        util::parallel_for(N, [&](int64_t n) {
            for (int c = 0; c < c_; ++c) {
                const T* xs = x.data() + n * sample + c * plane;
                T* hs = xhat_.data() + n * sample + c * plane;
                T* ys = y.data() + n * sample + c * plane;
                double m = mean_[c], inv = invstd_[c];
                double g = gamma_.value.v[c], b = beta_.value.v[c];
                for (size_t i = 0; i < plane; ++i) {
                    double h = (xs[i] - m) * inv;
                    hs[i] = T(h);
                    ys[i] = T(g * h + b);
                }
            }
        });
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int N = dy.dim(0), H = dy.dim(2), W = dy.dim(3);
        const size_t plane = size_t(H) * W, sample = size_t(c_) * plane;
        const double cnt = double(N) * plane;

        std::vector<double> s_dy(size_t(N) * c_), s_dyx(size_t(N) * c_);
        util::parallel_for(N, [&](int64_t n) {
            for (int c = 0; c < c_; ++c) {
                const T* ds = dy.data() + n * sample + c * plane;
                const T* hs = xhat_.data() + n * sample + c * plane;
                double a = 0, b = 0;
                for (size_t i = 0; i < plane; ++i) {
                    a += double(ds[i]);
                    b += double(ds[i]) * hs[i];
                }
                s_dy[n * c_ + c] = a;
                s_dyx[n * c_ + c] = b;
            }
        });
        std::vector<double> sum_dy(c_, 0.0), sum_dyx(c_, 0.0);
        for (int c = 0; c < c_; ++c) {
            for (int n = 0; n < N; ++n) {
                sum_dy[c] += s_dy[size_t(n) * c_ + c];
                sum_dyx[c] += s_dyx[size_t(n) * c_ + c];
            }
            gamma_.grad.v[c] += T(sum_dyx[c]);
            beta_.grad.v[c] += T(sum_dy[c]);
        }
        Tensor<T> dx(dy.shape);
        util::parallel_for(N, [&](int64_t n) {
            for (int c = 0; c < c_; ++c) {
                const T* ds = dy.data() + n * sample + c * plane;
                const T* hs = xhat_.data() + n * sample + c * plane;
                T* xs = dx.data() + n * sample + c * plane;
                double g = gamma_.value.v[c], inv = invstd_[c];
                double mdy = sum_dy[c] / cnt, mdyx = sum_dyx[c] / cnt;
                for (size_t i = 0; i < plane; ++i)
                    xs[i] = T(g * inv * (double(ds[i]) - mdy - double(hs[i]) * mdyx));
            }
        });
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        gamma_.name = prefix + ".gamma";
        beta_.name = prefix + ".beta";
        fn(gamma_);
        fn(beta_);
    }

    // running statistics participate in checkpoints
    void zero_gamma() { gamma_.value.zero(); }

    // float32 so the checkpoint file round-trips losslessly
    std::vector<float>& running_mean() { return running_mean_; }
    std::vector<float>& running_var() { return running_var_; }

private:
    int c_ = 0;
    double momentum_ = 0.1, eps_ = 1e-5;
    Param<T> gamma_, beta_;
    std::vector<float> running_mean_, running_var_;
    std::vector<double> mean_, invstd_;
    Tensor<T> xhat_;
};

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
class ReLU {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> y(x.shape);
        if (train) mask_.assign(x.numel(), 0);
        const int64_t n = int64_t(x.numel());
        const int64_t chunk = std::max<int64_t>(1, n / 64);
        util::parallel_for((n + chunk - 1) / chunk, [&](int64_t ci) {
            int64_t b = ci * chunk, e = std::min(n, b + chunk);
            for (int64_t i = b; i < e; ++i) {
                bool pos = x.v[i] > T(0);
                y.v[i] = pos ? x.v[i] : T(0);
                if (train && pos) mask_[i] = 1;
            }
        });
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape);
        for (size_t i = 0; i < dy.numel(); ++i) dx.v[i] = mask_[i] ? dy.v[i] : T(0);
        return dx;
    }

private:
    std::vector<uint8_t> mask_;
};

// ---------------------------------------------------------------------------
// MaxPool2d

template <typename T>
class MaxPool2d {
public:
    MaxPool2d() = default;
    MaxPool2d(int k, int stride, int pad) : k_(k), stride_(stride), pad_(pad) {}

    int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int Ho = out_size(H), Wo = out_size(W);
        Tensor<T> y({N, C, Ho, Wo});
        in_shape_ = x.shape;
        if (train) arg_.assign(y.numel(), 0);
        util::parallel_for(int64_t(N) * C, [&](int64_t nc) {
            const T* src = x.data() + nc * H * W;
            T* dst = y.data() + size_t(nc) * Ho * Wo;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    T best = std::numeric_limits<T>::lowest();
                    int besti = -1;
                    for (int ky = 0; ky < k_; ++ky) {
                        int iy = ho * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            int ix = wo * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= W) continue;
                            T v = src[size_t(iy) * W + ix];
                            if (v > best) {
                                best = v;
                                besti = iy * W + ix;
                            }
                        }
                    }
                    dst[size_t(ho) * Wo + wo] = best;
                    if (train) arg_[nc * Ho * Wo + size_t(ho) * Wo + wo] = besti;
                }
            }
        });
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int N = in_shape_[0], C = in_shape_[1], H = in_shape_[2], W = in_shape_[3];
        const int Ho = dy.dim(2), Wo = dy.dim(3);
        Tensor<T> dx(in_shape_);
        util::parallel_for(int64_t(N) * C, [&](int64_t nc) {
            const T* ds = dy.data() + size_t(nc) * Ho * Wo;
            T* xs = dx.data() + size_t(nc) * H * W;
            for (size_t i = 0; i < size_t(Ho) * Wo; ++i) {
                int a = arg_[nc * Ho * Wo + i];
                if (a >= 0) xs[a] += ds[i];
            }
        });
        return dx;
    }

private:
    int k_ = 2, stride_ = 2, pad_ = 0;
    std::vector<int> in_shape_;
    std::vector<int> arg_;
};

// ---------------------------------------------------------------------------
// Linear on 2-d inputs (R x in). chunks > 1 splits rows into that many fixed
// blocks (one per sample) for deterministic parallelism.

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int in, int out, util::Rng& rng, double init_std = -1.0) : in_(in), out_(out) {
        w_.init_shape({out, in});
        if (init_std < 0) {
            he_normal_init(w_.value, in, rng);
        } else {
            std::normal_distribution<double> dist(0.0, init_std);
            for (auto& x : w_.value.v) x = T(dist(rng));
        }
        b_.init_shape({out});
        b_.decay = false;
    }

    void zero_init_with_bias(const std::vector<T>& bias) {
        w_.value.zero();
        for (int i = 0; i < out_; ++i) b_.value.v[i] = bias.at(i);
    }

    Tensor<T> forward(const Tensor<T>& x, bool train, int chunks = 1) {
        const int R = x.dim(0);
        x.require_shape({R, in_}, "Linear");
        Tensor<T> y({R, out_});
        chunks_ = std::max(1, std::min(chunks, R));
        const int per = (R + chunks_ - 1) / chunks_;
        util::parallel_for(chunks_, [&](int64_t c) {
            int r0 = int(c) * per, r1 = std::min(R, r0 + per);
            if (r0 >= r1) return;
            MapCM<T> xm(x.data() + size_t(r0) * in_, r1 - r0, in_);
            MapCM<T> wm(w_.value.data(), out_, in_);
            MapM<T> ym(y.data() + size_t(r0) * out_, r1 - r0, out_);
            ym.noalias() = xm * wm.transpose();
            ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
                b_.value.data(), out_);
        });
        if (train) x_cache_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const Tensor<T>& x = x_cache_;
        const int R = x.dim(0);
        Tensor<T> dx({R, in_});
        const int per = (R + chunks_ - 1) / chunks_;
        std::vector<Tensor<T>> dw_c(chunks_);
        std::vector<std::vector<T>> db_c(chunks_);
        util::parallel_for(chunks_, [&](int64_t c) {
            int r0 = int(c) * per, r1 = std::min(R, r0 + per);
            if (r0 >= r1) return;
            MapCM<T> xm(x.data() + size_t(r0) * in_, r1 - r0, in_);
            MapCM<T> dym(dy.data() + size_t(r0) * out_, r1 - r0, out_);
            MapCM<T> wm(w_.value.data(), out_, in_);
            MapM<T> dxm(dx.data() + size_t(r0) * in_, r1 - r0, in_);
            dxm.noalias() = dym * wm;
            dw_c[c] = Tensor<T>({out_, in_});
            MapM<T> dwm(dw_c[c].data(), out_, in_);
            dwm.noalias() = dym.transpose() * xm;
            db_c[c].resize(out_);
            for (int o = 0; o < out_; ++o) db_c[c][o] = dym.col(o).sum();
        });
        for (int c = 0; c < chunks_; ++c) {
            if (dw_c[c].numel() == 0) continue;
            for (size_t i = 0; i < w_.grad.numel(); ++i) w_.grad.v[i] += dw_c[c].v[i];
            for (int o = 0; o < out_; ++o) b_.grad.v[o] += db_c[c][o];
        }
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        w_.name = prefix + ".weight";
        b_.name = prefix + ".bias";
        fn(w_);
        fn(b_);
    }

    int in_features() const { return in_; }
    int out_features() const { return out_; }

private:
    int in_ = 0, out_ = 0, chunks_ = 1;
    Param<T> w_, b_;
    Tensor<T> x_cache_;
};

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension of (R x D) rows.

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int dim) : d_(dim) {
        gamma_.init_shape({dim});
        beta_.init_shape({dim});
        gamma_.decay = beta_.decay = false;
        std::fill(gamma_.value.v.begin(), gamma_.value.v.end(), T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool train, int chunks = 1) {
        const int R = x.dim(0);
        x.require_shape({R, d_}, "LayerNorm");
        Tensor<T> y({R, d_});
        if (train) {
            xhat_ = Tensor<T>({R, d_});
            invstd_.assign(R, 0.0);
        } else {
            xhat_ = Tensor<T>();
            invstd_.clear();
        }
        chunks_ = std::max(1, std::min(chunks, R));
        const int per = (R + chunks_ - 1) / chunks_;
        util::parallel_for(chunks_, [&](int64_t c) {
            for (int r = int(c) * per; r < std::min(R, (int(c) + 1) * per); ++r) {
                const T* xr = x.data() + size_t(r) * d_;
                T* yr = y.data() + size_t(r) * d_;
                double mean = 0;
                for (int i = 0; i < d_; ++i) mean += double(xr[i]);
                mean /= d_;
                double var = 0;
                for (int i = 0; i < d_; ++i) {
                    double dlt = xr[i] - mean;
                    var += dlt * dlt;
                }
                var /= d_;
                double inv = 1.0 / std::sqrt(var + eps_);
                for (int i = 0; i < d_; ++i) {
                    double h = (xr[i] - mean) * inv;
                    if (!xhat_.v.empty()) xhat_.v[size_t(r) * d_ + i] = T(h);
                    yr[i] = T(double(gamma_.value.v[i]) * h + double(beta_.value.v[i]));
                }
                if (!invstd_.empty()) invstd_[r] = inv;
            }
        });
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int R = dy.dim(0);
        Tensor<T> dx({R, d_});
        const int per = (R + chunks_ - 1) / chunks_;
        std::vector<std::vector<double>> dg_c(chunks_), db_c(chunks_);
        util::parallel_for(chunks_, [&](int64_t c) {
            dg_c[c].assign(d_, 0.0);
            db_c[c].assign(d_, 0.0);
            for (int r = int(c) * per; r < std::min(R, (int(c) + 1) * per); ++r) {
                const T* dyr = dy.data() + size_t(r) * d_;
                const T* hr = xhat_.data() + size_t(r) * d_;
                T* dxr = dx.data() + size_t(r) * d_;
                double mdh = 0, mdhh = 0;
                for (int i = 0; i < d_; ++i) {
                    double dh = double(dyr[i]) * gamma_.value.v[i];
                    mdh += dh;
                    mdhh += dh * hr[i];
                    dg_c[c][i] += double(dyr[i]) * hr[i];
                    db_c[c][i] += double(dyr[i]);
                }
                mdh /= d_;
                mdhh /= d_;
                for (int i = 0; i < d_; ++i) {
                    double dh = double(dyr[i]) * gamma_.value.v[i];
                    dxr[i] = T(invstd_[r] * (dh - mdh - double(hr[i]) * mdhh));
                }
            }
        });
        for (int c = 0; c < chunks_; ++c) {
            if (dg_c[c].empty()) continue;
            for (int i = 0; i < d_; ++i) {
                gamma_.grad.v[i] += T(dg_c[c][i]);
                beta_.grad.v[i] += T(db_c[c][i]);
            }
        }
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        gamma_.name = prefix + ".gamma";
        beta_.name = prefix + ".beta";
        fn(gamma_);
        fn(beta_);
    }

private:
    int d_ = 0, chunks_ = 1;
    double eps_ = 1e-6;
    Param<T> gamma_, beta_;
    Tensor<T> xhat_;
    std::vector<double> invstd_;
};

// ---------------------------------------------------------------------------
// GELU (exact erf form)

template <typename T>
class Gelu {
public:
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        Tensor<T> y(x.shape);
        const int64_t n = int64_t(x.numel());
        const int64_t chunk = std::max<int64_t>(1, n / 64);
        util::parallel_for((n + chunk - 1) / chunk, [&](int64_t ci) {
            int64_t b = ci * chunk, e = std::min(n, b + chunk);
            for (int64_t i = b; i < e; ++i) {
                double v = double(x.v[i]);
                y.v[i] = T(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
            }
        });
        if (train) x_cache_ = x;
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape);
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (size_t i = 0; i < dy.numel(); ++i) {
            double v = double(x_cache_.v[i]);
            double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            dx.v[i] = T(double(dy.v[i]) * (cdf + v * pdf));
        }
        return dx;
    }

private:
    Tensor<T> x_cache_;
};

// ---------------------------------------------------------------------------
// Multi-head self-attention over (N, T, D) tokens, pre-computed qkv layout.

template <typename T>
class MultiheadSelfAttention {
public:
    MultiheadSelfAttention() = default;
    MultiheadSelfAttention(int dim, int heads, util::Rng& rng) : d_(dim), h_(heads) {
        if (dim % heads != 0) throw std::invalid_argument("attention dim % heads != 0");
        dh_ = dim / heads;
        wqkv_.init_shape({3 * dim, dim});
        trunc02_init(wqkv_.value, rng);
        bqkv_.init_shape({3 * dim});
        bqkv_.decay = false;
        wproj_.init_shape({dim, dim});
        trunc02_init(wproj_.value, rng);
        bproj_.init_shape({dim});
        bproj_.decay = false;
    }

    // x: (N, T, D) flattened as rows; returns same shape
    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.dim(0), Tk = x.dim(1);
        x.require_shape({N, Tk, d_}, "MHSA");
        Tensor<T> y({N, Tk, d_});
        if (train) {
            qkv_ = Tensor<T>({N, Tk, 3 * d_});
            probs_ = Tensor<T>({N, h_, Tk, Tk});
            ctx_ = Tensor<T>({N, Tk, d_});
            x_cache_ = x;
        } else {
            qkv_ = Tensor<T>();
            probs_ = Tensor<T>();
            ctx_ = Tensor<T>();
        }
        const double scale = 1.0 / std::sqrt(double(dh_));
        util::parallel_for(N, [&](int64_t n) {
            MapCM<T> xm(x.data() + n * size_t(Tk) * d_, Tk, d_);
            MatRM<T> qkv_local(Tk, 3 * d_);
            MapCM<T> wq(wqkv_.value.data(), 3 * d_, d_);
            qkv_local.noalias() = xm * wq.transpose();
            qkv_local.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
                bqkv_.value.data(), 3 * d_);
            MatRM<T> ctx_local(Tk, d_);
            for (int h = 0; h < h_; ++h) {
                auto Q = qkv_local.block(0, h * dh_, Tk, dh_);
                auto K = qkv_local.block(0, d_ + h * dh_, Tk, dh_);
                auto V = qkv_local.block(0, 2 * d_ + h * dh_, Tk, dh_);
                MatRM<T> s = Q * K.transpose() * T(scale);
                // row-wise softmax
                for (int r = 0; r < Tk; ++r) {
                    T mx = s.row(r).maxCoeff();
                    for (int cidx = 0; cidx < Tk; ++cidx)
                        s(r, cidx) = std::exp(double(s(r, cidx) - mx));
                    T sum = s.row(r).sum();
                    s.row(r) /= sum;
                }
                ctx_local.block(0, h * dh_, Tk, dh_).noalias() = s * V;
                if (!probs_.v.empty())
                    std::copy(s.data(), s.data() + size_t(Tk) * Tk,
                              probs_.data() + ((n * h_ + h) * size_t(Tk) * Tk));
            }
            MapCM<T> wp(wproj_.value.data(), d_, d_);
            MapM<T> ym(y.data() + n * size_t(Tk) * d_, Tk, d_);
            ym.noalias() = ctx_local * wp.transpose();
            ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
                bproj_.value.data(), d_);
            if (!qkv_.v.empty())
                std::copy(qkv_local.data(), qkv_local.data() + size_t(Tk) * 3 * d_,
                          qkv_.data() + n * size_t(Tk) * 3 * d_);
            if (!ctx_.v.empty())
                std::copy(ctx_local.data(), ctx_local.data() + size_t(Tk) * d_,
                          ctx_.data() + n * size_t(Tk) * d_);
        });
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int N = dy.dim(0), Tk = dy.dim(1);
        Tensor<T> dx({N, Tk, d_});
        const double scale = 1.0 / std::sqrt(double(dh_));
        std::vector<MatRM<T>> dwproj_n(N), dwqkv_n(N);
        std::vector<VecX<T>> dbproj_n(N), dbqkv_n(N);
        util::parallel_for(N, [&](int64_t n) {
            MapCM<T> dym(dy.data() + n * size_t(Tk) * d_, Tk, d_);
            MapCM<T> ctxm(ctx_.data() + n * size_t(Tk) * d_, Tk, d_);
            MapCM<T> qkvm(qkv_.data() + n * size_t(Tk) * 3 * d_, Tk, 3 * d_);
            MapCM<T> xm(x_cache_.data() + n * size_t(Tk) * d_, Tk, d_);
            MapCM<T> wp(wproj_.value.data(), d_, d_);
            MapCM<T> wq(wqkv_.value.data(), 3 * d_, d_);

            dwproj_n[n].noalias() = dym.transpose() * ctxm;
            dbproj_n[n] = dym.colwise().sum().transpose();
            MatRM<T> dctx = dym * wp;

            MatRM<T> dqkv = MatRM<T>::Zero(Tk, 3 * d_);
            for (int h = 0; h < h_; ++h) {
                MapCM<T> P(probs_.data() + ((n * h_ + h) * size_t(Tk) * Tk), Tk, Tk);
                auto Q = qkvm.block(0, h * dh_, Tk, dh_);
                auto K = qkvm.block(0, d_ + h * dh_, Tk, dh_);
                auto V = qkvm.block(0, 2 * d_ + h * dh_, Tk, dh_);
                auto dctx_h = dctx.block(0, h * dh_, Tk, dh_);
                MatRM<T> dP = dctx_h * V.transpose();
                dqkv.block(0, 2 * d_ + h * dh_, Tk, dh_).noalias() = P.transpose() * dctx_h;
                // softmax backward per row
                MatRM<T> dS(Tk, Tk);
                for (int r = 0; r < Tk; ++r) {
                    double dot = 0;
                    for (int cidx = 0; cidx < Tk; ++cidx)
                        dot += double(P(r, cidx)) * dP(r, cidx);
                    for (int cidx = 0; cidx < Tk; ++cidx)
                        dS(r, cidx) = T(double(P(r, cidx)) * (double(dP(r, cidx)) - dot));
                }
                dS *= T(scale);
                dqkv.block(0, h * dh_, Tk, dh_).noalias() = dS * K;
                dqkv.block(0, d_ + h * dh_, Tk, dh_).noalias() = dS.transpose() * Q;
            }
            dwqkv_n[n].noalias() = dqkv.transpose() * xm;
            dbqkv_n[n] = dqkv.colwise().sum().transpose();
            MapM<T> dxm(dx.data() + n * size_t(Tk) * d_, Tk, d_);
            dxm.noalias() = dqkv * wq;
        });
        for (int n = 0; n < N; ++n) {
            MapM<T>(wproj_.grad.data(), d_, d_) += dwproj_n[n];
            MapM<T>(wqkv_.grad.data(), 3 * d_, d_) += dwqkv_n[n];
            Eigen::Map<VecX<T>>(bproj_.grad.data(), d_) += dbproj_n[n];
            Eigen::Map<VecX<T>>(bqkv_.grad.data(), 3 * d_) += dbqkv_n[n];
        }
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        wqkv_.name = prefix + ".qkv.weight";
        bqkv_.name = prefix + ".qkv.bias";
        wproj_.name = prefix + ".proj.weight";
        bproj_.name = prefix + ".proj.bias";
        fn(wqkv_);
        fn(bqkv_);
        fn(wproj_);
        fn(bproj_);
    }

private:
    int d_ = 0, h_ = 0, dh_ = 0;
    Param<T> wqkv_, bqkv_, wproj_, bproj_;
    Tensor<T> qkv_, probs_, ctx_, x_cache_;
};

// ---------------------------------------------------------------------------
// Transformer encoder block (pre-norm): x += attn(ln1(x)); x += mlp(ln2(x)).

template <typename T>
class EncoderBlock {
public:
    EncoderBlock() = default;
    EncoderBlock(int dim, int heads, int mlp_hidden, util::Rng& rng)
        : dim_(dim),
          ln1_(dim),
          attn_(dim, heads, rng),
          ln2_(dim),
          fc1_(dim, mlp_hidden, rng, 0.02),
          fc2_(mlp_hidden, dim, rng, 0.02) {}

    Tensor<T> forward(const Tensor<T>& x, bool train) {
        const int N = x.dim(0), Tk = x.dim(1);
        Tensor<T> rows = x;
        rows.shape = {N * Tk, dim_};
        Tensor<T> h1 = ln1_.forward(rows, train, N);
        h1.shape = {N, Tk, dim_};
        Tensor<T> a = attn_.forward(h1, train);
        Tensor<T> x2 = x;
        for (size_t i = 0; i < x2.numel(); ++i) x2.v[i] += a.v[i];

        Tensor<T> rows2 = x2;
        rows2.shape = {N * Tk, dim_};
        Tensor<T> h2 = ln2_.forward(rows2, train, N);
        Tensor<T> m = fc1_.forward(h2, train, N);
        m = gelu_.forward(m, train);
        m = fc2_.forward(m, train, N);
        Tensor<T> y = x2;
        for (size_t i = 0; i < y.numel(); ++i) y.v[i] += m.v[i];
        y.shape = {N, Tk, dim_};
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int N = dy.dim(0), Tk = dy.dim(1);
        Tensor<T> dy_rows = dy;
        dy_rows.shape = {N * Tk, dim_};
        Tensor<T> dm = fc2_.backward(dy_rows);
        dm = gelu_.backward(dm);
        dm = fc1_.backward(dm);
        Tensor<T> dx2 = ln2_.backward(dm);
        for (size_t i = 0; i < dx2.numel(); ++i) dx2.v[i] += dy_rows.v[i];

        Tensor<T> dx2_tok = dx2;
        dx2_tok.shape = {N, Tk, dim_};
        Tensor<T> da = attn_.backward(dx2_tok);
        da.shape = {N * Tk, dim_};
        Tensor<T> dx = ln1_.backward(da);
        for (size_t i = 0; i < dx.numel(); ++i) dx.v[i] += dx2.v[i];
        dx.shape = {N, Tk, dim_};
        return dx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<T>& fn) {
        ln1_.visit_params(prefix + ".ln1", fn);
        attn_.visit_params(prefix + ".attn", fn);
        ln2_.visit_params(prefix + ".ln2", fn);
        fc1_.visit_params(prefix + ".mlp.fc1", fn);
        fc2_.visit_params(prefix + ".mlp.fc2", fn);
    }

private:
    int dim_ = 0;
    LayerNorm<T> ln1_;
    MultiheadSelfAttention<T> attn_;
    LayerNorm<T> ln2_;
    Linear<T> fc1_, fc2_;
    Gelu<T> gelu_;
};

}  // namespace afr::nn
