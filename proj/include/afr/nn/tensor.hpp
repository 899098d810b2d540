#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace afr::nn {

/// Dense row-major tensor. Shapes are small (rank <= 4); data is contiguous.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= size_t(d);
        return n;
    }
    size_t numel() const { return v.size(); }
    int dim(int i) const { return shape.at(i); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    bool same_shape(const std::vector<int>& s) const { return shape == s; }
    void require_shape(const std::vector<int>& s, const char* who) const {
        if (!same_shape(s)) {
            std::string msg = std::string(who) + ": shape mismatch, got [";
            for (size_t i = 0; i < shape.size(); ++i)
                msg += (i ? "," : "") + std::to_string(shape[i]);
            msg += "] want [";
            for (size_t i = 0; i < s.size(); ++i) msg += (i ? "," : "") + std::to_string(s[i]);
            msg += "]";
            throw std::invalid_argument(msg);
        }
    }
};

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Named parameter with its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool decay = true;  // participates in decoupled weight decay

    void init_shape(std::vector<int> s) {
        value = Tensor<T>(s);
        grad = Tensor<T>(std::move(s));
    }
};

template <typename T>
using ParamVisitor = std::function<void(Param<T>&)>;

}  // namespace afr::nn
