#pragma once

// Independent reference implementations used to check the library. These are
// deliberately written as plain loops, separate from the production code
// paths they validate.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "afr/geometry.hpp"

namespace oracle {

/// O(n^2) mutual-argmax matching in double precision, plain loops.
inline std::vector<afr::geometry::Correspondence> mutual_nn(
    const afr::geometry::DescriptorSet& a, const afr::geometry::DescriptorSet& b, double tau) {
    const int na = a.count(), nb = b.count();
    std::vector<std::vector<double>> sim(na, std::vector<double>(nb, 0.0));
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j) {
            double d = 0;
            for (int k = 0; k < a.dim; ++k) d += double(a.row(i)[k]) * double(b.row(j)[k]);
            sim[i][j] = d;
        }
    std::vector<afr::geometry::Correspondence> out;
    for (int i = 0; i < na; ++i) {
        int best_j = 0;
        for (int j = 1; j < nb; ++j)
            if (sim[i][j] > sim[i][best_j]) best_j = j;
        int best_i = 0;
        for (int ii = 1; ii < na; ++ii)
            if (sim[ii][best_j] > sim[best_i][best_j]) best_i = ii;
        if (best_i == i && sim[i][best_j] >= tau) out.push_back({i, best_j, sim[i][best_j]});
    }
    std::sort(out.begin(), out.end(),
              [](const afr::geometry::Correspondence& l, const afr::geometry::Correspondence& r) {
                  if (l.similarity != r.similarity) return l.similarity > r.similarity;
                  if (l.idx_a != r.idx_a) return l.idx_a < r.idx_a;
                  return l.idx_b < r.idx_b;
              });
    return out;
}

/// Closed-form least-squares affine via hand-rolled 6x6 normal equations
/// (Gaussian elimination, no Eigen).
inline bool affine_lsq(const std::vector<afr::geometry::Keypoint>& src,
                       const std::vector<afr::geometry::Keypoint>& dst, double m[2][3]) {
    // normal matrix for [a b c; d e f] with rows (x, y, 1)
    double ata[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    double atb_x[3] = {0, 0, 0}, atb_y[3] = {0, 0, 0};
    for (size_t i = 0; i < src.size(); ++i) {
        double r[3] = {src[i].x, src[i].y, 1.0};
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) ata[a][b] += r[a] * r[b];
            atb_x[a] += r[a] * dst[i].x;
            atb_y[a] += r[a] * dst[i].y;
        }
    }
    // solve two 3x3 systems by elimination with partial pivoting
    auto solve3 = [](double A[3][3], double b[3], double out[3]) {
        double M[3][4];
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) M[i][j] = A[i][j];
            M[i][3] = b[i];
        }
        for (int col = 0; col < 3; ++col) {
            int piv = col;
            for (int r = col + 1; r < 3; ++r)
                if (std::abs(M[r][col]) > std::abs(M[piv][col])) piv = r;
            if (std::abs(M[piv][col]) < 1e-12) return false;
            std::swap(M[piv], M[col]);
            for (int r = 0; r < 3; ++r) {
                if (r == col) continue;
                double f = M[r][col] / M[col][col];
                for (int j = col; j < 4; ++j) M[r][j] -= f * M[col][j];
            }
        }
        for (int i = 0; i < 3; ++i) out[i] = M[i][3] / M[i][i];
        return true;
    };
    double A1[3][3], A2[3][3];
    std::copy(&ata[0][0], &ata[0][0] + 9, &A1[0][0]);
    std::copy(&ata[0][0], &ata[0][0] + 9, &A2[0][0]);
    double row_x[3], row_y[3];
    if (!solve3(A1, atb_x, row_x) || !solve3(A2, atb_y, row_y)) return false;
    m[0][0] = row_x[0];
    m[0][1] = row_x[1];
    m[0][2] = row_x[2];
    m[1][0] = row_y[0];
    m[1][1] = row_y[1];
    m[1][2] = row_y[2];
    return true;
}

/// Brute-force (FAR, TAR) at a threshold with the ties-accept convention.
inline std::pair<double, double> far_tar_at(const std::vector<double>& imposter,
                                            const std::vector<double>& genuine, double t) {
    int64_t fa = 0, ta = 0;
    for (double s : imposter)
        if (s >= t) ++fa;
    for (double s : genuine)
        if (s >= t) ++ta;
    return {double(fa) / imposter.size(), double(ta) / genuine.size()};
}

/// Random unit vector set for matching tests.
inline afr::geometry::DescriptorSet random_unit_descriptors(int count, int dim,
                                                            std::mt19937_64& rng) {
    afr::geometry::DescriptorSet s;
    s.dim = dim;
    s.data.resize(size_t(count) * dim);
    std::normal_distribution<double> g(0, 1);
    for (int i = 0; i < count; ++i) {
        double n2 = 0;
        std::vector<double> v(dim);
        for (int k = 0; k < dim; ++k) {
            v[k] = g(rng);
            n2 += v[k] * v[k];
        }
        double inv = 1.0 / std::sqrt(n2);
        for (int k = 0; k < dim; ++k) s.data[size_t(i) * dim + k] = float(v[k] * inv);
        s.keypoints.push_back({double(i % 16) * 16 + 8, double(i / 16) * 16 + 8});
    }
    return s;
}

}  // namespace oracle
