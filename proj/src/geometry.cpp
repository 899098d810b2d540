#include "afr/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "afr/util.hpp"

namespace afr::geometry {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;
}  // namespace

void DescriptorSet::validate() const {
    if (size_t(count()) * dim != data.size())
        throw std::invalid_argument("DescriptorSet: descriptor/keypoint count mismatch");
    for (int i = 0; i < count(); ++i) {
        double n2 = 0;
        const float* d = row(i);
        for (int k = 0; k < dim; ++k) n2 += double(d[k]) * d[k];
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-5)
            throw std::invalid_argument("DescriptorSet: descriptor " + std::to_string(i) +
                                        " not unit norm");
    }
}

void TransformLimits::validate() const {
    if (!(0 < scale_min && scale_min <= 1.0 && 1.0 <= scale_max))
        throw std::invalid_argument("TransformLimits: need 0 < scale_min <= 1 <= scale_max");
    if (!(max_rotation_deg > 0 && max_rotation_deg <= 180))
        throw std::invalid_argument("TransformLimits: max_rotation in (0, 180]");
    if (!(max_translation_px > 0))
        throw std::invalid_argument("TransformLimits: max_translation > 0");
}

AffineTransform AffineTransform::similarity(double scale, double rotation_deg, double tx,
                                            double ty) {
    double r = rotation_deg * kDegToRad;
    double c = std::cos(r), s = std::sin(r);
    AffineTransform t;
    t.m[0][0] = scale * c;
    t.m[0][1] = -scale * s;
    t.m[0][2] = tx;
    t.m[1][0] = scale * s;
    t.m[1][1] = scale * c;
    t.m[1][2] = ty;
    return t;
}

AffineTransform AffineTransform::about_point(double cx, double cy, double scale,
                                             double rotation_deg, double tx, double ty) {
    AffineTransform t = similarity(scale, rotation_deg, 0, 0);
    // p' = A (p - c) + c + t
    t.m[0][2] = cx + tx - (t.m[0][0] * cx + t.m[0][1] * cy);
    t.m[1][2] = cy + ty - (t.m[1][0] * cx + t.m[1][1] * cy);
    return t;
}

std::optional<AffineTransform> AffineTransform::inverse() const {
    double det = det2();
    if (det == 0 || !std::isfinite(det) || std::abs(det) < 1e-12) return std::nullopt;
    AffineTransform inv;
    inv.m[0][0] = m[1][1] / det;
    inv.m[0][1] = -m[0][1] / det;
    inv.m[1][0] = -m[1][0] / det;
    inv.m[1][1] = m[0][0] / det;
    inv.m[0][2] = -(inv.m[0][0] * m[0][2] + inv.m[0][1] * m[1][2]);
    inv.m[1][2] = -(inv.m[1][0] * m[0][2] + inv.m[1][1] * m[1][2]);
    return inv;
}

bool AffineTransform::is_identity(double tol) const {
    AffineTransform id;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j)
            if (std::abs(m[i][j] - id.m[i][j]) > tol) return false;
    return true;
}

std::vector<Keypoint> patch_centers(int grid_h, int grid_w, int patch) {
    if (grid_h < 1 || grid_w < 1 || patch < 1)
        throw std::invalid_argument("patch_centers: grid and patch must be >= 1");
    std::vector<Keypoint> out;
    out.reserve(size_t(grid_h) * grid_w);
    for (int i = 0; i < grid_h; ++i)
        for (int j = 0; j < grid_w; ++j)
            out.push_back({j * double(patch) + patch / 2.0, i * double(patch) + patch / 2.0});
    return out;
}

std::vector<Correspondence> match_descriptors(const DescriptorSet& a, const DescriptorSet& b,
                                              double tau) {
    if (a.dim != b.dim) throw std::invalid_argument("match_descriptors: dimension mismatch");
    const int na = a.count(), nb = b.count();
    std::vector<Correspondence> out;
    if (na == 0 || nb == 0) return out;

    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> ma(
        a.data.data(), na, a.dim);
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> mb(
        b.data.data(), nb, b.dim);
    Eigen::MatrixXf sim = ma * mb.transpose();  // na x nb cosine (unit-norm inputs)

    // argmax per row and per column; lowest index wins ties
    std::vector<int> best_b(na), best_a(nb, 0);
    for (int i = 0; i < na; ++i) {
        int arg = 0;
        float best = sim(i, 0);
        for (int j = 1; j < nb; ++j)
            if (sim(i, j) > best) {
                best = sim(i, j);
                arg = j;
            }
        best_b[i] = arg;
    }
    for (int j = 0; j < nb; ++j) {
        int arg = 0;
        float best = sim(0, j);
        for (int i = 1; i < na; ++i)
            if (sim(i, j) > best) {
                best = sim(i, j);
                arg = i;
            }
        best_a[j] = arg;
    }
    for (int i = 0; i < na; ++i) {
        int j = best_b[i];
        if (best_a[j] == i && sim(i, j) >= tau)
            out.push_back({i, j, double(sim(i, j))});
    }
    std::sort(out.begin(), out.end(), [](const Correspondence& l, const Correspondence& r) {
        if (l.similarity != r.similarity) return l.similarity > r.similarity;
        if (l.idx_a != r.idx_a) return l.idx_a < r.idx_a;
        return l.idx_b < r.idx_b;
    });
    return out;
}

std::optional<AffineTransform> fit_affine_lsq(const std::vector<Keypoint>& src,
                                              const std::vector<Keypoint>& dst) {
    const size_t n = src.size();
    if (n < 3 || dst.size() != n) return std::nullopt;
    Eigen::MatrixXd A(2 * n, 6);
    Eigen::VectorXd rhs(2 * n);
    for (size_t i = 0; i < n; ++i) {
        A.row(2 * i) << src[i].x, src[i].y, 1, 0, 0, 0;
        A.row(2 * i + 1) << 0, 0, 0, src[i].x, src[i].y, 1;
        rhs(2 * i) = dst[i].x;
        rhs(2 * i + 1) = dst[i].y;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (qr.rank() < 6) return std::nullopt;
    Eigen::VectorXd x = qr.solve(rhs);
    AffineTransform t;
    t.m[0][0] = x(0);
    t.m[0][1] = x(1);
    t.m[0][2] = x(2);
    t.m[1][0] = x(3);
    t.m[1][1] = x(4);
    t.m[1][2] = x(5);
    if (std::abs(t.det2()) < 1e-12) return std::nullopt;
    return t;
}

namespace {

// Exact affine through three point pairs; nullopt when the triple is
// (near-)collinear.
std::optional<AffineTransform> affine_from_triple(const Keypoint* a, const Keypoint* b) {
    double ax1 = a[1].x - a[0].x, ay1 = a[1].y - a[0].y;
    double ax2 = a[2].x - a[0].x, ay2 = a[2].y - a[0].y;
    double det = ax1 * ay2 - ax2 * ay1;
    if (std::abs(det) < 1e-9) return std::nullopt;
    double bx1 = b[1].x - b[0].x, by1 = b[1].y - b[0].y;
    double bx2 = b[2].x - b[0].x, by2 = b[2].y - b[0].y;
    AffineTransform t;
    t.m[0][0] = (bx1 * ay2 - bx2 * ay1) / det;
    t.m[0][1] = (bx2 * ax1 - bx1 * ax2) / det;
    t.m[1][0] = (by1 * ay2 - by2 * ay1) / det;
    t.m[1][1] = (by2 * ax1 - by1 * ax2) / det;
    t.m[0][2] = b[0].x - t.m[0][0] * a[0].x - t.m[0][1] * a[0].y;
    t.m[1][2] = b[0].y - t.m[1][0] * a[0].x - t.m[1][1] * a[0].y;
    return t;
}

double reproj_err2(const AffineTransform& t, const Keypoint& a, const Keypoint& b) {
    Keypoint p = t.apply(a);
    double dx = p.x - b.x, dy = p.y - b.y;
    return dx * dx + dy * dy;
}

}  // namespace

std::optional<AffineTransform> estimate_affine(const std::vector<Correspondence>& corr,
                                               const std::vector<Keypoint>& kp_a,
                                               const std::vector<Keypoint>& kp_b,
                                               const RansacParams& params, uint64_t seed) {
    const int n = int(corr.size());
    if (n < 3) return std::nullopt;

    std::vector<Keypoint> pa(n), pb(n);
    for (int i = 0; i < n; ++i) {
        pa[i] = kp_a.at(corr[i].idx_a);
        pb[i] = kp_b.at(corr[i].idx_b);
    }

    util::Rng rng(seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    const double thr2 = params.inlier_px * params.inlier_px;

    int best_count = 0;
    double best_err = 0;
    std::vector<char> best_inl;
    for (int it = 0; it < params.iters; ++it) {
        int i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
        if (i0 == i1 || i0 == i2 || i1 == i2) continue;
        Keypoint sa[3] = {pa[i0], pa[i1], pa[i2]};
        Keypoint sb[3] = {pb[i0], pb[i1], pb[i2]};
        auto t = affine_from_triple(sa, sb);
        if (!t) continue;
        int count = 0;
        double err = 0;
        std::vector<char> inl(n, 0);
        for (int i = 0; i < n; ++i) {
            double e2 = reproj_err2(*t, pa[i], pb[i]);
            if (e2 <= thr2) {
                inl[i] = 1;
                ++count;
                err += e2;
            }
        }
        if (count > best_count || (count == best_count && count > 0 && err < best_err)) {
            best_count = count;
            best_err = err;
            best_inl = std::move(inl);
        }
    }
    if (best_count < std::max(3, params.min_inliers)) return std::nullopt;

    // least-squares refit on consensus, then one re-collection pass
    for (int round = 0; round < 2; ++round) {
        std::vector<Keypoint> sa, sb;
        for (int i = 0; i < n; ++i)
            if (best_inl[i]) {
                sa.push_back(pa[i]);
                sb.push_back(pb[i]);
            }
        auto refit = fit_affine_lsq(sa, sb);
        if (!refit) return std::nullopt;
        int count = 0;
        std::vector<char> inl(n, 0);
        for (int i = 0; i < n; ++i)
            if (reproj_err2(*refit, pa[i], pb[i]) <= thr2) {
                inl[i] = 1;
                ++count;
            }
        if (count < std::max(3, params.min_inliers)) return std::nullopt;
        if (round == 1 || inl == best_inl) return refit;
        best_inl = std::move(inl);
    }
    return std::nullopt;  // unreachable
}

Decomposition decompose(const AffineTransform& t) {
    double a = t.m[0][0], b = t.m[0][1], c = t.m[1][0], d = t.m[1][1];
    double det = a * d - b * c;
    if (std::abs(det) < 1e-12 || !std::isfinite(det))
        throw std::invalid_argument("decompose: singular 2x2 part");
    double r = std::hypot(a, c);
    if (r < 1e-12) throw std::invalid_argument("decompose: degenerate first column");
    Decomposition out;
    out.rotation_deg = std::atan2(c, a) * kRadToDeg;
    out.scale_x = r;
    out.scale_y = det / r;
    // upper-triangular residual R = Q^T M; shear normalized by scale_y
    double r01 = (a * b + c * d) / r;
    out.shear = r01 / out.scale_y;
    out.tx = t.m[0][2];
    out.ty = t.m[1][2];
    return out;
}

AffineTransform recompose(const Decomposition& d) {
    double r = d.rotation_deg * kDegToRad;
    double cr = std::cos(r), sr = std::sin(r);
    // R(theta) * [[1, shear], [0, 1]] * diag(sx, sy)
    AffineTransform t;
    t.m[0][0] = cr * d.scale_x;
    t.m[0][1] = (cr * d.shear - sr) * d.scale_y;
    t.m[1][0] = sr * d.scale_x;
    t.m[1][1] = (sr * d.shear + cr) * d.scale_y;
    t.m[0][2] = d.tx;
    t.m[1][2] = d.ty;
    return t;
}

bool transform_ok(const AffineTransform& t, const TransformLimits& limits) {
    limits.validate();
    Decomposition d;
    try {
        d = decompose(t);
    } catch (const std::invalid_argument&) {
        return false;
    }
    if (!(d.scale_x >= limits.scale_min && d.scale_x <= limits.scale_max)) return false;
    if (!(d.scale_y >= limits.scale_min && d.scale_y <= limits.scale_max)) return false;
    if (!(std::abs(d.rotation_deg) <= limits.max_rotation_deg)) return false;
    if (!(std::max(std::abs(d.tx), std::abs(d.ty)) <= limits.max_translation_px)) return false;
    return true;
}

Image warp_image(const Image& img, const AffineTransform& t, uint8_t fill) {
    if (img.empty()) throw std::invalid_argument("warp_image: empty image");
    auto inv = t.inverse();
    if (!inv) throw std::invalid_argument("warp_image: transform not invertible");
    Image out(img.width, img.height, fill);
    const int W = img.width, H = img.height;
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            double sx = inv->m[0][0] * x + inv->m[0][1] * y + inv->m[0][2];
            double sy = inv->m[1][0] * x + inv->m[1][1] * y + inv->m[1][2];
            int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
            double wx = sx - x0, wy = sy - y0;
            auto sample = [&](int xi, int yi) -> double {
                if (xi < 0 || yi < 0 || xi >= W || yi >= H) return fill;
                return img.at(xi, yi);
            };
            if (x0 < -1 || y0 < -1 || x0 >= W || y0 >= H) {
                out.at(x, y) = fill;
                continue;
            }
            double v = (1 - wy) * ((1 - wx) * sample(x0, y0) + wx * sample(x0 + 1, y0)) +
                       wy * ((1 - wx) * sample(x0, y0 + 1) + wx * sample(x0 + 1, y0 + 1));
            out.at(x, y) = uint8_t(std::lround(std::min(255.0, std::max(0.0, v))));
        }
    }
    return out;
}

Mask warp_mask(const Mask& mask, const AffineTransform& t) {
    auto inv = t.inverse();
    if (!inv) throw std::invalid_argument("warp_mask: transform not invertible");
    Mask out(mask.width, mask.height, 0);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            double sx = inv->m[0][0] * x + inv->m[0][1] * y + inv->m[0][2];
            double sy = inv->m[1][0] * x + inv->m[1][1] * y + inv->m[1][2];
            int xi = int(std::lround(sx)), yi = int(std::lround(sy));
            if (xi >= 0 && yi >= 0 && xi < mask.width && yi < mask.height)
                out.at(x, y) = mask.at(xi, yi);
        }
    }
    return out;
}

Mask foreground_mask(const Image& img, int block, double std_thresh) {
    if (img.empty()) throw std::invalid_argument("foreground_mask: empty image");
    Mask out(img.width, img.height, 0);
    for (int by = 0; by < img.height; by += block) {
        for (int bx = 0; bx < img.width; bx += block) {
            int x1 = std::min(bx + block, img.width);
            int y1 = std::min(by + block, img.height);
            double sum = 0, sum2 = 0;
            int n = (x1 - bx) * (y1 - by);
            for (int y = by; y < y1; ++y)
                for (int x = bx; x < x1; ++x) {
                    double v = img.at(x, y);
                    sum += v;
                    sum2 += v * v;
                }
            double mean = sum / n;
            double var = std::max(0.0, sum2 / n - mean * mean);
            if (std::sqrt(var) > std_thresh)
                for (int y = by; y < y1; ++y)
                    for (int x = bx; x < x1; ++x) out.at(x, y) = 1;
        }
    }
    return out;
}

std::optional<std::pair<Image, Image>> overlap_masks(const Image& img_a_warped,
                                                     const Image& img_b, const Mask& fg_a,
                                                     const Mask& fg_b, uint8_t fill,
                                                     double min_overlap_fraction) {
    if (img_a_warped.width != img_b.width || img_a_warped.height != img_b.height ||
        fg_a.width != img_a_warped.width || fg_a.height != img_a_warped.height ||
        fg_b.width != img_b.width || fg_b.height != img_b.height)
        throw std::invalid_argument("overlap_masks: dimension mismatch");

    int64_t area_a = fg_a.count(), area_b = fg_b.count();
    int64_t inter = 0;
    for (size_t i = 0; i < fg_a.on.size(); ++i)
        if (fg_a.on[i] && fg_b.on[i]) ++inter;
    if (area_a == 0 || area_b == 0) return std::nullopt;
    if (inter < min_overlap_fraction * area_a || inter < min_overlap_fraction * area_b)
        return std::nullopt;

    Image ca = img_a_warped, cb = img_b;
    for (size_t i = 0; i < fg_a.on.size(); ++i) {
        if (!(fg_a.on[i] && fg_b.on[i])) {
            ca.px[i] = fill;
            cb.px[i] = fill;
        }
    }
    return std::make_pair(std::move(ca), std::move(cb));
}

Image random_occlusion(const Image& img, double ratio, uint64_t seed) {
    if (ratio < 0 || ratio >= 1) throw std::invalid_argument("random_occlusion: ratio in [0, 1)");
    if (ratio == 0) return img;
    Mask fg = foreground_mask(img);
    int64_t fg_area = fg.count();
    if (fg_area == 0) return img;

    Image out = img;
    Mask painted(img.width, img.height, 0);
    util::Rng rng(seed);
    std::uniform_int_distribution<int> px(0, img.width - 1), py(0, img.height - 1);

    int64_t occluded = 0;
    const double lo = ratio - 0.02;
    const int max_side = std::max(4, img.width / 3);
    for (int iter = 0; iter < 20000 && double(occluded) / fg_area < lo; ++iter) {
        // cap rectangle area by what is still missing so the band is never overshot
        int64_t remaining = int64_t(std::ceil((ratio - double(occluded) / fg_area) * fg_area));
        int side_cap = std::max(1, int(std::sqrt(double(remaining))));
        int w = std::uniform_int_distribution<int>(1, std::min(max_side, side_cap))(rng);
        int h_cap = std::max<int64_t>(1, remaining / std::max(1, w));
        int h = std::uniform_int_distribution<int>(1, int(std::min<int64_t>(max_side, h_cap)))(rng);
        int x0 = px(rng), y0 = py(rng);
        int x1 = std::min(img.width, x0 + w), y1 = std::min(img.height, y0 + h);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                if (!painted.at(x, y)) {
                    painted.at(x, y) = 1;
                    if (fg.at(x, y)) ++occluded;
                }
                out.at(x, y) = 255;
            }
    }
    return out;
}

Image random_partial_affine(const Image& img, double ratio, uint64_t seed) {
    if (ratio < 0 || ratio >= 1)
        throw std::invalid_argument("random_partial_affine: ratio in [0, 1)");
    if (ratio == 0) return img;
    Mask fg = foreground_mask(img);
    const int64_t fg_area = fg.count();
    if (fg_area == 0) return img;

    util::Rng rng(seed);
    const double px = img.width / 224.0;  // placement scales with the canvas
    std::uniform_real_distribution<double> uang(0, 2 * std::numbers::pi);
    std::uniform_real_distribution<double> urot(-20, 20), uscale(0.92, 1.1);
    std::uniform_real_distribution<double> ushift(-12 * px, 12 * px);
    double cut_angle = uang(rng);
    double nx = std::cos(cut_angle), ny = std::sin(cut_angle);

    const double cx = img.width / 2.0, cy = img.height / 2.0;
    AffineTransform place = AffineTransform::about_point(cx, cy, uscale(rng), urot(rng),
                                                         ushift(rng), ushift(rng));

    // projections of foreground pixels onto the cut direction
    std::vector<float> proj;
    proj.reserve(size_t(fg_area));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (fg.at(x, y)) proj.push_back(float(nx * x + ny * y));
    std::sort(proj.begin(), proj.end());

    auto remaining_after = [&](double c) -> int64_t {
        // pixels with projection > c are cut, then the placement clips more
        Mask kept = fg;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                if (kept.at(x, y) && nx * x + ny * y > c) kept.at(x, y) = 0;
        Mask placed = warp_mask(kept, place);
        return placed.count();
    };

    const int64_t target = int64_t(std::llround((1.0 - ratio) * fg_area));
    // binary search the cut position over the projection range
    double lo = proj.front() - 1, hi = proj.back() + 1;
    double best_c = hi;
    for (int it = 0; it < 24; ++it) {
        double mid = 0.5 * (lo + hi);
        int64_t rem = remaining_after(mid);
        if (std::abs(rem - target) <= int64_t(0.02 * fg_area)) {
            best_c = mid;
            break;
        }
        if (rem > target)
            hi = mid;
        else
            lo = mid;
        best_c = mid;
    }

    Image cut = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (nx * x + ny * y > best_c) cut.at(x, y) = 255;
    return warp_image(cut, place, 255);
}

}  // namespace afr::geometry
