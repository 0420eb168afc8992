#include "gbm/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace gbm {

void WeightedSeries::validate() const {
    if (x.size() != w.size()) throw shape_error("series and weights differ in length");
    if (x.size() < 1) throw shape_error("series must be nonempty");
    if (k < 0 || k % 2 != 0) throw domain_error("bandwidth k must be even and nonnegative");
    if (!x.allFinite()) throw domain_error("series contains non-finite values");
    if (!w.allFinite() || (w.array() <= 0).any()) throw domain_error("weights must be positive and finite");
}

namespace {
// Window sums of v. Short windows are summed directly; long ones use extended-precision prefix sums.
Vector window_sums(const Vector& v, Eigen::Index k) {
    const auto n = v.size();
    const auto h = k / 2;
    Vector out(n);
    if (h <= 8) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto lo = std::max<Eigen::Index>(0, i - h), hi = std::min<Eigen::Index>(n - 1, i + h);
            out(i) = v.segment(lo, hi - lo + 1).sum();
        }
        return out;
    }
    std::vector<long double> pre(static_cast<size_t>(n) + 1, 0.0L);
    for (Eigen::Index i = 0; i < n; ++i) pre[static_cast<size_t>(i) + 1] = pre[static_cast<size_t>(i)] + v(i);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto lo = std::max<Eigen::Index>(0, i - h), hi = std::min<Eigen::Index>(n - 1, i + h);
        out(i) = static_cast<double>(pre[static_cast<size_t>(hi) + 1] - pre[static_cast<size_t>(lo)]);
    }
    return out;
}

Vector window_counts(Eigen::Index n, Eigen::Index k) {
    const auto h = k / 2;
    Vector c(n);
    for (Eigen::Index i = 0; i < n; ++i)
        c(i) = static_cast<double>(std::min<Eigen::Index>(n - 1, i + h) - std::max<Eigen::Index>(0, i - h) + 1);
    return c;
}
}  // namespace

Vector weighted_moving_average(const WeightedSeries& s) {
    s.validate();
    if (s.k == 0) return s.x;
    return window_sums(s.w.cwiseProduct(s.x), s.k).cwiseQuotient(window_sums(s.w, s.k));
}

Vector moving_average(const Vector& v, Eigen::Index k) {
    return window_sums(v, k).cwiseQuotient(window_counts(v.size(), k));
}

double lrse(const WeightedSeries& s) {
    s.validate();
    if (s.x.size() < 2) throw shape_error("lrse requires n >= 2");
    const Vector xbar = weighted_moving_average(s);
    const Vector wbar = moving_average(s.w, s.k);
    const Vector t = (s.w.array() / wbar.array()) * (s.x.array() - xbar.array());
    return std::sqrt(t.squaredNorm() / static_cast<double>(s.x.size()));
}

double median(Vector v) {
    if (v.size() == 0) throw shape_error("median of empty vector");
    std::sort(v.data(), v.data() + v.size());
    const auto n = v.size();
    return n % 2 ? v(n / 2) : 0.5 * (v(n / 2 - 1) + v(n / 2));
}

double wmad(const WeightedSeries& s) {
    s.validate();
    const auto n = s.x.size();
    if (n < 2) throw shape_error("wmad requires n >= 2");
    const Vector xbar = weighted_moving_average(s);
    const Vector d = static_cast<double>(s.k) * (xbar.tail(n - 1) - xbar.head(n - 1)).cwiseAbs();
    return median(d);
}

}  // namespace gbm
