#include "itl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "itl/error.hpp"

namespace itl {

AccuracyMatrix::AccuracyMatrix(std::size_t centers, std::size_t visits)
    : centers_(centers), visits_(visits), values_(centers * visits, std::numeric_limits<double>::quiet_NaN()) {}

bool AccuracyMatrix::has(std::size_t center, std::size_t visit) const {
    return !std::isnan(values_.at(center * visits_ + visit));
}

double AccuracyMatrix::at(std::size_t center, std::size_t visit) const {
    if (center >= centers_ || visit >= visits_) throw DataError("accuracy matrix index out of range");
    return values_[center * visits_ + visit];
}

void AccuracyMatrix::set(std::size_t center, std::size_t visit, double value) {
    if (center >= centers_ || visit >= visits_) throw DataError("accuracy matrix index out of range");
    values_[center * visits_ + visit] = value;
}

std::size_t AccuracyMatrix::add_visit() {
    std::vector<double> grown(centers_ * (visits_ + 1), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < centers_; ++c)
        for (std::size_t v = 0; v < visits_; ++v) grown[c * (visits_ + 1) + v] = values_[c * visits_ + v];
    values_ = std::move(grown);
    return visits_++;
}

std::vector<double> AccuracyMatrix::row(std::size_t center) const {
    return {values_.begin() + static_cast<std::ptrdiff_t>(center * visits_),
            values_.begin() + static_cast<std::ptrdiff_t>((center + 1) * visits_)};
}

bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b) {
    if (a.centers_ != b.centers_ || a.visits_ != b.visits_) return false;
    for (std::size_t i = 0; i < a.values_.size(); ++i) {
        const double x = a.values_[i], y = b.values_[i];
        if (std::isnan(x) != std::isnan(y)) return false;
        if (!std::isnan(x) && x != y) return false;
    }
    return true;
}

double mean_accuracy(const AccuracyMatrix& m) {
    if (m.visits() == 0 || m.centers() == 0) throw DataError("mean_accuracy: empty accuracy matrix");
    const std::size_t last = m.visits() - 1;
    double s = 0.0;
    for (std::size_t c = 0; c < m.centers(); ++c) {
        if (!m.has(c, last)) throw DataError("mean_accuracy: final column is missing center " + std::to_string(c + 1));
        s += m.at(c, last);
    }
    return s / static_cast<double>(m.centers());
}

double monotonicity(const AccuracyMatrix& m) {
    if (m.visits() < 2) throw DataError("monotonicity requires at least two visits");
    std::size_t pairs = 0, up = 0;
    for (std::size_t c = 0; c < m.centers(); ++c) {
        for (std::size_t v = 1; v < m.visits(); ++v) {
            if (!m.has(c, v) || !m.has(c, v - 1)) continue;
            ++pairs;
            if (m.at(c, v) >= m.at(c, v - 1)) ++up;
        }
    }
    if (pairs == 0) throw DataError("monotonicity: no consecutive evaluated pairs");
    return static_cast<double>(up) / static_cast<double>(pairs);
}

std::string to_string(Significance s) {
    switch (s) {
    case Significance::YesPlus: return "Yes+";
    case Significance::YesMinus: return "Yes-";
    case Significance::No: return "No";
    }
    return "No";
}

namespace {

double mean_of(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sample_variance(std::span<const double> x, double mean) {
    double s = 0.0;
    for (double v : x) s += (v - mean) * (v - mean);
    return s / static_cast<double>(x.size() - 1);
}

} // namespace

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw DataError("welch_t_test needs at least two samples per group");
    const double ma = mean_of(a), mb = mean_of(b);
    const double va = sample_variance(a, ma) / static_cast<double>(a.size());
    const double vb = sample_variance(b, mb) / static_cast<double>(b.size());
    WelchResult r;
    const double se2 = va + vb;
    if (se2 == 0.0) {
        // Both groups constant: identical means give no evidence, distinct means are certain.
        r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
        r.dof = static_cast<double>(a.size() + b.size() - 2);
        r.p_value = ma == mb ? 1.0 : 0.0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(se2);
    r.dof = se2 * se2 /
            (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
    boost::math::students_t dist(r.dof);
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

Significance significance_vs_ft(std::span<const double> method, std::span<const double> ft, double alpha) {
    if (std::equal(method.begin(), method.end(), ft.begin(), ft.end())) return Significance::No;
    const auto r = welch_t_test(method, ft);
    if (!(r.p_value < alpha)) return Significance::No;
    return mean_of(method) > mean_of(ft) ? Significance::YesPlus : Significance::YesMinus;
}

Summary aggregate(std::span<const double> accuracies, std::span<const double> monotonicities) {
    if (accuracies.empty()) throw DataError("aggregate: no repeats");
    Summary s;
    s.repeats = accuracies.size();
    // Sum in sorted order so the result does not depend on repeat order.
    std::vector<double> acc(accuracies.begin(), accuracies.end());
    std::sort(acc.begin(), acc.end());
    s.mean = mean_of(acc);
    if (acc.size() < 2) {
        s.std = 0.0;
        s.std_undefined = true;
    } else {
        s.std = std::sqrt(sample_variance(acc, s.mean));
    }
    if (!monotonicities.empty()) {
        std::vector<double> mono(monotonicities.begin(), monotonicities.end());
        std::sort(mono.begin(), mono.end());
        s.monotonicity = mean_of(mono);
    }
    return s;
}

} // namespace itl
