#include "mcmil/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mcmil {

double mean(std::span<const double> values) {
    require(!values.empty(), ErrorCode::empty_input, "mean: empty input");
    // Shifted by the first value so constant input reproduces it exactly.
    const double base = values.front();
    double acc = 0.0;
    for (double v : values) {
        acc += v - base;
    }
    return base + acc / static_cast<double>(values.size());
}

double sample_sd(std::span<const double> values) {
    require(values.size() >= 2, ErrorCode::empty_input, "sample_sd: need >= 2 values");
    const double m = mean(values);
    double ss = 0.0;
    for (double v : values) {
        ss += (v - m) * (v - m);
    }
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double quantile_sorted(std::span<const double> sorted, double q) {
    require(!sorted.empty(), ErrorCode::empty_input, "quantile: empty input");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || sorted[lo] == sorted[hi]) {
        return sorted[lo];
    }
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Interval bootstrap_ci(std::span<const double> values, int n_boot, double level, Rng& rng,
                      int threads) {
    require(!values.empty(), ErrorCode::empty_input, "bootstrap_ci: empty input");
    require(n_boot >= 1, ErrorCode::parameter, "bootstrap_ci: n_boot must be >= 1");
    require(level > 0.0 && level < 1.0, ErrorCode::parameter, "bootstrap_ci: level outside (0, 1)");
    const std::uint64_t base = rng.next_u64();
    const std::size_t n = values.size();
    std::vector<double> means(static_cast<std::size_t>(n_boot));
    parallel_for(means.size(), threads, [&](std::size_t b) {
        Rng local(base, b);
        std::vector<double> sample(n);
        for (std::size_t i = 0; i < n; ++i) {
            sample[i] = values[local.uniform_index(n)];
        }
        means[b] = mean(sample);
    });
    std::sort(means.begin(), means.end());
    const double alpha = 1.0 - level;
    return {quantile_sorted(means, alpha / 2.0), quantile_sorted(means, 1.0 - alpha / 2.0)};
}

McNemarResult mcnemar(std::span<const PairedPrediction> paired, bool continuity_correction) {
    McNemarResult r;
    for (const auto& s : paired) {
        const bool a_ok = s.pred_a == s.label;
        const bool b_ok = s.pred_b == s.label;
        if (a_ok && !b_ok) {
            ++r.b;
        } else if (!a_ok && b_ok) {
            ++r.c;
        }
    }
    require(r.b + r.c >= 1, ErrorCode::no_discordance, "mcnemar: no discordant pairs");
    const double diff = std::abs(static_cast<double>(r.b - r.c));
    const double num = continuity_correction ? std::max(0.0, diff - 1.0) : diff;
    r.chi2 = num * num / static_cast<double>(r.b + r.c);
    r.p = chi2_sf(r.chi2, 1.0);
    return r;
}

namespace {

unsigned long long binomial_exact(long long n, long long k) {
    if (k < 0 || k > n) {
        return 0;
    }
    k = std::min(k, n - k);
    unsigned long long acc = 1;
    for (long long i = 1; i <= k; ++i) {
        acc = acc * static_cast<unsigned long long>(n - k + i) / static_cast<unsigned long long>(i);
    }
    return acc;
}

double log_binomial(long long n, long long k) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
           std::lgamma(static_cast<double>(n - k) + 1.0);
}

}  // namespace

double fisher_exact(const Table2x2& t) {
    for (const auto& row : t) {
        for (long long v : row) {
            require(v >= 0, ErrorCode::degenerate_table, "fisher_exact: negative count");
        }
    }
    const long long r1 = t[0][0] + t[0][1];
    const long long r2 = t[1][0] + t[1][1];
    const long long c1 = t[0][0] + t[1][0];
    const long long n = r1 + r2;
    require(n > 0, ErrorCode::degenerate_table, "fisher_exact: all-zero table");
    const long long a_min = std::max(0LL, c1 - r2);
    const long long a_max = std::min(r1, c1);
    const long long a_obs = t[0][0];

    if (n <= kFisherExactLimit) {
        // Products of binomials are bounded by C(n, c1) <= C(30, 15), so the
        // numerators are exact integers and the tie comparison is exact.
        const unsigned long long obs = binomial_exact(r1, a_obs) * binomial_exact(r2, c1 - a_obs);
        unsigned long long acc = 0;
        for (long long a = a_min; a <= a_max; ++a) {
            const unsigned long long num = binomial_exact(r1, a) * binomial_exact(r2, c1 - a);
            if (num <= obs) {
                acc += num;
            }
        }
        return std::min(1.0, static_cast<double>(acc) / static_cast<double>(binomial_exact(n, c1)));
    }

    const double log_den = log_binomial(n, c1);
    auto log_p = [&](long long a) {
        return log_binomial(r1, a) + log_binomial(r2, c1 - a) - log_den;
    };
    const double obs = log_p(a_obs);
    constexpr double kRelSlack = 1e-7;
    double acc = 0.0;
    for (long long a = a_min; a <= a_max; ++a) {
        const double lp = log_p(a);
        if (lp <= obs + std::log1p(kRelSlack)) {
            acc += std::exp(lp);
        }
    }
    return std::min(1.0, acc);
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
    require(a.size() >= 2 && b.size() >= 2, ErrorCode::empty_input,
            "cohens_d: each group needs >= 2 samples");
    const double sa = sample_sd(a);
    const double sb = sample_sd(b);
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double pooled = std::sqrt(((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / (na + nb - 2.0));
    require(pooled > 0.0, ErrorCode::zero_variance, "cohens_d: pooled standard deviation is zero");
    return (mean(a) - mean(b)) / pooled;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

LeveneResult levene(const std::vector<std::vector<double>>& groups) {
    require(groups.size() >= 2, ErrorCode::empty_input, "levene: need >= 2 groups");
    const std::size_t k = groups.size();
    std::vector<std::vector<double>> dev(k);
    std::vector<double> group_means(k);
    double total = 0.0;
    std::size_t n_total = 0;
    for (std::size_t g = 0; g < k; ++g) {
        require(groups[g].size() >= 2, ErrorCode::empty_input, "levene: each group needs >= 2 samples");
        const double med = median(groups[g]);
        for (double x : groups[g]) {
            dev[g].push_back(std::abs(x - med));
        }
        group_means[g] = std::accumulate(dev[g].begin(), dev[g].end(), 0.0) /
                         static_cast<double>(dev[g].size());
        total += std::accumulate(dev[g].begin(), dev[g].end(), 0.0);
        n_total += dev[g].size();
    }
    const double grand = total / static_cast<double>(n_total);
    double between = 0.0;
    double within = 0.0;
    for (std::size_t g = 0; g < k; ++g) {
        const double diff = group_means[g] - grand;
        between += static_cast<double>(dev[g].size()) * diff * diff;
        for (double z : dev[g]) {
            within += (z - group_means[g]) * (z - group_means[g]);
        }
    }
    const double d1 = static_cast<double>(k - 1);
    const double d2 = static_cast<double>(n_total - k);
    LeveneResult r;
    if (within == 0.0) {
        if (between == 0.0) {
            return r;  // no dispersion anywhere: W = 0, p = 1
        }
        r.w = std::numeric_limits<double>::infinity();
        r.p = 0.0;
        return r;
    }
    r.w = (d2 / d1) * between / within;
    r.p = f_sf(r.w, d1, d2);
    return r;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorCode::dimension, "roc_auc: length mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    double n_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
        for (std::size_t m = i; m < j; ++m) {
            require(labels[order[m]] == 0 || labels[order[m]] == 1, ErrorCode::label,
                    "roc_auc: labels must be 0/1");
            if (labels[order[m]] == 1) {
                rank_sum_pos += mid_rank;
                n_pos += 1.0;
            }
        }
        i = j;
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    require(n_pos > 0.0 && n_neg > 0.0, ErrorCode::undefined, "roc_auc: labels contain a single class");
    return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

CapCurve cap_curve(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorCode::dimension, "cap_curve: length mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double positives = 0.0;
    for (int l : labels) {
        require(l == 0 || l == 1, ErrorCode::label, "cap_curve: labels must be 0/1");
        positives += l;
    }
    require(positives > 0.0 && positives < static_cast<double>(n), ErrorCode::undefined,
            "cap_curve: labels contain a single class");

    CapCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    double captured = 0.0;
    double area = 0.0;
    double prev_x = 0.0;
    double prev_y = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            ++j;
        }
        for (std::size_t m = i; m < j; ++m) {
            captured += labels[order[m]];
        }
        const double x = static_cast<double>(j) / static_cast<double>(n);
        const double y = captured / positives;
        area += 0.5 * (x - prev_x) * (y + prev_y);
        curve.points.emplace_back(x, y);
        prev_x = x;
        prev_y = y;
        i = j;
    }
    const double pi = positives / static_cast<double>(n);
    const double perfect = 1.0 - pi / 2.0;
    curve.accuracy_ratio = (area - 0.5) / (perfect - 0.5);
    return curve;
}

Confusion confusion_matrix(std::span<const int> labels, std::span<const int> preds, int n_classes) {
    require(labels.size() == preds.size(), ErrorCode::dimension, "confusion_matrix: length mismatch");
    Confusion c(static_cast<std::size_t>(n_classes), std::vector<long long>(static_cast<std::size_t>(n_classes), 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < n_classes && preds[i] >= 0 && preds[i] < n_classes,
                ErrorCode::label, "confusion_matrix: class index out of range");
        ++c[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
    }
    return c;
}

std::vector<ClassMetrics> per_class_metrics(const Confusion& confusion) {
    const std::size_t k = confusion.size();
    long long total = 0;
    std::vector<long long> row_sum(k, 0);
    std::vector<long long> col_sum(k, 0);
    for (std::size_t i = 0; i < k; ++i) {
        require(confusion[i].size() == k, ErrorCode::dimension, "per_class_metrics: matrix not square");
        for (std::size_t j = 0; j < k; ++j) {
            require(confusion[i][j] >= 0, ErrorCode::parameter, "per_class_metrics: negative count");
            row_sum[i] += confusion[i][j];
            col_sum[j] += confusion[i][j];
            total += confusion[i][j];
        }
    }
    auto ratio = [](long long num, long long den) -> std::optional<double> {
        if (den == 0) {
            return std::nullopt;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    std::vector<ClassMetrics> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        const long long tp = confusion[c][c];
        const long long fn = row_sum[c] - tp;
        const long long fp = col_sum[c] - tp;
        const long long tn = total - tp - fn - fp;
        out[c].sensitivity = ratio(tp, tp + fn);
        out[c].specificity = ratio(tn, tn + fp);
        out[c].ppv = ratio(tp, tp + fp);
        out[c].npv = ratio(tn, tn + fn);
    }
    return out;
}

double coefficient_of_variation(std::span<const double> values) {
    const double m = mean(values);
    require(m != 0.0, ErrorCode::undefined, "coefficient_of_variation: zero mean");
    return 100.0 * sample_sd(values) / m;
}

namespace {

constexpr int kMaxIter = 500;
constexpr double kEps = 1e-15;
constexpr double kTiny = 1e-300;

// Continued fraction for Q(a, x), modified Lentz.
double gamma_q_cf(double a, double x) {
    double b = x + 1.0 - a;
    double c = 1.0 / kTiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= kMaxIter; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < kTiny) d = kTiny;
        c = b + an / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

double gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 1; n <= kMaxIter; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::abs(del) < std::abs(sum) * kEps) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double beta_cf(double a, double b, double x) {
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double regularized_gamma_p(double a, double x) {
    require(a > 0.0 && x >= 0.0, ErrorCode::parameter, "regularized_gamma_p: a > 0, x >= 0 required");
    if (x == 0.0) return 0.0;
    return x < a + 1.0 ? gamma_p_series(a, x) : 1.0 - gamma_q_cf(a, x);
}

double regularized_gamma_q(double a, double x) {
    require(a > 0.0 && x >= 0.0, ErrorCode::parameter, "regularized_gamma_q: a > 0, x >= 0 required");
    if (x == 0.0) return 1.0;
    return x < a + 1.0 ? 1.0 - gamma_p_series(a, x) : gamma_q_cf(a, x);
}

double regularized_beta(double a, double b, double x) {
    require(a > 0.0 && b > 0.0 && x >= 0.0 && x <= 1.0, ErrorCode::parameter,
            "regularized_beta: a, b > 0 and x in [0, 1] required");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                  a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_cf(a, b, x) / a;
    }
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double chi2_sf(double x, double dof) {
    require(dof > 0.0, ErrorCode::parameter, "chi2_sf: dof must be > 0");
    if (x <= 0.0) return 1.0;
    if (dof == 1.0) {
        return std::erfc(std::sqrt(x / 2.0));
    }
    return regularized_gamma_q(dof / 2.0, x / 2.0);
}

double f_sf(double f, double d1, double d2) {
    require(d1 > 0.0 && d2 > 0.0, ErrorCode::parameter, "f_sf: degrees of freedom must be > 0");
    if (f <= 0.0) return 1.0;
    if (std::isinf(f)) return 0.0;
    return regularized_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

}  // namespace mcmil
