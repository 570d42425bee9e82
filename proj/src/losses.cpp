#include "mcmil/losses.hpp"

#include <cmath>
#include <limits>

namespace mcmil {

void LossWeights::validate() const {
    require(lambda_ce >= 0.0 && lambda_con >= 0.0 && lambda_pf >= 0.0, ErrorCode::parameter,
            "LossWeights: lambdas must be >= 0");
    require(tau_con > 0.0, ErrorCode::parameter, "LossWeights: tau_con must be > 0");
    require(alpha >= 0.0 && beta >= 0.0, ErrorCode::parameter,
            "LossWeights: alpha and beta must be >= 0");
}

const char* to_string(LossMode mode) noexcept {
    switch (mode) {
        case LossMode::ce: return "ce";
        case LossMode::ce_con: return "ce_con";
        case LossMode::ce_con_pf: return "ce_con_pf";
    }
    return "ce_con_pf";
}

LossMode loss_mode_from_string(const std::string& name) {
    if (name == "ce" || name == "CE") return LossMode::ce;
    if (name == "ce_con" || name == "CE+CON") return LossMode::ce_con;
    if (name == "ce_con_pf" || name == "CE+CON+PF") return LossMode::ce_con_pf;
    fail(ErrorCode::config, "unknown loss mode '" + name + "' (expected ce, ce_con or ce_con_pf)");
}

LossWeights effective_weights(const LossWeights& w, LossMode mode) {
    LossWeights out = w;
    if (mode == LossMode::ce) {
        out.lambda_con = 0.0;
        out.lambda_pf = 0.0;
    } else if (mode == LossMode::ce_con) {
        out.lambda_pf = 0.0;
    }
    return out;
}

namespace {

void check_labels(std::span<const int> labels, Eigen::Index rows, Eigen::Index n_classes = -1) {
    require(static_cast<Eigen::Index>(labels.size()) == rows, ErrorCode::dimension,
            "loss: label count differs from batch size");
    for (int y : labels) {
        require(y >= 0 && (n_classes < 0 || y < n_classes), ErrorCode::label,
                "loss: label out of range");
    }
}

double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

// Unit rows and their norms; zero rows are an error (cosine undefined).
Matrix unit_rows(const Matrix& m, Vector& norms) {
    norms = m.rowwise().norm();
    for (Eigen::Index i = 0; i < norms.size(); ++i) {
        require(norms[i] > 0.0, ErrorCode::undefined, "cosine similarity undefined for a zero vector");
    }
    return norms.cwiseInverse().asDiagonal() * m;
}

double cosine(const Vector& a, const Vector& b) {
    const double na = a.norm();
    const double nb = b.norm();
    require(na > 0.0 && nb > 0.0, ErrorCode::undefined, "cosine similarity undefined for a zero vector");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace

Vector cross_entropy_terms(const Matrix& logits, std::span<const int> labels) {
    check_labels(labels, logits.rows(), logits.cols());
    Vector out(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector row = logits.row(i).transpose();
        out[i] = log_sum_exp(row) - row[labels[static_cast<std::size_t>(i)]];
    }
    return out;
}

double cross_entropy(const Matrix& logits, const Matrix& onehot) {
    require(logits.rows() >= 1, ErrorCode::dimension, "cross_entropy: empty batch");
    require(onehot.rows() == logits.rows() && onehot.cols() == logits.cols(), ErrorCode::dimension,
            "cross_entropy: label matrix shape differs from logits");
    std::vector<int> labels(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < onehot.rows(); ++i) {
        int hot = -1;
        for (Eigen::Index j = 0; j < onehot.cols(); ++j) {
            const double v = onehot(i, j);
            require(v == 0.0 || v == 1.0, ErrorCode::label, "cross_entropy: label row is not one-hot");
            if (v == 1.0) {
                require(hot < 0, ErrorCode::label, "cross_entropy: label row is not one-hot");
                hot = static_cast<int>(j);
            }
        }
        require(hot >= 0, ErrorCode::label, "cross_entropy: label row is not one-hot");
        labels[static_cast<std::size_t>(i)] = hot;
    }
    return cross_entropy_terms(logits, labels).sum();
}

Matrix cross_entropy_grad(const Matrix& logits, std::span<const int> labels, const Vector& coef) {
    check_labels(labels, logits.rows(), logits.cols());
    Matrix g(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Vector row = logits.row(i).transpose();
        const double m = row.maxCoeff();
        Vector p = (row.array() - m).exp().matrix();
        p /= p.sum();
        p[labels[static_cast<std::size_t>(i)]] -= 1.0;
        g.row(i) = coef[i] * p.transpose();
    }
    return g;
}

namespace {

struct SupconCache {
    Matrix unit;
    Vector norms;
    Matrix sims;  // cos / tau
};

SupconCache supcon_prepare(const Matrix& features, std::span<const int> labels, double tau_con) {
    require(features.rows() >= 2, ErrorCode::dimension, "supcon: need N >= 2");
    require(tau_con > 0.0, ErrorCode::parameter, "supcon: tau_con must be > 0");
    check_labels(labels, features.rows());
    SupconCache c;
    c.unit = unit_rows(features, c.norms);
    c.sims = (c.unit * c.unit.transpose()) / tau_con;
    return c;
}

}  // namespace

Vector supcon_terms(const Matrix& features, std::span<const int> labels, double tau_con,
                    bool exclude_self) {
    const SupconCache c = supcon_prepare(features, labels, tau_con);
    const Eigen::Index n = features.rows();
    Vector out = Vector::Zero(n);
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector all(n);
        Vector pos(n);
        bool any_pos = false;
        for (Eigen::Index j = 0; j < n; ++j) {
            const bool skip = exclude_self && j == i;
            all[j] = skip ? kNegInf : c.sims(i, j);
            const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
            pos[j] = (!skip && same) ? c.sims(i, j) : kNegInf;
            any_pos = any_pos || (!skip && same);
        }
        if (!any_pos) {
            continue;  // anchor without positives contributes nothing
        }
        out[i] = -(log_sum_exp(pos) - log_sum_exp(all)) / static_cast<double>(n);
    }
    return out;
}

double supcon_loss(const Matrix& features, std::span<const int> labels, double tau_con,
                   bool exclude_self) {
    return supcon_terms(features, labels, tau_con, exclude_self).sum();
}

Matrix supcon_grad(const Matrix& features, std::span<const int> labels, double tau_con,
                   bool exclude_self, const Vector& coef) {
    const SupconCache c = supcon_prepare(features, labels, tau_con);
    const Eigen::Index n = features.rows();
    // dL/dsims, then through cos(v_i, v_j) = u_i . u_j.
    Matrix dsims = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double max_all = -std::numeric_limits<double>::infinity();
        double max_pos = max_all;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (exclude_self && j == i) continue;
            max_all = std::max(max_all, c.sims(i, j));
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                max_pos = std::max(max_pos, c.sims(i, j));
            }
        }
        if (!std::isfinite(max_pos)) continue;
        double z_all = 0.0;
        double z_pos = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (exclude_self && j == i) continue;
            z_all += std::exp(c.sims(i, j) - max_all);
            if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                z_pos += std::exp(c.sims(i, j) - max_pos);
            }
        }
        const double scale = coef[i] / static_cast<double>(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            if (exclude_self && j == i) continue;
            const double p = std::exp(c.sims(i, j) - max_all) / z_all;
            const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
            const double q = same ? std::exp(c.sims(i, j) - max_pos) / z_pos : 0.0;
            dsims(i, j) += -scale * (q - p);
        }
    }
    Matrix grad = Matrix::Zero(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j || dsims(i, j) == 0.0) continue;  // cos(v, v) is constant
            const double d = dsims(i, j) / tau_con;
            const double cs = c.sims(i, j) * tau_con;
            grad.row(i) += d * (c.unit.row(j) - cs * c.unit.row(i)) / c.norms[i];
            grad.row(j) += d * (c.unit.row(i) - cs * c.unit.row(j)) / c.norms[j];
        }
    }
    return grad;
}

double tissue_compat(const Vector& v, const Vector& v_pert) {
    require(v.size() == v_pert.size(), ErrorCode::dimension, "tissue_compat: dimension mismatch");
    return 0.5 * (1.0 + cosine(v, v_pert));
}

double fidelity(const Vector& v, const Vector& v_pert) {
    require(v.size() == v_pert.size(), ErrorCode::dimension, "fidelity: dimension mismatch");
    const double c = cosine(v, v_pert);
    return std::abs(c) * 0.5 * (1.0 + c);
}

Matrix structure_tensor(const Vector& g) {
    require(g.allFinite(), ErrorCode::evaluation, "structure_tensor: non-finite input");
    return g * g.transpose();
}

Vector principal_direction(const Matrix& s) {
    require(s.rows() == s.cols(), ErrorCode::dimension, "principal_direction: matrix not square");
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
    const Eigen::Index top = s.rows() - 1;  // eigenvalues ascending
    return eig.eigenvectors().col(top) * std::sqrt(std::max(0.0, s.trace()));
}

Matrix batch_covariance(const Matrix& features, double jitter) {
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    require(n >= 1, ErrorCode::dimension, "batch_covariance: empty batch");
    Matrix cov = Matrix::Zero(d, d);
    if (n >= 2) {
        const Matrix centered = features.rowwise() - features.colwise().mean();
        cov = centered.transpose() * centered / static_cast<double>(n - 1);
        if (n < d + 1) {
            const Vector diag = cov.diagonal();
            cov = diag.asDiagonal();
        }
    }
    cov.diagonal().array() += jitter;
    return cov;
}

Vector perturb(const Vector& v, const PerturbationContext& ctx, double alpha, double beta) {
    require(ctx.grad.size() == v.size(), ErrorCode::dimension, "perturb: sensitivity dimension mismatch");
    Vector out = v + alpha * ctx.grad;
    if (beta != 0.0) {
        require(ctx.rng != nullptr, ErrorCode::parameter, "perturb: stochastic branch needs an rng");
        require(ctx.sigma.rows() == v.size() && ctx.sigma.cols() == v.size(), ErrorCode::dimension,
                "perturb: covariance dimension mismatch");
        const Cholesky chol = cholesky_psd(ctx.sigma, 0.0);
        out += beta * sample_mvn_factor(Vector::Zero(v.size()), chol.lower, *ctx.rng);
    }
    return out;
}

namespace {

void check_pf_inputs(const Matrix& features, std::span<const int> labels, const Matrix& perturbed) {
    require(features.rows() >= 2, ErrorCode::dimension, "pf_loss: need N >= 2");
    require(perturbed.rows() == features.rows() && perturbed.cols() == features.cols(),
            ErrorCode::dimension, "pf_loss: perturbed batch shape differs from features");
    check_labels(labels, features.rows());
}

}  // namespace

Vector pf_terms(const Matrix& features, std::span<const int> labels, const Matrix& perturbed) {
    check_pf_inputs(features, labels, perturbed);
    const Eigen::Index n = features.rows();
    Vector fn, pn;
    const Matrix fu = unit_rows(features, fn);
    const Matrix pu = unit_rows(perturbed, pn);
    const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
    Vector out = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double c = std::clamp(fu.row(i).dot(pu.row(j)), -1.0, 1.0);
            const double f = std::abs(c) * 0.5 * (1.0 + c);
            const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
            acc += same ? 1.0 - f : f;
        }
        out[i] = norm * acc;
    }
    return out;
}

double pf_loss(const Matrix& features, std::span<const int> labels, const Matrix& perturbed) {
    return pf_terms(features, labels, perturbed).sum();
}

PfGradient pf_grad(const Matrix& features, std::span<const int> labels, const Matrix& perturbed,
                   const Vector& coef) {
    check_pf_inputs(features, labels, perturbed);
    const Eigen::Index n = features.rows();
    Vector fn, pn;
    const Matrix fu = unit_rows(features, fn);
    const Matrix pu = unit_rows(perturbed, pn);
    const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1));
    PfGradient g{Matrix::Zero(n, features.cols()), Matrix::Zero(n, features.cols())};
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double c = std::clamp(fu.row(i).dot(pu.row(j)), -1.0, 1.0);
            const double sign = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
            const double df_dc = sign * 0.5 * (1.0 + c) + 0.5 * std::abs(c);
            const bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
            const double d = coef[i] * norm * (same ? -df_dc : df_dc);
            g.features.row(i) += d * (pu.row(j) - c * fu.row(i)) / fn[i];
            g.perturbed.row(j) += d * (fu.row(i) - c * pu.row(j)) / pn[j];
        }
    }
    return g;
}

double total_loss(const Vector& ce_terms, const Vector& con_terms, const Vector& pf_terms,
                  const LossWeights& weights, const Vector& omega) {
    require(weights.lambda_ce >= 0.0 && weights.lambda_con >= 0.0 && weights.lambda_pf >= 0.0,
            ErrorCode::parameter, "total_loss: lambdas must be >= 0");
    const Eigen::Index n = omega.size();
    require(ce_terms.size() == n && con_terms.size() == n && pf_terms.size() == n,
            ErrorCode::dimension, "total_loss: per-sample term lengths differ");
    for (Eigen::Index i = 0; i < n; ++i) {
        require(omega[i] >= 1.0, ErrorCode::parameter, "total_loss: omega entries must be >= 1");
    }
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        acc += omega[i] * (weights.lambda_ce * ce_terms[i] + weights.lambda_con * con_terms[i] +
                           weights.lambda_pf * pf_terms[i]);
    }
    return acc;
}

}  // namespace mcmil
