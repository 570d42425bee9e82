#include "mcmil/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mcmil {

void TrainConfig::validate() const {
    require(learning_rate > 0.0, ErrorCode::parameter, "TrainConfig: learning_rate must be > 0");
    require(patience >= 1, ErrorCode::parameter, "TrainConfig: patience must be >= 1");
    require(max_epochs >= 1, ErrorCode::parameter, "TrainConfig: max_epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::parameter, "TrainConfig: batch_size must be >= 1");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 &&
                adam_epsilon > 0.0,
            ErrorCode::parameter, "TrainConfig: invalid Adam constants");
    require(margin.gamma >= 0.0 && margin.kappa > 0.0, ErrorCode::parameter,
            "TrainConfig: margin gamma >= 0 and kappa > 0 required");
    loss_weights.validate();
}

std::vector<SlideForward> forward_batch(const ModelParams& p, const std::vector<const PatchBag*>& bags,
                                        int threads) {
    std::vector<SlideForward> out(bags.size());
    parallel_for(bags.size(), threads, [&](std::size_t i) { out[i] = forward(bags[i]->patches, p); });
    return out;
}

BatchObjective batch_objective(const ModelParams& p, const std::vector<const PatchBag*>& bags,
                               const std::vector<SlideForward>& fwd, std::span<const int> labels,
                               const Vector& omega, const LossWeights& weights, PerturbationNoise noise,
                               int threads) {
    weights.validate();
    const auto n = static_cast<Eigen::Index>(bags.size());
    require(n >= 1, ErrorCode::empty_input, "batch_objective: empty batch");
    require(static_cast<Eigen::Index>(fwd.size()) == n && static_cast<Eigen::Index>(labels.size()) == n &&
                omega.size() == n,
            ErrorCode::dimension, "batch_objective: batch component sizes differ");

    const Eigen::Index k = p.dims.n_classes;
    const Eigen::Index d = p.dims.latent;
    Matrix logits(n, k);
    Matrix feats(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        logits.row(i) = fwd[static_cast<std::size_t>(i)].logits.transpose();
        feats.row(i) = fwd[static_cast<std::size_t>(i)].z.transpose();
    }

    BatchObjective out{LossBreakdown{}, ModelParams::zeros(p.dims), Vector::Zero(n), Vector::Zero(n),
                       Vector::Zero(n)};
    Matrix dlogits = Matrix::Zero(n, k);
    Matrix dfeats = Matrix::Zero(n, d);
    Matrix dhead_w = Matrix::Zero(k, d);

    if (weights.lambda_ce > 0.0) {
        out.ce_terms = cross_entropy_terms(logits, labels);
        dlogits += cross_entropy_grad(logits, labels, omega * weights.lambda_ce);
    }
    const bool pairwise_ok = n >= 2;
    if (weights.lambda_con > 0.0 && pairwise_ok) {
        out.con_terms = supcon_terms(feats, labels, weights.tau_con, weights.supcon_exclude_self);
        dfeats += supcon_grad(feats, labels, weights.tau_con, weights.supcon_exclude_self,
                              omega * weights.lambda_con);
    }
    if (weights.lambda_pf > 0.0 && pairwise_ok) {
        std::vector<int> predicted(static_cast<std::size_t>(n));
        Matrix sens(n, d);
        for (Eigen::Index i = 0; i < n; ++i) {
            predicted[static_cast<std::size_t>(i)] = logit_margin(logits.row(i).transpose()).predicted;
            sens.row(i) = p.head_w.row(predicted[static_cast<std::size_t>(i)]);
        }
        Matrix perturbed = feats + weights.alpha * sens;
        if (weights.beta != 0.0) {
            if (noise.fixed != nullptr) {
                require(noise.fixed->rows() == n && noise.fixed->cols() == d, ErrorCode::dimension,
                        "batch_objective: fixed noise shape mismatch");
                perturbed += weights.beta * (*noise.fixed);
            } else if (noise.rng != nullptr) {
                const Cholesky chol = cholesky_psd(batch_covariance(feats), 0.0);
                for (Eigen::Index i = 0; i < n; ++i) {
                    perturbed.row(i) +=
                        weights.beta * sample_mvn_factor(Vector::Zero(d), chol.lower, *noise.rng).transpose();
                }
            }
        }
        out.pf_terms = pf_terms(feats, labels, perturbed);
        const PfGradient g = pf_grad(feats, labels, perturbed, omega * weights.lambda_pf);
        dfeats += g.features + g.perturbed;
        for (Eigen::Index i = 0; i < n; ++i) {
            dhead_w.row(predicted[static_cast<std::size_t>(i)]) += weights.alpha * g.perturbed.row(i);
        }
    }

    out.loss.ce = out.ce_terms.sum();
    out.loss.con = out.con_terms.sum();
    out.loss.pf = out.pf_terms.sum();
    out.loss.total = total_loss(out.ce_terms, out.con_terms, out.pf_terms, weights, omega);
    out.loss.mean_omega = omega.mean();

    std::vector<ModelParams> grads(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        const auto r = static_cast<Eigen::Index>(i);
        grads[i] = backward(bags[i]->patches, fwd[i], p, dlogits.row(r).transpose(),
                            dfeats.row(r).transpose())
                       .params;
    });
    for (const auto& g : grads) {
        out.grad += g;
    }
    out.grad.head_w += dhead_w;
    return out;
}

namespace {

class Adam {
public:
    Adam(std::size_t n, const TrainConfig& c)
        : m_(Vector::Zero(static_cast<Eigen::Index>(n))),
          v_(Vector::Zero(static_cast<Eigen::Index>(n))),
          lr_(c.learning_rate), b1_(c.adam_beta1), b2_(c.adam_beta2), eps_(c.adam_epsilon) {}

    void step(Vector& x, const Vector& g) {
        ++t_;
        m_ = b1_ * m_ + (1.0 - b1_) * g;
        v_ = b2_ * v_ + (1.0 - b2_) * g.cwiseAbs2();
        const double c1 = 1.0 - std::pow(b1_, t_);
        const double c2 = 1.0 - std::pow(b2_, t_);
        x.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

private:
    Vector m_;
    Vector v_;
    double lr_;
    double b1_;
    double b2_;
    double eps_;
    int t_ = 0;
};

// Contiguous batches; a trailing singleton joins the previous batch so the
// pairwise losses always see N >= 2.
std::vector<std::pair<std::size_t, std::size_t>> make_batches(std::size_t n, std::size_t size) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t b = 0; b < n; b += size) {
        out.emplace_back(b, std::min(n, b + size));
    }
    if (out.size() >= 2 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

}  // namespace

EvalReport evaluate(const ModelParams& p, const std::vector<PatchBag>& bags, int threads) {
    EvalReport r;
    const std::size_t n = bags.size();
    r.bags.resize(n);
    r.embeddings.resize(static_cast<Eigen::Index>(n), p.dims.latent);
    parallel_for(n, threads, [&](std::size_t i) {
        const SlideForward f = forward(bags[i].patches, p);
        BagScore& s = r.bags[i];
        s.label = bags[i].label;
        const LogitMargin lm = logit_margin(f.logits);
        s.predicted = lm.predicted;
        s.d_out = lm.d_out;
        const double top = f.logits.maxCoeff();
        s.probabilities = (f.logits.array() - top).exp().matrix();
        s.probabilities /= s.probabilities.sum();
        try {
            s.d_feat = feature_margins(f.z, p.head_w, p.head_b).d_feat;
        } catch (const Error&) {
            s.d_feat = 0.0;
        }
        r.embeddings.row(static_cast<Eigen::Index>(i)) = f.z.transpose();
    });
    std::vector<int> labels(n);
    std::vector<int> preds(n);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = r.bags[i].label;
        preds[i] = r.bags[i].predicted;
        correct += labels[i] == preds[i] ? 1 : 0;
    }
    r.accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
    r.confusion = confusion_matrix(labels, preds, p.dims.n_classes);
    return r;
}

TrainResult train(const ModelDims& dims, const TrainConfig& config, const std::vector<PatchBag>& train_bags,
                  const std::vector<PatchBag>& val_bags) {
    config.validate();
    dims.validate();
    require(!train_bags.empty() && !val_bags.empty(), ErrorCode::empty_input,
            "train: training and validation sets must be nonempty");
    for (const auto* set : {&train_bags, &val_bags}) {
        for (const auto& b : *set) {
            require(b.patches.cols() == dims.in_dim, ErrorCode::dimension,
                    "train: bag feature dimension differs from model in_dim");
            require(b.label >= 0 && b.label < dims.n_classes, ErrorCode::label,
                    "train: bag label outside [0, n_classes)");
        }
    }

    Rng init_rng(config.seed, 1);
    Rng shuffle_rng(config.seed, 2);
    Rng noise_rng(config.seed, 3);
    const LossWeights weights = effective_weights(config.loss_weights, config.loss_mode);

    TrainResult result{ModelParams::initialize(dims, init_rng), RunHistory{}, MarginNormalizer{}};
    ModelParams& params = result.model;
    RunHistory& history = result.history;
    ModelParams best = params;
    double best_acc = -1.0;
    int since_best = 0;
    Adam adam(params.size(), config);
    Vector flat = params.flatten();

    std::vector<std::size_t> order(train_bags.size());
    std::iota(order.begin(), order.end(), 0);
    int step = 0;

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        // Freeze min-max constants for this epoch from the training set.
        const EvalReport train_eval = evaluate(params, train_bags, config.threads);
        std::vector<double> d_train(train_bags.size());
        for (std::size_t i = 0; i < d_train.size(); ++i) {
            d_train[i] = train_eval.bags[i].d_out;
        }
        const MarginNormalizer norm = MarginNormalizer::fit(d_train);
        result.normalizer = norm;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_accuracy = train_eval.accuracy;
        {
            double om_bad = 0.0, om_ok = 0.0;
            int n_bad = 0, n_ok = 0;
            for (const auto& s : train_eval.bags) {
                const double w = margin_weight(norm.apply(s.d_out), config.margin.gamma,
                                               config.margin.tau_m, config.margin.kappa);
                if (s.predicted == s.label) {
                    om_ok += w;
                    ++n_ok;
                } else {
                    om_bad += w;
                    ++n_bad;
                }
            }
            if (n_bad > 0) rec.omega_misclassified = om_bad / n_bad;
            if (n_ok > 0) rec.omega_correct = om_ok / n_ok;
        }

        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        double omega_sum = 0.0;
        for (const auto& [begin, end] : make_batches(order.size(), static_cast<std::size_t>(config.batch_size))) {
            std::vector<const PatchBag*> batch;
            std::vector<int> labels;
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(&train_bags[order[i]]);
                labels.push_back(train_bags[order[i]].label);
            }
            const auto fwd = forward_batch(params, batch, config.threads);
            Vector omega(static_cast<Eigen::Index>(batch.size()));
            for (std::size_t i = 0; i < batch.size(); ++i) {
                omega[static_cast<Eigen::Index>(i)] =
                    margin_weight(norm.apply(logit_margin(fwd[i].logits).d_out), config.margin.gamma,
                                  config.margin.tau_m, config.margin.kappa);
            }
            PerturbationNoise noise;
            noise.rng = &noise_rng;
            const BatchObjective obj =
                batch_objective(params, batch, fwd, labels, omega, weights, noise, config.threads);
            ++step;
            if (!std::isfinite(obj.loss.total) || !obj.grad.flatten().allFinite()) {
                history.stopping_epoch = epoch;
                throw DivergedError("train: non-finite loss at step " + std::to_string(step), params, history);
            }
            history.steps.push_back({step, epoch, obj.loss});
            rec.train.ce += obj.loss.ce;
            rec.train.con += obj.loss.con;
            rec.train.pf += obj.loss.pf;
            rec.train.total += obj.loss.total;
            omega_sum += omega.sum();

            adam.step(flat, obj.grad.flatten());
            ModelParams next = params;
            next.assign(flat);
            if (!flat.allFinite()) {
                history.stopping_epoch = epoch;
                throw DivergedError("train: non-finite parameters at step " + std::to_string(step), params,
                                    history);
            }
            params = std::move(next);
        }
        rec.train.mean_omega = omega_sum / static_cast<double>(train_bags.size());

        const EvalReport val = evaluate(params, val_bags, config.threads);
        rec.val_accuracy = val.accuracy;
        std::vector<double> d_out(val.bags.size());
        std::vector<double> d_feat(val.bags.size());
        std::vector<int> val_labels(val.bags.size());
        for (std::size_t i = 0; i < val.bags.size(); ++i) {
            d_out[i] = val.bags[i].d_out;
            d_feat[i] = val.bags[i].d_feat;
            val_labels[i] = val.bags[i].label;
        }
        rec.mean_d_out = mean(d_out);
        if (d_out.size() >= 2) {
            try {
                rec.kendall_feat_out = kendall_tau(d_feat, d_out);
            } catch (const Error&) {
            }
        }
        try {
            rec.neural_collapse = neural_collapse_index(val.embeddings, val_labels);
        } catch (const Error&) {
        }
        history.epochs.push_back(rec);
        history.stopping_epoch = epoch;

        // Ties refresh the checkpoint but not the patience counter.
        if (val.accuracy >= best_acc) {
            best = params;
            history.best_epoch = epoch;
        }
        if (val.accuracy > best_acc) {
            best_acc = val.accuracy;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }

    history.best_val_accuracy = best_acc;
    const std::size_t tail = std::min<std::size_t>(10, history.epochs.size());
    std::vector<double> last;
    for (std::size_t i = history.epochs.size() - tail; i < history.epochs.size(); ++i) {
        last.push_back(history.epochs[i].val_accuracy);
    }
    history.last10_mean = mean(last);
    history.last10_std = last.size() >= 2 ? sample_sd(last) : 0.0;
    params = std::move(best);
    return result;
}

std::vector<MarginReport> margin_reports(const ModelParams& p, const std::vector<PatchBag>& bags,
                                         const MarginNormalizer& normalizer, const MarginParams& margin,
                                         const MarginOptions& options, int threads) {
    std::vector<MarginReport> out(bags.size());
    const BagScorer scorer = make_scorer(p);
    parallel_for(bags.size(), threads, [&](std::size_t i) {
        const SlideForward f = forward(bags[i].patches, p);
        MarginReport& r = out[i];
        r.label = bags[i].label;
        const LogitMargin lm = logit_margin(f.logits);
        r.predicted = lm.predicted;
        r.d_out = lm.d_out;
        const FeatureMargins fm = feature_margins(f.z, p.head_w, p.head_b, options.p_norm);
        r.pairwise = fm.pairwise;
        r.d_feat = fm.d_feat;
        r.omega = margin_weight(normalizer.apply(lm.d_out), margin.gamma, margin.tau_m, margin.kappa);
        if (options.estimate_input) {
            Rng rng(options.seed, i);
            r.d_in_estimate = estimate_input_margin(scorer, bags[i].patches, options.input, rng);
        }
    });
    return out;
}

}  // namespace mcmil
