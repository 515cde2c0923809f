#include "pkus/edgeprune.hpp"

#include "pkus/random.hpp"

#include <algorithm>
#include <cmath>

namespace pkus {

namespace {

constexpr double kRatioSlack = 1e-12;

double softplus(double v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, 0.0); }

double sigmoid(double v) {
    if (v >= 0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

void PruneConfig::validate() const {
    if (!(r_max >= 0.0 && r_max <= 1.0)) {
        throw std::invalid_argument("r_max must be in [0, 1]");
    }
    if (!(delta_r > 0.0) || delta_r > r_max + kRatioSlack) {
        throw std::invalid_argument("delta_r must be in (0, r_max]");
    }
    if (!(epsilon >= 0.0)) {
        throw std::invalid_argument("epsilon must be >= 0");
    }
    if (checkpoint_interval == 0) {
        throw std::invalid_argument("checkpoint_interval must be >= 1");
    }
}

double importance_score(const ProviderAdapterSet& set, SiteId site) {
    return set.at(site).adapter.dense_update().norm();
}

std::vector<std::pair<SiteId, double>> rank_sites(const ProviderAdapterSet& set) {
    std::vector<std::pair<SiteId, double>> ranking;
    ranking.reserve(set.size());
    for (const auto& [site, entry] : set.entries()) {
        ranking.emplace_back(site, importance_score(set, site));
    }
    std::sort(ranking.begin(), ranking.end(), [](const auto& l, const auto& r) {
        if (l.second != r.second) {
            return l.second < r.second;
        }
        return l.first < r.first;
    });
    return ranking;
}

std::size_t ratio_to_count(double ratio, std::size_t total) {
    return static_cast<std::size_t>(std::nearbyint(ratio * static_cast<double>(total)));
}

std::optional<std::vector<SiteId>> propose_prune(PruneState& state, const ProviderAdapterSet& set,
                                                 double target_ratio, const PruneConfig& cfg) {
    if (target_ratio > cfg.r_max + kRatioSlack) {
        return std::nullopt;
    }
    state.ranking = rank_sites(set);
    const std::size_t want = ratio_to_count(target_ratio, set.size());
    std::size_t have = set.inactive_count();
    std::vector<SiteId> out;
    for (const auto& [site, score] : state.ranking) {
        if (have >= want) {
            break;
        }
        if (set.at(site).active) {
            out.push_back(site);
            ++have;
        }
    }
    return out;
}

void apply_proposal(PruneState& state, ProviderAdapterSet& set, PruneProposal proposal) {
    if (state.pending) {
        throw std::logic_error("a pruning proposal is already pending");
    }
    for (auto site : proposal.sites) {
        set.set_active(site, false);
    }
    state.pending = std::move(proposal);
}

PruneOutcome evaluate_and_commit(PruneState& state, ProviderAdapterSet& set, double m_pruned,
                                 const PruneConfig& cfg) {
    if (!state.pending) {
        throw std::logic_error("evaluate_and_commit without a pending proposal");
    }
    if (!state.m0) {
        throw std::logic_error("evaluate_and_commit before the baseline metric is known");
    }
    PruneProposal proposal = std::move(*state.pending);
    state.pending.reset();
    if (m_pruned >= *state.m0 - cfg.epsilon) {
        state.committed_ratio = proposal.target_ratio;
        state.committed_steps = proposal.step_index;
        return PruneOutcome::Committed;
    }
    for (auto site : proposal.sites) {
        set.set_active(site, true);
    }
    state.halted = true;
    return PruneOutcome::Reverted;
}

PruneReport progressive_prune(ProviderAdapterSet& set, const PruneConfig& cfg,
                              std::size_t total_steps, const TrainFn& train, const EvalFn& eval) {
    cfg.validate();
    auto checked_eval = [&](const ProviderAdapterSet& s) {
        double m = eval(s);
        if (std::isnan(m)) {
            throw TrainingDiverged("validation metric is NaN");
        }
        return m;
    };

    PruneState state;
    PruneReport report;
    std::optional<ProviderAdapterSet> last_good;
    std::size_t done = 0;
    bool saturated = false;

    while (true) {
        const std::size_t n = std::min(cfg.checkpoint_interval, total_steps - done);
        if (n > 0) {
            train(set, n);
            done += n;
        }
        CheckpointRecord rec;
        rec.step = done;
        rec.metric_current = checked_eval(set);
        if (!state.m0) {
            state.m0 = rec.metric_current;
        }
        const double floor = *state.m0 - cfg.epsilon;
        if (rec.metric_current >= floor) {
            last_good = set;
        }

        if (!state.halted && !saturated) {
            const std::size_t step_index = state.committed_steps + 1;
            const double target = static_cast<double>(step_index) * cfg.delta_r;
            auto candidate = propose_prune(state, set, target, cfg);
            if (!candidate) {
                saturated = true;
            } else {
                rec.proposed_ratio = target;
                apply_proposal(state, set, {target, step_index, std::move(*candidate)});
                rec.metric_pruned = checked_eval(set);
                rec.outcome = evaluate_and_commit(state, set, *rec.metric_pruned, cfg);
                if (*rec.outcome == PruneOutcome::Committed) {
                    last_good = set;
                }
            }
        }
        rec.committed_ratio = state.committed_ratio;
        report.checkpoints.push_back(rec);

        if (done >= total_steps && (state.halted || saturated)) {
            break;
        }
    }

    report.m0 = *state.m0;
    report.halted = state.halted;
    report.final_metric = checked_eval(set);
    if (report.final_metric < report.m0 - cfg.epsilon && last_good) {
        set = std::move(*last_good);
        report.final_metric = checked_eval(set);
        report.restored_snapshot = true;
    }
    report.final_ratio = state.committed_ratio;
    return report;
}

LossAndGradients adapter_loss_and_gradients(const Backbone& backbone, const Dataset& data,
                                            const ProviderAdapterSet& set) {
    if (data.size() == 0) {
        throw std::invalid_argument("empty training set");
    }
    LossAndGradients out;
    for (const auto& [site, entry] : set.entries()) {
        if (entry.active) {
            out.grads.emplace(site, AdapterGradient{Mat::Zero(entry.adapter.d_out(), entry.adapter.rank()),
                                                    Mat::Zero(entry.adapter.rank(), entry.adapter.d_in())});
        }
    }
    const auto deltas = local_deltas(set);
    auto vjp = [&set](SiteId site, const Vec& x, const Vec& gy) -> Vec {
        auto it = set.entries().find(site);
        if (it == set.entries().end() || !it->second.active) {
            return Vec::Zero(x.size());
        }
        const auto& ad = it->second.adapter;
        return ad.scale() * (ad.b().transpose() * (ad.a().transpose() * gy));
    };

    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto [y, trace] = forward(backbone, data.inputs[i], deltas);
        const double sign = data.labels[i] == 1 ? 1.0 : -1.0;
        const double margin = sign * classifier_score(backbone, y);
        out.loss += softplus(-margin) * inv_n;
        const double dscore = -sign * sigmoid(-margin) * inv_n;
        const Vec grad_out = dscore * backbone.readout();
        const auto grad_y = backward(backbone, trace, grad_out, vjp);
        for (auto& [site, g] : out.grads) {
            const auto& ad = set.at(site).adapter;
            const Vec& x = trace.sites[site.ordinal()].input;
            const Vec& gy = grad_y[site.ordinal()];
            const double s = ad.scale();
            g.grad_a.noalias() += s * gy * (ad.b() * x).transpose();
            g.grad_b.noalias() += s * (ad.a().transpose() * gy) * x.transpose();
        }
    }
    if (!std::isfinite(out.loss)) {
        throw TrainingDiverged("training loss is not finite");
    }
    return out;
}

double adapter_loss(const Backbone& backbone, const Dataset& data, const ProviderAdapterSet& set) {
    const auto deltas = local_deltas(set);
    double loss = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto [y, trace] = forward(backbone, data.inputs[i], deltas);
        const double sign = data.labels[i] == 1 ? 1.0 : -1.0;
        loss += softplus(-sign * classifier_score(backbone, y));
    }
    return loss / static_cast<double>(data.size());
}

std::vector<double> train_adapters(const Backbone& backbone, const Dataset& data,
                                   ProviderAdapterSet& set, std::size_t steps, double lr) {
    std::vector<double> losses;
    losses.reserve(steps);
    if (lr == 0.0) {
        return losses;
    }
    for (std::size_t step = 0; step < steps; ++step) {
        auto lg = adapter_loss_and_gradients(backbone, data, set);
        losses.push_back(lg.loss);
        for (auto& [site, g] : lg.grads) {
            set.at(site).adapter.step(g.grad_a, g.grad_b, lr);
        }
    }
    return losses;
}

ProviderAdapterSet init_dense_adapters(const Backbone& backbone, std::string provider_id,
                                       std::string base_model_id, Eigen::Index rank,
                                       double alpha, std::uint64_t seed) {
    ProviderAdapterSet set(std::move(provider_id), std::move(base_model_id));
    Rng rng(seed, "adapter-init");
    const auto d = backbone.hidden_dim();
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t ord = 0; ord < backbone.site_count(); ++ord) {
        set.insert(SiteId::from_ordinal(ord),
                   LowRankAdapter(Mat::Zero(d, rank), rng.normal_matrix(rank, d, stddev), alpha));
    }
    return set;
}

EdgePruneResult edgeprune_run(const Backbone& backbone, const Dataset& train,
                              const Dataset& valid, ProviderAdapterSet dense_set,
                              const PruneConfig& cfg, const TrainingConfig& training) {
    dense_set.check_compatible(backbone.layers(), backbone.hidden_dim());
    std::vector<double> losses;
    auto train_fn = [&](ProviderAdapterSet& s, std::size_t steps) {
        auto l = train_adapters(backbone, train, s, steps, training.lr);
        losses.insert(losses.end(), l.begin(), l.end());
    };
    auto eval_fn = [&](const ProviderAdapterSet& s) {
        return evaluate_accuracy(backbone, valid, local_deltas(s));
    };
    auto report = progressive_prune(dense_set, cfg, training.steps, train_fn, eval_fn);
    report.train_losses = std::move(losses);
    return {std::move(dense_set), std::move(report)};
}

}  // namespace pkus
