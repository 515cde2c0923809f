#ifndef PKUS_EDGEPRUNE_HPP
#define PKUS_EDGEPRUNE_HPP

#include "pkus/adapter.hpp"
#include "pkus/backbone.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace pkus {

struct PruneConfig {
    double r_max = 0.75;
    double delta_r = 0.125;
    double epsilon = 0.01;             // in metric units (0.01 == one point of accuracy)
    std::size_t checkpoint_interval = 20;  // training steps between proposals

    void validate() const;
};

struct TrainingConfig {
    std::size_t steps = 200;
    double lr = 0.5;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Frobenius norm of the effective update scale * A * B.
double importance_score(const ProviderAdapterSet& set, SiteId site);

/// All sites ranked by ascending importance, ties by SiteId.
std::vector<std::pair<SiteId, double>> rank_sites(const ProviderAdapterSet& set);

/// round(ratio * total) with ties to even.
std::size_t ratio_to_count(double ratio, std::size_t total);

struct PruneProposal {
    double target_ratio = 0.0;
    std::size_t step_index = 0;
    std::vector<SiteId> sites;  // newly deactivated
};

struct PruneState {
    double committed_ratio = 0.0;
    std::size_t committed_steps = 0;
    std::optional<double> m0;
    std::vector<std::pair<SiteId, double>> ranking;
    bool halted = false;
    std::optional<PruneProposal> pending;
};

/// Lowest-ranked active sites needed to reach round(target_ratio * |S|) inactive
/// sites. Empty optional when the target exceeds r_max.
std::optional<std::vector<SiteId>> propose_prune(PruneState& state, const ProviderAdapterSet& set,
                                                 double target_ratio, const PruneConfig& cfg);

/// Deactivates the proposal's sites and marks it pending.
void apply_proposal(PruneState& state, ProviderAdapterSet& set, PruneProposal proposal);

enum class PruneOutcome { Committed, Reverted };

/// Commits when m_pruned >= m0 - epsilon, otherwise restores the active flags
/// and halts for good. Throws std::logic_error without a pending proposal.
PruneOutcome evaluate_and_commit(PruneState& state, ProviderAdapterSet& set, double m_pruned,
                                 const PruneConfig& cfg);

struct CheckpointRecord {
    std::size_t step = 0;
    double metric_current = 0.0;
    std::optional<double> proposed_ratio;
    std::optional<double> metric_pruned;
    std::optional<PruneOutcome> outcome;
    double committed_ratio = 0.0;
};

struct PruneReport {
    double m0 = 0.0;
    double final_ratio = 0.0;
    double final_metric = 0.0;
    bool halted = false;
    bool restored_snapshot = false;
    std::vector<CheckpointRecord> checkpoints;
    std::vector<double> train_losses;
};

using TrainFn = std::function<void(ProviderAdapterSet&, std::size_t steps)>;
using EvalFn = std::function<double(const ProviderAdapterSet&)>;

/// Training-interleaved pruning search. m0 is measured at the first checkpoint.
/// Checkpoints keep running after the training budget is spent until the search
/// halts or reaches r_max.
PruneReport progressive_prune(ProviderAdapterSet& set, const PruneConfig& cfg,
                              std::size_t total_steps, const TrainFn& train, const EvalFn& eval);

// Training on the toy task.

struct AdapterGradient {
    Mat grad_a;
    Mat grad_b;
};

struct LossAndGradients {
    double loss = 0.0;
    std::map<SiteId, AdapterGradient> grads;  // active sites only
};

/// Mean logistic loss of the classifier over `data` and its gradient with
/// respect to every active adapter's factors.
LossAndGradients adapter_loss_and_gradients(const Backbone& backbone, const Dataset& data,
                                            const ProviderAdapterSet& set);

double adapter_loss(const Backbone& backbone, const Dataset& data, const ProviderAdapterSet& set);

/// Full-batch gradient descent on active adapters. Returns the loss before each step.
std::vector<double> train_adapters(const Backbone& backbone, const Dataset& data,
                                   ProviderAdapterSet& set, std::size_t steps, double lr);

/// Zero-initialised A and Gaussian B at every site of the backbone.
ProviderAdapterSet init_dense_adapters(const Backbone& backbone, std::string provider_id,
                                       std::string base_model_id, Eigen::Index rank,
                                       double alpha, std::uint64_t seed);

struct EdgePruneResult {
    ProviderAdapterSet set;
    PruneReport report;
};

EdgePruneResult edgeprune_run(const Backbone& backbone, const Dataset& train,
                              const Dataset& valid, ProviderAdapterSet dense_set,
                              const PruneConfig& cfg, const TrainingConfig& training);

}  // namespace pkus

#endif  // PKUS_EDGEPRUNE_HPP
