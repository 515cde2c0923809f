#ifndef PKUS_DEPLOYMENT_HPP
#define PKUS_DEPLOYMENT_HPP

#include "pkus/aegis.hpp"
#include "pkus/alignagg.hpp"
#include "pkus/audit.hpp"
#include "pkus/backbone.hpp"
#include "pkus/edgeprune.hpp"
#include "pkus/swiftsched.hpp"

#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pkus {

class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ProviderSpec {
    std::string id;
    std::uint64_t seed = 1;
    Eigen::Index rank = 2;
    double alpha = 4.0;
    std::optional<std::size_t> shard;  // train on one shard of the train split
    PruneConfig prune;
    TrainingConfig train;
    double slowdown = 1.0;
};

struct PlanSpec {
    std::string owner;
    std::vector<aegis::PolicyEntry> leases;
};

struct RequestSpec {
    std::string name;
    std::string client;
    std::vector<std::string> providers;
    std::size_t tokens = 1;
    std::size_t input_index = 0;
    bool evaluate = false;  // also report accuracy on the validation split
};

struct PolicyUpdateSpec {
    std::string owner;
    aegis::PolicyOp op = aegis::PolicyOp::Add;
    aegis::PolicyEntry lease;
};

struct RevocationSpec {
    std::string provider;
};

struct TimelineEvent {
    std::uint64_t at = 0;
    std::optional<PolicyUpdateSpec> policy_update;
    std::optional<RequestSpec> request;
    std::optional<RevocationSpec> revoke;
};

struct ServingSpec {
    sched::Mode mode = sched::Mode::Simulated;
    sched::Schedule schedule = sched::Schedule::Pipelined;
    sched::CostModel cost;
    std::size_t segment_size = kProjectionsPerLayer;
    std::size_t workers = 4;
    bool adaptive = false;
};

struct TaskSpec {
    std::size_t train = 400;
    std::size_t valid = 200;
    double label_noise = 0.0;
    std::size_t shards = 1;
};

struct Scenario {
    std::uint64_t seed = 7;
    std::string base_model_id = "toy-backbone-v1";
    BackboneConfig backbone;
    TaskSpec task;
    std::vector<ProviderSpec> providers;
    std::vector<PlanSpec> plans;
    std::vector<TimelineEvent> timeline;  // stable-sorted by `at`
    ServingSpec serving;
    std::vector<std::string> tamper_onboarding;  // fault: flip a ciphertext bit in transit

    /// Throws ScenarioError on unresolved references or bad values.
    void validate() const;
    [[nodiscard]] const ProviderSpec& provider(std::string_view id) const;
    [[nodiscard]] const PlanSpec& plan_for(std::string_view owner) const;
    /// Copy without the given provider; requests simply drop it.
    [[nodiscard]] Scenario without_provider(std::string_view id) const;
};

Scenario parse_scenario(std::string_view json_text);
Scenario load_scenario(const std::string& path);

/// Scenario-derived key material; nothing is stored on disk.
crypto::SigningKey owner_identity(std::uint64_t seed, std::string_view provider_id);
aegis::AttestationHardware testbed_hardware(std::uint64_t seed);
aegis::RuntimeImage enclave_runtime_image();

struct TaskData {
    Backbone backbone;
    Dataset train;
    Dataset valid;
};

TaskData make_task_data(const Scenario& s);

/// Train and prune one provider's adapters; the blob is the adapter file format.
struct PruneOutput {
    Bytes blob;
    ProviderAdapterSet set;
    PruneReport report;
};
PruneOutput prune_provider(const Scenario& s, const TaskData& data, const ProviderSpec& p);

struct ProviderStatus {
    std::string id;
    aegis::EnclaveState state = aegis::EnclaveState::Prepared;
    std::string error;  // empty on success
    std::optional<aegis::Digest> plan_hash;
    std::size_t active_sites = 0;
};

struct RequestOutcome {
    std::string name;
    std::uint64_t at = 0;
    bool ok = false;
    std::string error;
    std::vector<std::string> providers_used;
    std::vector<Vec> outputs;
    sched::ScheduleTrace trace;
    std::optional<double> accuracy;
};

/// An operator host with one enclave per provider, driven by a scenario.
class Deployment {
public:
    Deployment(Scenario scenario, TaskData data);
    ~Deployment();

    /// prepare -> bind -> channel -> onboard for every provider. Failures are
    /// recorded per provider; returns false if any provider did not reach Onboarded.
    bool launch(const std::map<std::string, Bytes>& adapter_blobs);

    void apply_policy_update(const PolicyUpdateSpec& update);
    RequestOutcome serve(const RequestSpec& request, std::uint64_t now);
    aegis::Quote revoke(const std::string& provider);

    /// Runs the scenario timeline. With include_requests = false only policy
    /// updates and revocations are applied.
    std::vector<RequestOutcome> run_timeline(bool include_requests = true);

    [[nodiscard]] std::vector<ProviderStatus> status() const;
    [[nodiscard]] const AuditLog& audit() const { return audit_; }
    [[nodiscard]] const aegis::PublicKey& hardware_key() const { return hw_.public_key(); }
    [[nodiscard]] const Scenario& scenario() const { return scenario_; }
    [[nodiscard]] const TaskData& data() const { return data_; }
    [[nodiscard]] const std::vector<std::string>& errors() const { return errors_; }

private:
    struct Node;
    Node& node(const std::string& id);

    Scenario scenario_;
    TaskData data_;
    aegis::AttestationHardware hw_;
    aegis::RuntimeImage image_;
    crypto::DeterministicStream verifier_nonces_;
    AuditLog audit_;
    std::vector<std::unique_ptr<Node>> nodes_;
    std::vector<std::string> errors_;
};

/// Synthetic serving benchmark: k providers with random adapters on every site,
/// onboarded through the full protocol, one request over all of them.
struct BenchConfig {
    std::size_t providers = 4;
    std::size_t tokens = 1;
    std::uint64_t seed = 7;
    std::uint32_t layers = 4;
    Eigen::Index hidden_dim = 16;
    Eigen::Index rank = 4;
    ServingSpec serving;
};

/// Random dense adapter set (every site active) for benchmarks and tests.
ProviderAdapterSet random_adapter_set(const Backbone& backbone, const std::string& provider_id,
                                      const std::string& base_model_id, Eigen::Index rank,
                                      std::uint64_t seed);

RequestOutcome run_bench(const BenchConfig& cfg);

}  // namespace pkus

#endif  // PKUS_DEPLOYMENT_HPP
