#ifndef PKUS_SWIFTSCHED_HPP
#define PKUS_SWIFTSCHED_HPP

#include "pkus/aegis.hpp"
#include "pkus/alignagg.hpp"
#include "pkus/backbone.hpp"

#include <chrono>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pkus::sched {

/// Abstract time units. cpu_slowdown scales backbone work when nothing runs on the GPU.
struct CostModel {
    double c_msg = 50.0;
    double c_byte = 0.01;
    double c_site = 5.0;
    double c_gpu_layer = 20.0;
    double cpu_slowdown = 12.0;

    void validate() const;
};

enum class Schedule { Pipelined, Serialized, CpuOnly };
enum class Mode { Simulated, Realtime };

std::string_view schedule_name(Schedule s);
std::optional<Schedule> parse_schedule(std::string_view s);

/// Per-provider segment size: how many consecutive sites of one layer go in one message.
struct BatchPolicy {
    std::size_t max_segment = kProjectionsPerLayer;
    std::size_t default_segment = kProjectionsPerLayer;
    std::map<std::string, std::size_t> segments;

    static BatchPolicy uniform(std::size_t segment, std::size_t max = kProjectionsPerLayer);
    [[nodiscard]] std::size_t segment_for(const std::string& provider) const;
    /// Throws std::invalid_argument outside [1, max_segment].
    void set(const std::string& provider, std::size_t segment);
};

/// Splits sites (increasing, one layer) into consecutive chunks of at most segment_size.
std::vector<std::vector<SiteId>> batch_sites(const std::vector<SiteId>& sites,
                                             std::size_t segment_size);

/// Providers faster than the cross-provider median double their segment, slower
/// ones halve it, ties keep it. Results stay within [1, max_segment].
BatchPolicy adaptive_batch_update(const std::map<std::string, double>& mean_latency,
                                  BatchPolicy policy);

// Work stealing over host dispatch queues.

struct DispatchTask {
    std::size_t enclave = 0;
    std::uint64_t seq = 0;  // issue order
    double cost = 0.0;
    std::size_t batch = 0;  // index into the layer's batch list
};

struct Migration {
    std::size_t from = 0;
    std::size_t to = 0;
    DispatchTask task;
};

/// Each idle worker with an empty queue takes the oldest task of the most loaded
/// queue (ties: lowest index). Only queue fronts move, so tasks of one enclave
/// are still started in issue order.
std::vector<Migration> work_steal_tick(std::vector<std::deque<DispatchTask>>& queues,
                                       const std::vector<bool>& idle);

// Event DAG and simulation.

struct BatchSpec {
    std::size_t provider = 0;
    std::size_t sites = 0;
    std::size_t request_bytes = 0;
    std::size_t response_bytes = 0;
    std::uint64_t request_id = 0;
};

struct LayerPlan {
    std::vector<BatchSpec> batches;  // issue order
};

struct TokenPlan {
    std::vector<LayerPlan> layers;
};

struct SchedulePlan {
    std::vector<std::string> providers;
    std::vector<double> slowdown;  // per provider, multiplies enclave work
    std::vector<TokenPlan> tokens;
};

enum class EventKind { Gpu, Backbone, Dispatch, Enclave, Collect, Barrier };
std::string_view event_kind_name(EventKind k);

struct Event {
    std::size_t id = 0;
    std::size_t token = 0;
    std::uint32_t layer = 0;
    EventKind kind = EventKind::Gpu;
    std::string actor;
    double start = 0.0;
    double end = 0.0;
    std::size_t bytes = 0;
    std::size_t sites = 0;
    std::optional<std::size_t> provider;
    std::uint64_t request_id = 0;
    std::vector<std::size_t> deps;  // ids of events that must finish first
};

struct ProviderStats {
    std::string provider;
    std::size_t messages = 0;
    double mean_response = 0.0;
    double p95_response = 0.0;
};

struct ScheduleTrace {
    std::vector<Event> events;
    double makespan = 0.0;
    std::size_t message_count = 0;
    std::vector<ProviderStats> provider_stats;

    /// token,event,actor,start,end,bytes
    void write_csv(std::ostream& os) const;
    [[nodiscard]] std::string summary() const;
};

/// Response time = collect end - dispatch start, per message.
std::vector<ProviderStats> provider_statistics(const std::vector<Event>& events,
                                               const std::vector<std::string>& providers,
                                               std::optional<std::size_t> token = std::nullopt);

/// Incremental list scheduler over the event DAG; tokens run back to back.
class Simulator {
public:
    Simulator(std::vector<std::string> providers, std::vector<double> slowdown, CostModel cost,
              Schedule schedule, std::size_t workers);

    void add_token(const TokenPlan& token);
    [[nodiscard]] const ScheduleTrace& trace() const { return trace_; }
    [[nodiscard]] ScheduleTrace finish() const;

private:
    std::size_t push(Event e);
    void add_layer(std::size_t token, std::uint32_t layer, const LayerPlan& lp);

    std::vector<std::string> providers_;
    std::vector<double> slowdown_;
    CostModel cost_;
    Schedule schedule_;
    std::size_t workers_;
    ScheduleTrace trace_;
    std::size_t token_count_ = 0;
    std::optional<std::size_t> last_barrier_;
    std::vector<std::optional<std::size_t>> last_on_enclave_;
    std::vector<std::optional<std::size_t>> last_on_worker_;
    std::optional<std::size_t> last_on_collector_;
    std::optional<std::size_t> last_on_gpu_;
};

ScheduleTrace simulate_makespan(const SchedulePlan& plan, const CostModel& cost,
                                Schedule schedule, std::size_t workers = 4);

// Request execution.

/// Host-side handle to one provider's enclave.
struct ProviderLink {
    std::string provider_id;
    aegis::Enclave* enclave = nullptr;
    aegis::SymmetricKey traffic_key{};
    std::uint64_t session_id = 0;
    double slowdown = 1.0;
};

struct RunOptions {
    Mode mode = Mode::Simulated;
    Schedule schedule = Schedule::Pipelined;
    CostModel cost;
    std::size_t workers = 4;
    bool adaptive = false;
    std::size_t tokens = 1;
    std::uint64_t now = 0;  // logical time presented to policy checks
    std::chrono::milliseconds timeout{5000};
};

class RequestAborted : public std::runtime_error {
public:
    RequestAborted(std::string provider, const std::string& what)
        : std::runtime_error(what), provider_(std::move(provider)) {}
    [[nodiscard]] const std::string& provider() const { return provider_; }

private:
    std::string provider_;
};

struct RequestResult {
    std::vector<Vec> outputs;  // one per token
    ScheduleTrace trace;
    BatchPolicy final_policy;
    /// Request ids in the order each provider's enclave consumed them.
    std::map<std::string, std::vector<std::uint64_t>> enclave_order;
    /// Request ids in host issue order per provider.
    std::map<std::string, std::vector<std::uint64_t>> issue_order;
};

/// Runs `tokens` forward passes (token t+1 consumes tanh of token t's output).
/// Deltas of every contributing provider are fetched in batches, verified and
/// averaged per site before the layer proceeds. Throws RequestAborted on denial,
/// fault, dropped frame or timeout; partial outputs are discarded.
RequestResult run_request(const Backbone& backbone, const ContributorSet& contributors,
                          std::span<ProviderLink> links, BatchPolicy policy, const Vec& input,
                          const RunOptions& options);

}  // namespace pkus::sched

#endif  // PKUS_SWIFTSCHED_HPP
