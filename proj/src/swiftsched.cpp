#include "pkus/swiftsched.hpp"

#include "pkus/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

namespace pkus::sched {

void CostModel::validate() const {
    for (double v : {c_msg, c_byte, c_site, c_gpu_layer, cpu_slowdown}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("cost model parameters must be finite and non-negative");
        }
    }
}

std::string_view schedule_name(Schedule s) {
    switch (s) {
        case Schedule::Pipelined: return "pipelined";
        case Schedule::Serialized: return "serialized";
        case Schedule::CpuOnly: return "cpu";
    }
    return "?";
}

std::optional<Schedule> parse_schedule(std::string_view s) {
    for (auto v : {Schedule::Pipelined, Schedule::Serialized, Schedule::CpuOnly}) {
        if (schedule_name(v) == s) return v;
    }
    return std::nullopt;
}

BatchPolicy BatchPolicy::uniform(std::size_t segment, std::size_t max) {
    if (max < 1 || segment < 1 || segment > max) {
        throw std::invalid_argument("segment size must be in [1, " + std::to_string(max) + "]");
    }
    BatchPolicy p;
    p.max_segment = max;
    p.default_segment = segment;
    return p;
}

std::size_t BatchPolicy::segment_for(const std::string& provider) const {
    auto it = segments.find(provider);
    return it == segments.end() ? default_segment : it->second;
}

void BatchPolicy::set(const std::string& provider, std::size_t segment) {
    if (segment < 1 || segment > max_segment) {
        throw std::invalid_argument("segment size " + std::to_string(segment) + " outside [1, " +
                                    std::to_string(max_segment) + "]");
    }
    segments[provider] = segment;
}

std::vector<std::vector<SiteId>> batch_sites(const std::vector<SiteId>& sites,
                                             std::size_t segment_size) {
    if (segment_size == 0) {
        throw std::invalid_argument("segment size must be >= 1");
    }
    std::vector<std::vector<SiteId>> out;
    for (std::size_t i = 0; i < sites.size(); i += segment_size) {
        const auto end = std::min(sites.size(), i + segment_size);
        out.emplace_back(sites.begin() + static_cast<std::ptrdiff_t>(i),
                         sites.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

BatchPolicy adaptive_batch_update(const std::map<std::string, double>& mean_latency,
                                  BatchPolicy policy) {
    if (mean_latency.empty()) {
        return policy;
    }
    std::vector<double> v;
    v.reserve(mean_latency.size());
    for (const auto& [k, lat] : mean_latency) v.push_back(lat);
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    for (const auto& [k, lat] : mean_latency) {
        const std::size_t cur = policy.segment_for(k);
        if (lat < median) {
            policy.set(k, std::min(2 * cur, policy.max_segment));
        } else if (lat > median) {
            policy.set(k, std::max<std::size_t>(cur / 2, 1));
        }
    }
    return policy;
}

std::vector<Migration> work_steal_tick(std::vector<std::deque<DispatchTask>>& queues,
                                       const std::vector<bool>& idle) {
    if (idle.size() != queues.size()) {
        throw std::invalid_argument("work_steal_tick: one idle flag per queue");
    }
    std::vector<Migration> moves;
    for (std::size_t w = 0; w < queues.size(); ++w) {
        if (!idle[w] || !queues[w].empty()) {
            continue;
        }
        std::size_t victim = queues.size();
        for (std::size_t v = 0; v < queues.size(); ++v) {
            if (v == w || queues[v].empty()) continue;
            if (victim == queues.size() || queues[v].size() > queues[victim].size()) {
                victim = v;
            }
        }
        if (victim == queues.size()) {
            break;  // nothing left anywhere
        }
        // An idle owner serves its own front; steal only from busy owners or
        // queues holding more than one task.
        if (idle[victim] && queues[victim].size() < 2) {
            continue;
        }
        DispatchTask t = queues[victim].front();
        queues[victim].pop_front();
        queues[w].push_back(t);
        moves.push_back({victim, w, t});
    }
    return moves;
}

std::string_view event_kind_name(EventKind k) {
    switch (k) {
        case EventKind::Gpu: return "gpu";
        case EventKind::Backbone: return "backbone_cpu";
        case EventKind::Dispatch: return "dispatch";
        case EventKind::Enclave: return "enclave";
        case EventKind::Collect: return "collect";
        case EventKind::Barrier: return "barrier";
    }
    return "?";
}

void ScheduleTrace::write_csv(std::ostream& os) const {
    os << "token,event,actor,start,end,bytes\n";
    for (const auto& e : events) {
        os << e.token << ',' << event_kind_name(e.kind) << ',' << e.actor << ',' << e.start << ','
           << e.end << ',' << e.bytes << '\n';
    }
}

std::string ScheduleTrace::summary() const {
    std::ostringstream os;
    os << "makespan=" << makespan << " message_count=" << message_count;
    for (const auto& s : provider_stats) {
        os << " p95[" << s.provider << "]=" << s.p95_response;
    }
    return os.str();
}

std::vector<ProviderStats> provider_statistics(const std::vector<Event>& events,
                                               const std::vector<std::string>& providers,
                                               std::optional<std::size_t> token) {
    std::map<std::uint64_t, double> dispatch_start;
    std::vector<std::vector<double>> samples(providers.size());
    for (const auto& e : events) {
        if (token && e.token != *token) continue;
        if (!e.provider) continue;
        if (e.kind == EventKind::Dispatch) {
            dispatch_start[e.request_id] = e.start;
        } else if (e.kind == EventKind::Collect) {
            auto it = dispatch_start.find(e.request_id);
            if (it != dispatch_start.end()) {
                samples[*e.provider].push_back(e.end - it->second);
            }
        } else if (e.kind == EventKind::Enclave && e.actor == "tee-cpu") {
            samples[*e.provider].push_back(e.end - e.start);
        }
    }
    std::vector<ProviderStats> out;
    for (std::size_t p = 0; p < providers.size(); ++p) {
        auto& s = samples[p];
        if (s.empty()) continue;
        ProviderStats ps;
        ps.provider = providers[p];
        ps.messages = s.size();
        ps.mean_response = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        std::sort(s.begin(), s.end());
        // Nearest-rank percentile.
        const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(s.size())));
        ps.p95_response = s[std::max<std::size_t>(rank, 1) - 1];
        out.push_back(ps);
    }
    return out;
}

Simulator::Simulator(std::vector<std::string> providers, std::vector<double> slowdown,
                     CostModel cost, Schedule schedule, std::size_t workers)
    : providers_(std::move(providers)),
      slowdown_(std::move(slowdown)),
      cost_(cost),
      schedule_(schedule),
      workers_(workers),
      last_on_enclave_(providers_.size()),
      last_on_worker_(workers) {
    cost_.validate();
    if (slowdown_.size() != providers_.size()) {
        throw std::invalid_argument("one slowdown factor per provider");
    }
    if (workers_ == 0) {
        throw std::invalid_argument("need at least one dispatch worker");
    }
}

std::size_t Simulator::push(Event e) {
    e.id = trace_.events.size();
    double start = 0.0;
    for (auto d : e.deps) {
        start = std::max(start, trace_.events[d].end);
    }
    const double duration = e.end;  // callers pass the duration in `end`
    e.start = start;
    e.end = start + duration;
    trace_.makespan = std::max(trace_.makespan, e.end);
    trace_.events.push_back(std::move(e));
    return trace_.events.size() - 1;
}

namespace {

std::vector<std::size_t> deps_of(std::initializer_list<std::optional<std::size_t>> ids) {
    std::vector<std::size_t> out;
    for (const auto& i : ids) {
        if (i) out.push_back(*i);
    }
    return out;
}

Event make_event(std::size_t token, std::uint32_t layer, EventKind kind, std::string actor,
                 double duration, std::vector<std::size_t> deps) {
    Event e;
    e.token = token;
    e.layer = layer;
    e.kind = kind;
    e.actor = std::move(actor);
    e.end = duration;
    e.deps = std::move(deps);
    return e;
}

}  // namespace

void Simulator::add_layer(std::size_t token, std::uint32_t layer, const LayerPlan& lp) {
    const auto& c = cost_;
    auto enclave_actor = [&](std::size_t p) { return "enclave:" + providers_.at(p); };
    auto enclave_cost = [&](const BatchSpec& b) {
        return (2.0 * c.c_msg + c.c_site * static_cast<double>(b.sites)) * slowdown_.at(b.provider);
    };
    auto tag = [](Event e, const BatchSpec& b, std::size_t bytes) {
        e.provider = b.provider;
        e.sites = b.sites;
        e.bytes = bytes;
        e.request_id = b.request_id;
        return e;
    };

    if (schedule_ == Schedule::CpuOnly) {
        // Backbone and adapters share one trusted CPU; no boundary crossings.
        auto prev = push(make_event(token, layer, EventKind::Backbone, "tee-cpu",
                                    c.c_gpu_layer * c.cpu_slowdown, deps_of({last_barrier_})));
        for (const auto& b : lp.batches) {
            prev = push(tag(make_event(token, layer, EventKind::Enclave, "tee-cpu",
                                       c.c_site * static_cast<double>(b.sites) * slowdown_.at(b.provider),
                                       {prev}),
                            b, 0));
        }
        last_barrier_ = push(make_event(token, layer, EventKind::Barrier, "barrier", 0.0, {prev}));
        return;
    }

    const auto gpu = push(make_event(token, layer, EventKind::Gpu, "gpu", c.c_gpu_layer,
                                     deps_of({last_barrier_, last_on_gpu_})));
    last_on_gpu_ = gpu;
    trace_.message_count += lp.batches.size();

    if (schedule_ == Schedule::Serialized) {
        std::size_t prev = gpu;
        for (const auto& b : lp.batches) {
            auto d = push(tag(make_event(token, layer, EventKind::Dispatch, "host-w0",
                                         c.c_byte * static_cast<double>(b.request_bytes),
                                         deps_of({prev, last_on_worker_[0]})),
                              b, b.request_bytes));
            last_on_worker_[0] = d;
            auto e = push(tag(make_event(token, layer, EventKind::Enclave, enclave_actor(b.provider),
                                         enclave_cost(b), deps_of({d, last_on_enclave_[b.provider]})),
                              b, 0));
            last_on_enclave_[b.provider] = e;
            prev = push(tag(make_event(token, layer, EventKind::Collect, "collector",
                                       c.c_byte * static_cast<double>(b.response_bytes),
                                       deps_of({e, last_on_collector_})),
                            b, b.response_bytes));
            last_on_collector_ = prev;
        }
        last_barrier_ = push(make_event(token, layer, EventKind::Barrier, "barrier", 0.0, {prev}));
        return;
    }

    // Pipelined: dispatch through the worker pool with stealing, enclaves in
    // FIFO order, one serial collector, then the site barrier.
    const double ready = last_barrier_ ? trace_.events[*last_barrier_].end : 0.0;
    std::vector<std::deque<DispatchTask>> queues(workers_);
    for (std::size_t i = 0; i < lp.batches.size(); ++i) {
        const auto& b = lp.batches[i];
        queues[b.provider % workers_].push_back(
            {b.provider, b.request_id, c.c_byte * static_cast<double>(b.request_bytes), i});
    }
    std::vector<double> free_at(workers_, ready);
    std::vector<std::optional<std::size_t>> dispatch_event(lp.batches.size());
    auto pending = [&] {
        return std::any_of(queues.begin(), queues.end(), [](const auto& q) { return !q.empty(); });
    };
    while (pending()) {
        const double t = *std::min_element(free_at.begin(), free_at.end());
        std::vector<bool> idle(workers_);
        for (std::size_t w = 0; w < workers_; ++w) idle[w] = free_at[w] <= t;
        work_steal_tick(queues, idle);
        bool started = false;
        for (std::size_t w = 0; w < workers_; ++w) {
            if (!idle[w] || queues[w].empty()) continue;
            const DispatchTask task = queues[w].front();
            queues[w].pop_front();
            const auto& b = lp.batches[task.batch];
            auto id = push(tag(make_event(token, layer, EventKind::Dispatch, "host-w" + std::to_string(w),
                                          task.cost, deps_of({last_barrier_, last_on_worker_[w]})),
                               b, b.request_bytes));
            last_on_worker_[w] = id;
            free_at[w] = trace_.events[id].end;
            dispatch_event[task.batch] = id;
            started = true;
        }
        if (!started) {
            throw std::logic_error("dispatch simulation made no progress");
        }
    }

    std::vector<std::size_t> enclave_event(lp.batches.size());
    for (std::size_t i = 0; i < lp.batches.size(); ++i) {
        const auto& b = lp.batches[i];
        auto id = push(tag(make_event(token, layer, EventKind::Enclave, enclave_actor(b.provider),
                                      enclave_cost(b),
                                      deps_of({dispatch_event[i], last_on_enclave_[b.provider]})),
                           b, 0));
        last_on_enclave_[b.provider] = id;
        enclave_event[i] = id;
    }

    std::vector<std::size_t> order(lp.batches.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
        return trace_.events[enclave_event[l]].end < trace_.events[enclave_event[r]].end;
    });
    std::vector<std::size_t> barrier_deps{gpu};
    for (auto i : order) {
        const auto& b = lp.batches[i];
        auto id = push(tag(make_event(token, layer, EventKind::Collect, "collector",
                                      c.c_byte * static_cast<double>(b.response_bytes),
                                      deps_of({enclave_event[i], last_on_collector_})),
                           b, b.response_bytes));
        last_on_collector_ = id;
        barrier_deps.push_back(id);
    }
    last_barrier_ = push(make_event(token, layer, EventKind::Barrier, "barrier", 0.0, barrier_deps));
}

void Simulator::add_token(const TokenPlan& token) {
    for (std::size_t l = 0; l < token.layers.size(); ++l) {
        add_layer(token_count_, static_cast<std::uint32_t>(l), token.layers[l]);
    }
    ++token_count_;
}

ScheduleTrace Simulator::finish() const {
    ScheduleTrace out = trace_;
    out.provider_stats = provider_statistics(out.events, providers_);
    return out;
}

ScheduleTrace simulate_makespan(const SchedulePlan& plan, const CostModel& cost,
                                Schedule schedule, std::size_t workers) {
    Simulator sim(plan.providers, plan.slowdown, cost, schedule, workers);
    for (const auto& t : plan.tokens) {
        sim.add_token(t);
    }
    return sim.finish();
}

// run_request

namespace {

using Clock = std::chrono::steady_clock;

struct Pending {
    std::size_t link = 0;
    std::vector<SiteId> sites;
    std::uint64_t request_id = 0;
    Bytes frame;
    std::size_t batch_index = 0;
};

class RealtimeTransport {
public:
    RealtimeTransport(std::span<ProviderLink> links, const std::vector<bool>& participating)
        : epoch_(Clock::now()) {
        workers_.resize(links.size());
        for (std::size_t i = 0; i < links.size(); ++i) {
            if (participating[i]) {
                workers_[i] = std::make_unique<runtime::EnclaveWorker>(*links[i].enclave, i, queue_, epoch_);
            }
        }
    }

    double now_us() const {
        return std::chrono::duration<double, std::micro>(Clock::now() - epoch_).count();
    }

    runtime::EnclaveWorker& worker(std::size_t i) { return *workers_.at(i); }
    runtime::ResponseQueue& queue() { return queue_; }

private:
    Clock::time_point epoch_;
    runtime::ResponseQueue queue_;
    std::vector<std::unique_ptr<runtime::EnclaveWorker>> workers_;
};

}  // namespace

RequestResult run_request(const Backbone& backbone, const ContributorSet& contributors,
                          std::span<ProviderLink> links, BatchPolicy policy, const Vec& input,
                          const RunOptions& options) {
    options.cost.validate();
    if (options.tokens == 0) {
        throw std::invalid_argument("run_request needs >= 1 token");
    }
    std::map<std::string, std::size_t> index;
    std::vector<std::string> names;
    std::vector<double> slowdown;
    for (std::size_t i = 0; i < links.size(); ++i) {
        if (!links[i].enclave) {
            throw ContractViolation("provider link " + links[i].provider_id + " has no enclave");
        }
        index[links[i].provider_id] = i;
        names.push_back(links[i].provider_id);
        slowdown.push_back(links[i].slowdown);
    }
    std::vector<bool> participating(links.size(), false);
    for (const auto& k : contributors.providers()) {
        auto it = index.find(k);
        if (it == index.end()) {
            throw ContractViolation("contributor " + k + " has no enclave link");
        }
        participating[it->second] = true;
    }

    const auto d = backbone.hidden_dim();
    Simulator sim(names, slowdown, options.cost, options.schedule, options.workers);
    std::unique_ptr<RealtimeTransport> rt;
    if (options.mode == Mode::Realtime) {
        rt = std::make_unique<RealtimeTransport>(links, participating);
    }
    std::vector<Event> rt_events;
    std::size_t rt_messages = 0;
    auto rt_push = [&](Event e) {
        e.id = rt_events.size();
        rt_events.push_back(std::move(e));
    };

    RequestResult result;
    std::uint64_t next_request_id = 1;
    Vec x = input;

    for (std::size_t token = 0; token < options.tokens; ++token) {
        TokenPlan plan;
        plan.layers.resize(backbone.layers());

        auto layer_fn = [&](std::uint32_t layer, const Vec& h) -> LayerDeltas {
            std::vector<Pending> pend;
            auto& lp = plan.layers[layer];
            for (std::size_t i = 0; i < links.size(); ++i) {
                if (!participating[i]) continue;
                const auto& link = links[i];
                const auto sites = contributors.provider_sites(link.provider_id, layer);
                for (auto& chunk : batch_sites(sites, policy.segment_for(link.provider_id))) {
                    runtime::ActivationBatch b;
                    b.request_id = next_request_id++;
                    b.client_id = contributors.client_id();
                    b.sites = chunk;
                    b.activations.assign(chunk.size(), h);
                    const double t0 = rt ? rt->now_us() : 0.0;
                    Pending p{i, std::move(chunk), b.request_id,
                              runtime::seal_activation_batch(b, link.session_id, link.traffic_key),
                              lp.batches.size()};
                    lp.batches.push_back({i, p.sites.size(), p.frame.size(), 0, p.request_id});
                    result.issue_order[link.provider_id].push_back(p.request_id);
                    if (rt) {
                        rt->worker(i).submit(p.frame, p.request_id, options.now);
                        Event e;
                        e.token = token;
                        e.layer = layer;
                        e.kind = EventKind::Dispatch;
                        e.actor = "dispatcher";
                        e.start = t0;
                        e.end = rt->now_us();
                        e.bytes = p.frame.size();
                        e.sites = p.sites.size();
                        e.provider = i;
                        e.request_id = p.request_id;
                        rt_push(std::move(e));
                        ++rt_messages;
                    }
                    pend.push_back(std::move(p));
                }
            }

            // (site ordinal, link) -> delta
            std::map<std::pair<std::size_t, std::size_t>, Vec> got;
            auto accept = [&](const Pending& p, const std::optional<Bytes>& resp) {
                const auto& link = links[p.link];
                if (!resp) {
                    throw RequestAborted(link.provider_id, "enclave " + link.provider_id +
                                                               " dropped batch " +
                                                               std::to_string(p.request_id));
                }
                runtime::Response r;
                try {
                    r = runtime::open_response(*resp, link.session_id, link.traffic_key);
                } catch (const std::exception& e) {
                    throw RequestAborted(link.provider_id, std::string("bad response from ") +
                                                               link.provider_id + ": " + e.what());
                }
                if (auto* den = std::get_if<runtime::Denial>(&r)) {
                    throw RequestAborted(link.provider_id, "denied by " + link.provider_id + ": " + den->reason);
                }
                if (auto* f = std::get_if<runtime::Fault>(&r)) {
                    throw RequestAborted(link.provider_id, "fault from " + link.provider_id + ": " + f->reason);
                }
                auto& db = std::get<runtime::DeltaBatch>(r);
                if (db.request_id != p.request_id || db.sites != p.sites) {
                    throw RequestAborted(link.provider_id, "response does not match batch " +
                                                               std::to_string(p.request_id));
                }
                for (std::size_t s = 0; s < db.sites.size(); ++s) {
                    if (db.deltas[s].size() != d) {
                        throw RequestAborted(link.provider_id, "delta has wrong dimension");
                    }
                    got[{db.sites[s].ordinal(), p.link}] = std::move(db.deltas[s]);
                }
                lp.batches[p.batch_index].response_bytes = resp->size();
            };

            if (!rt) {
                for (const auto& p : pend) {
                    auto resp = links[p.link].enclave->handle_frame(p.frame, options.now);
                    result.enclave_order[links[p.link].provider_id].push_back(p.request_id);
                    accept(p, resp);
                }
            } else {
                std::map<std::uint64_t, std::size_t> by_id;
                for (std::size_t i = 0; i < pend.size(); ++i) by_id[pend[i].request_id] = i;
                for (std::size_t n = 0; n < pend.size(); ++n) {
                    auto wr = rt->queue().pop_for(options.timeout);
                    if (!wr) {
                        throw RequestAborted("", "timed out waiting for enclave responses");
                    }
                    const auto& p = pend.at(by_id.at(wr->request_id));
                    Event e;
                    e.token = token;
                    e.layer = layer;
                    e.kind = EventKind::Enclave;
                    e.actor = "enclave:" + links[p.link].provider_id;
                    e.start = wr->start_us;
                    e.end = wr->end_us;
                    e.sites = p.sites.size();
                    e.provider = p.link;
                    e.request_id = p.request_id;
                    rt_push(e);
                    e.kind = EventKind::Collect;
                    e.actor = "collector";
                    e.start = rt->now_us();
                    accept(p, wr->frame);
                    e.end = rt->now_us();
                    e.bytes = wr->frame ? wr->frame->size() : 0;
                    rt_push(std::move(e));
                }
            }

            LayerDeltas out;
            for (std::size_t pi = 0; pi < kProjectionsPerLayer; ++pi) {
                const SiteId site{layer, kAllProjections[pi]};
                std::vector<Vec> deltas;
                for (const auto& k : contributors.contributors(site)) {
                    auto it = got.find({site.ordinal(), index.at(k)});
                    if (it == got.end()) {
                        throw RequestAborted(k, "missing delta for " + to_string(site));
                    }
                    deltas.push_back(it->second);
                }
                // Only the aggregate reaches the backbone.
                out[pi] = aggregate_site(deltas, d);
            }
            return out;
        };

        Vec y = forward_layers(backbone, x, layer_fn);
        result.outputs.push_back(y);

        std::vector<ProviderStats> stats;
        if (!rt) {
            sim.add_token(plan);
            if (options.adaptive) stats = provider_statistics(sim.trace().events, names, token);
        } else if (options.adaptive) {
            stats = provider_statistics(rt_events, names, token);
        }
        if (options.adaptive) {
            std::map<std::string, double> means;
            for (const auto& s : stats) means[s.provider] = s.mean_response;
            policy = adaptive_batch_update(means, policy);
        }
        x = y.array().tanh().matrix();
    }

    if (!rt) {
        result.trace = sim.finish();
    } else {
        for (std::size_t i = 0; i < links.size(); ++i) {
            if (participating[i]) {
                result.enclave_order[links[i].provider_id] = rt->worker(i).consumed_order();
            }
        }
        result.trace.events = std::move(rt_events);
        result.trace.message_count = rt_messages;
        for (const auto& e : result.trace.events) {
            result.trace.makespan = std::max(result.trace.makespan, e.end);
        }
        result.trace.provider_stats = provider_statistics(result.trace.events, names);
    }
    result.final_policy = std::move(policy);
    return result;
}

}  // namespace pkus::sched
