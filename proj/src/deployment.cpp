#include "pkus/deployment.hpp"

#include "pkus/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace pkus {

namespace {

using nlohmann::json;

std::uint64_t derive_u64(std::uint64_t seed, const std::string& label) {
    crypto::DeterministicStream s(seed, label);
    const auto b = s.take<8>();
    std::uint64_t v = 0;
    for (auto byte : b) v = (v << 8) | byte;
    return v;
}

aegis::PolicyEntry parse_lease(const json& j) {
    aegis::PolicyEntry e;
    e.client_id = j.at("client").get<std::string>();
    if (j.contains("expiry") && !j["expiry"].is_null()) e.expiry = j["expiry"].get<std::uint64_t>();
    if (j.contains("max_requests") && !j["max_requests"].is_null()) {
        e.max_requests = j["max_requests"].get<std::uint64_t>();
    }
    return e;
}

ProviderSpec parse_provider(const json& j) {
    ProviderSpec p;
    p.id = j.at("id").get<std::string>();
    p.seed = j.value("seed", p.seed);
    p.rank = j.value("rank", p.rank);
    p.alpha = j.value("alpha", p.alpha);
    if (j.contains("shard") && !j["shard"].is_null()) p.shard = j["shard"].get<std::size_t>();
    if (j.contains("prune")) {
        const auto& c = j["prune"];
        p.prune.r_max = c.value("r_max", p.prune.r_max);
        p.prune.delta_r = c.value("delta_r", p.prune.delta_r);
        p.prune.epsilon = c.value("epsilon", p.prune.epsilon);
        p.prune.checkpoint_interval = c.value("checkpoint_interval", p.prune.checkpoint_interval);
    }
    if (j.contains("train")) {
        p.train.steps = j["train"].value("steps", p.train.steps);
        p.train.lr = j["train"].value("lr", p.train.lr);
    }
    p.slowdown = j.value("slowdown", p.slowdown);
    return p;
}

RequestSpec parse_request(const json& j) {
    RequestSpec r;
    r.name = j.value("name", std::string("request"));
    r.client = j.at("client").get<std::string>();
    r.providers = j.at("providers").get<std::vector<std::string>>();
    r.tokens = j.value("tokens", r.tokens);
    r.input_index = j.value("input_index", r.input_index);
    r.evaluate = j.value("evaluate", r.evaluate);
    return r;
}

PolicyUpdateSpec parse_update(const json& j) {
    PolicyUpdateSpec u;
    u.owner = j.at("owner").get<std::string>();
    const auto op = j.value("op", std::string("add"));
    if (op == "add") {
        u.op = aegis::PolicyOp::Add;
    } else if (op == "remove") {
        u.op = aegis::PolicyOp::Remove;
    } else {
        throw ScenarioError("policy_update op must be add or remove, got '" + op + "'");
    }
    u.lease = parse_lease(j.at("lease"));
    return u;
}

void parse_serving(const json& j, ServingSpec& s) {
    const auto mode = j.value("mode", std::string("simulated"));
    if (mode == "simulated") {
        s.mode = sched::Mode::Simulated;
    } else if (mode == "realtime") {
        s.mode = sched::Mode::Realtime;
    } else {
        throw ScenarioError("serving.mode must be simulated or realtime");
    }
    const auto name = j.value("schedule", std::string("pipelined"));
    auto sc = sched::parse_schedule(name);
    if (!sc) throw ScenarioError("unknown schedule '" + name + "'");
    s.schedule = *sc;
    s.segment_size = j.value("segment_size", s.segment_size);
    s.workers = j.value("workers", s.workers);
    s.adaptive = j.value("adaptive", s.adaptive);
    if (j.contains("cost")) {
        const auto& c = j["cost"];
        s.cost.c_msg = c.value("c_msg", s.cost.c_msg);
        s.cost.c_byte = c.value("c_byte", s.cost.c_byte);
        s.cost.c_site = c.value("c_site", s.cost.c_site);
        s.cost.c_gpu_layer = c.value("c_gpu_layer", s.cost.c_gpu_layer);
        s.cost.cpu_slowdown = c.value("cpu_slowdown", s.cost.cpu_slowdown);
    }
}

}  // namespace

// Scenario

Scenario parse_scenario(std::string_view text) {
    Scenario s;
    try {
        const auto j = json::parse(text);
        s.seed = j.value("seed", s.seed);
        s.base_model_id = j.value("base_model_id", s.base_model_id);
        if (j.contains("backbone")) {
            s.backbone.layers = j["backbone"].value("layers", s.backbone.layers);
            s.backbone.hidden_dim = j["backbone"].value("hidden_dim", s.backbone.hidden_dim);
        }
        if (j.contains("task")) {
            const auto& t = j["task"];
            s.task.train = t.value("train", s.task.train);
            s.task.valid = t.value("valid", s.task.valid);
            s.task.label_noise = t.value("label_noise", s.task.label_noise);
            s.task.shards = t.value("shards", s.task.shards);
        }
        for (const auto& p : j.value("providers", json::array())) s.providers.push_back(parse_provider(p));
        for (const auto& p : j.value("plans", json::array())) {
            PlanSpec plan;
            plan.owner = p.at("owner").get<std::string>();
            for (const auto& l : p.value("leases", json::array())) plan.leases.push_back(parse_lease(l));
            s.plans.push_back(std::move(plan));
        }
        for (const auto& e : j.value("timeline", json::array())) {
            TimelineEvent ev;
            ev.at = e.value("at", std::uint64_t{0});
            int kinds = 0;
            if (e.contains("request")) { ev.request = parse_request(e["request"]); ++kinds; }
            if (e.contains("policy_update")) { ev.policy_update = parse_update(e["policy_update"]); ++kinds; }
            if (e.contains("revoke")) { ev.revoke = RevocationSpec{e["revoke"].get<std::string>()}; ++kinds; }
            if (kinds != 1) {
                throw ScenarioError("timeline entries need exactly one of request, policy_update, revoke");
            }
            s.timeline.push_back(std::move(ev));
        }
        std::stable_sort(s.timeline.begin(), s.timeline.end(),
                         [](const TimelineEvent& a, const TimelineEvent& b) { return a.at < b.at; });
        if (j.contains("serving")) parse_serving(j["serving"], s.serving);
        if (j.contains("faults")) {
            s.tamper_onboarding =
                j["faults"].value("tamper_onboarding", std::vector<std::string>{});
        }
    } catch (const json::exception& e) {
        throw ScenarioError(std::string("scenario: ") + e.what());
    }
    s.validate();
    return s;
}

Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError("cannot open scenario file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

void Scenario::validate() const {
    if (backbone.layers == 0 || backbone.hidden_dim <= 0) throw ScenarioError("backbone must be non-empty");
    if (task.train == 0 || task.valid == 0) throw ScenarioError("task splits must be non-empty");
    if (task.shards == 0 || task.shards > task.train) throw ScenarioError("task.shards out of range");
    if (task.label_noise < 0.0 || task.label_noise >= 0.5) throw ScenarioError("label_noise must lie in [0, 0.5)");
    if (serving.segment_size == 0 || serving.segment_size > kProjectionsPerLayer) {
        throw ScenarioError("serving.segment_size must lie in [1, 6]");
    }
    if (serving.workers == 0) throw ScenarioError("serving.workers must be positive");
    try {
        serving.cost.validate();
    } catch (const std::exception& e) {
        throw ScenarioError(e.what());
    }

    std::set<std::string> ids;
    for (const auto& p : providers) {
        if (p.id.empty()) throw ScenarioError("provider id must be non-empty");
        if (!ids.insert(p.id).second) throw ScenarioError("duplicate provider " + p.id);
        if (p.rank <= 0 || p.alpha <= 0.0 || p.slowdown <= 0.0) {
            throw ScenarioError("provider " + p.id + ": rank, alpha and slowdown must be positive");
        }
        if (p.shard && *p.shard >= task.shards) throw ScenarioError("provider " + p.id + ": shard out of range");
        try {
            p.prune.validate();
        } catch (const std::exception& e) {
            throw ScenarioError("provider " + p.id + ": " + e.what());
        }
    }
    auto known = [&](const std::string& id, const char* what) {
        if (!ids.contains(id)) throw ScenarioError(std::string(what) + " references unknown provider " + id);
    };
    std::set<std::string> owners;
    for (const auto& plan : plans) {
        known(plan.owner, "plan");
        if (!owners.insert(plan.owner).second) throw ScenarioError("two plans for owner " + plan.owner);
        std::set<std::string> clients;
        for (const auto& l : plan.leases) {
            if (l.client_id.empty() || (l.expiry && *l.expiry == 0) ||
                (l.max_requests && *l.max_requests == 0)) {
                throw ScenarioError("plan " + plan.owner + ": invalid lease");
            }
            if (!clients.insert(l.client_id).second) {
                throw ScenarioError("plan " + plan.owner + ": duplicate client " + l.client_id);
            }
        }
    }
    for (const auto& id : ids) {
        if (!owners.contains(id)) throw ScenarioError("provider " + id + " has no plan");
    }
    for (const auto& ev : timeline) {
        if (ev.request) {
            if (ev.request->client.empty()) throw ScenarioError("request without client");
            if (ev.request->tokens == 0) throw ScenarioError("request tokens must be positive");
            for (const auto& p : ev.request->providers) known(p, "request");
        }
        if (ev.policy_update) known(ev.policy_update->owner, "policy_update");
        if (ev.revoke) known(ev.revoke->provider, "revoke");
    }
    for (const auto& p : tamper_onboarding) known(p, "fault");
}

const ProviderSpec& Scenario::provider(std::string_view id) const {
    for (const auto& p : providers) {
        if (p.id == id) return p;
    }
    throw ScenarioError("unknown provider " + std::string(id));
}

const PlanSpec& Scenario::plan_for(std::string_view owner) const {
    for (const auto& p : plans) {
        if (p.owner == owner) return p;
    }
    throw ScenarioError("no plan for provider " + std::string(owner));
}

Scenario Scenario::without_provider(std::string_view id) const {
    Scenario s = *this;
    std::erase_if(s.providers, [&](const ProviderSpec& p) { return p.id == id; });
    std::erase_if(s.plans, [&](const PlanSpec& p) { return p.owner == id; });
    std::erase_if(s.tamper_onboarding, [&](const std::string& p) { return p == id; });
    std::erase_if(s.timeline, [&](const TimelineEvent& e) {
        return (e.policy_update && e.policy_update->owner == id) || (e.revoke && e.revoke->provider == id);
    });
    for (auto& e : s.timeline) {
        if (e.request) std::erase(e.request->providers, std::string(id));
    }
    return s;
}

// Key material and task data

crypto::SigningKey owner_identity(std::uint64_t seed, std::string_view provider_id) {
    crypto::DeterministicStream s(seed, "owner:" + std::string(provider_id));
    auto seed32 = s.take<32>();
    auto key = crypto::SigningKey::from_seed(seed32);
    crypto::secure_zero(seed32);
    return key;
}

aegis::AttestationHardware testbed_hardware(std::uint64_t seed) {
    return aegis::AttestationHardware::from_seed(seed);
}

aegis::RuntimeImage enclave_runtime_image() {
    static constexpr std::string_view kImage = "pkus-enclave-runtime/1.0 adapters+policy+invoke";
    return aegis::RuntimeImage::from_bytes(Bytes(kImage.begin(), kImage.end()));
}

TaskData make_task_data(const Scenario& s) {
    BackboneConfig cfg = s.backbone;
    cfg.seed = s.seed;
    const auto task = make_toy_task(s.seed + 101, cfg.hidden_dim);
    return TaskData{Backbone(cfg), sample_dataset(task, s.seed + 1, s.task.train, s.task.label_noise),
                    sample_dataset(task, s.seed + 2, s.task.valid, s.task.label_noise)};
}

PruneOutput prune_provider(const Scenario& s, const TaskData& data, const ProviderSpec& p) {
    Dataset train = data.train;
    if (p.shard) {
        const auto n = data.train.size();
        train = data.train.slice(*p.shard * n / s.task.shards, (*p.shard + 1) * n / s.task.shards);
    }
    auto dense = init_dense_adapters(data.backbone, p.id, s.base_model_id, p.rank, p.alpha, p.seed);
    auto result = edgeprune_run(data.backbone, train, data.valid, std::move(dense), p.prune, p.train);
    PruneOutput out{serialize_adapter_set(result.set), std::move(result.set), std::move(result.report)};
    return out;
}

// Deployment

struct Deployment::Node {
    ProviderSpec spec;
    aegis::OwnerEndpoint owner;
    aegis::PolicyPlan plan;  // the owner's copy, kept in step with updates
    std::unique_ptr<aegis::Enclave> enclave;
    std::uint64_t update_seq = 0;
    bool revoked = false;
    std::string error;
};

Deployment::Deployment(Scenario scenario, TaskData data)
    : scenario_(std::move(scenario)),
      data_(std::move(data)),
      hw_(testbed_hardware(scenario_.seed)),
      image_(enclave_runtime_image()),
      verifier_nonces_(scenario_.seed, "verifier-nonce") {}

Deployment::~Deployment() = default;

Deployment::Node& Deployment::node(const std::string& id) {
    for (auto& n : nodes_) {
        if (n->spec.id == id) return *n;
    }
    throw ScenarioError("provider " + id + " is not deployed");
}

bool Deployment::launch(const std::map<std::string, Bytes>& adapter_blobs) {
    bool all = true;
    const auto& meas = image_.measurement;
    for (const auto& spec : scenario_.providers) {
        auto n = std::make_unique<Node>(Node{
            spec,
            aegis::OwnerEndpoint(spec.id, owner_identity(scenario_.seed, spec.id),
                                 derive_u64(scenario_.seed, "owner-entropy:" + spec.id)),
            {}, nullptr, 0, false, {}});
        try {
            const auto blob = adapter_blobs.find(spec.id);
            if (blob == adapter_blobs.end()) {
                throw ScenarioError("no adapter file for provider " + spec.id);
            }
            auto [enclave, q0] = aegis::Enclave::prepare(
                image_, hw_, verifier_nonces_.take<16>(), "enclave-" + spec.id,
                derive_u64(scenario_.seed, "enclave-entropy:" + spec.id), &audit_);
            n->enclave = std::move(enclave);
            if (!aegis::verify_quote(q0, meas, {}, hw_.public_key())) {
                throw aegis::ProtocolError(aegis::ErrorCode::Unauthenticated, "prepare quote rejected");
            }

            n->plan = aegis::PolicyPlan{scenario_.base_model_id, spec.id, n->owner.public_key(),
                                        scenario_.plan_for(spec.id).leases};
            n->plan.validate();
            const auto plan_hash = n->plan.hash();
            const auto q1 = n->enclave->bind_plan(n->plan, n->owner.approve_plan(n->plan),
                                                  verifier_nonces_.take<16>());
            if (!aegis::verify_quote(q1, meas, plan_hash, hw_.public_key())) {
                throw aegis::ProtocolError(aegis::ErrorCode::BindingMismatch, "bind quote rejected");
            }

            const auto init = n->owner.begin_handshake(meas);
            n->owner.finish_handshake(n->enclave->accept_channel(init), meas, plan_hash,
                                      hw_.public_key());

            const auto set = deserialize_adapter_set(blob->second);
            auto msg = n->owner.seal_adapters(set, meas, plan_hash);
            if (std::find(scenario_.tamper_onboarding.begin(), scenario_.tamper_onboarding.end(),
                          spec.id) != scenario_.tamper_onboarding.end()) {
                msg.payload[msg.payload.size() / 2] ^= 0x01;
            }
            n->enclave->onboard(msg);
        } catch (const std::exception& e) {
            n->error = e.what();
            errors_.push_back(spec.id + ": " + e.what());
            all = false;
        }
        nodes_.push_back(std::move(n));
    }
    return all;
}

void Deployment::apply_policy_update(const PolicyUpdateSpec& u) {
    auto& n = node(u.owner);
    if (!n.enclave) throw ScenarioError("provider " + u.owner + " has no enclave");
    const aegis::PolicyUpdate update{u.op, ++n.update_seq, u.lease};
    const auto sealed = n.owner.seal_policy_update(update, n.enclave->id(), image_.measurement,
                                                   n.plan.hash());
    const auto quote = n.enclave->apply_policy_update(sealed, verifier_nonces_.take<16>());

    auto& entries = n.plan.entries;
    auto it = std::find_if(entries.begin(), entries.end(), [&](const aegis::PolicyEntry& e) {
        return e.client_id == u.lease.client_id;
    });
    if (u.op == aegis::PolicyOp::Remove) {
        if (it != entries.end()) entries.erase(it);
    } else if (it != entries.end()) {
        *it = u.lease;
    } else {
        entries.push_back(u.lease);
    }
    if (!aegis::verify_quote(quote, image_.measurement, n.plan.hash(), hw_.public_key())) {
        throw aegis::ProtocolError(aegis::ErrorCode::BindingMismatch,
                                   "enclave plan hash disagrees with the owner's after update");
    }
}

RequestOutcome Deployment::serve(const RequestSpec& request, std::uint64_t now) {
    RequestOutcome out;
    out.name = request.name;
    out.at = now;

    ContributorSet contributors(request.client);
    std::vector<sched::ProviderLink> links;
    for (const auto& id : request.providers) {
        auto& n = node(id);
        if (n.revoked) continue;  // excluded once revoked through the owner
        if (!n.enclave || n.enclave->state() != aegis::EnclaveState::Onboarded) {
            out.error = "provider " + id + " is not onboarded";
            errors_.push_back(request.name + ": " + out.error);
            return out;
        }
        contributors.add_provider(id, n.enclave->active_sites());
        links.push_back(sched::ProviderLink{id, n.enclave.get(), n.owner.traffic_key(),
                                            n.owner.session_id(), n.spec.slowdown});
        out.providers_used.push_back(id);
    }

    sched::RunOptions opts;
    opts.mode = scenario_.serving.mode;
    opts.schedule = scenario_.serving.schedule;
    opts.cost = scenario_.serving.cost;
    opts.workers = scenario_.serving.workers;
    opts.adaptive = scenario_.serving.adaptive;
    opts.tokens = request.tokens;
    opts.now = now;
    const auto policy = sched::BatchPolicy::uniform(scenario_.serving.segment_size);
    const auto& valid = data_.valid;

    try {
        auto r = sched::run_request(data_.backbone, contributors, links, policy,
                                    valid.inputs[request.input_index % valid.size()], opts);
        out.outputs = std::move(r.outputs);
        out.trace = std::move(r.trace);
        if (request.evaluate) {
            opts.tokens = 1;
            std::vector<int> predictions;
            predictions.reserve(valid.size());
            for (const auto& x : valid.inputs) {
                const auto e = sched::run_request(data_.backbone, contributors, links, policy, x, opts);
                predictions.push_back(classifier_score(data_.backbone, e.outputs.front()) > 0.0 ? 1 : 0);
            }
            out.accuracy = toy_metric(predictions, valid.labels);
        }
        out.ok = true;
    } catch (const sched::RequestAborted& e) {
        out.outputs.clear();
        out.error = "aborted by " + e.provider() + ": " + e.what();
        errors_.push_back(request.name + ": " + out.error);
    }
    return out;
}

aegis::Quote Deployment::revoke(const std::string& provider) {
    auto& n = node(provider);
    if (!n.enclave) throw ScenarioError("provider " + provider + " has no enclave");
    const auto plan_hash = n.plan.hash();
    const auto quote = n.enclave->revoke(n.owner.revocation_request(n.enclave->id(), plan_hash),
                                         verifier_nonces_.take<16>());
    if (!aegis::verify_quote(quote, image_.measurement, aegis::revoked_user_data(plan_hash),
                             hw_.public_key())) {
        throw aegis::ProtocolError(aegis::ErrorCode::Unauthenticated, "final quote rejected");
    }
    n.revoked = true;
    return quote;
}

std::vector<RequestOutcome> Deployment::run_timeline(bool include_requests) {
    std::vector<RequestOutcome> outcomes;
    for (const auto& ev : scenario_.timeline) {
        try {
            if (ev.policy_update) {
                apply_policy_update(*ev.policy_update);
            } else if (ev.revoke) {
                revoke(ev.revoke->provider);
            } else if (ev.request && include_requests) {
                outcomes.push_back(serve(*ev.request, ev.at));
            }
        } catch (const std::exception& e) {
            errors_.push_back("t=" + std::to_string(ev.at) + ": " + e.what());
        }
    }
    return outcomes;
}

std::vector<ProviderStatus> Deployment::status() const {
    std::vector<ProviderStatus> out;
    for (const auto& n : nodes_) {
        ProviderStatus s;
        s.id = n->spec.id;
        s.error = n->error;
        if (n->enclave) {
            s.state = n->enclave->state();
            s.plan_hash = n->enclave->plan_hash();
            s.active_sites = n->enclave->active_sites().size();
        }
        out.push_back(std::move(s));
    }
    return out;
}

// Benchmark

ProviderAdapterSet random_adapter_set(const Backbone& backbone, const std::string& provider_id,
                                      const std::string& base_model_id, Eigen::Index rank,
                                      std::uint64_t seed) {
    Rng rng(seed);
    const auto d = backbone.hidden_dim();
    ProviderAdapterSet set(provider_id, base_model_id);
    for (std::size_t ord = 0; ord < backbone.site_count(); ++ord) {
        set.insert(SiteId::from_ordinal(ord),
                   LowRankAdapter(rng.normal_matrix(d, rank, 0.3), rng.normal_matrix(rank, d, 0.3),
                                  static_cast<double>(rank)));
    }
    return set;
}

RequestOutcome run_bench(const BenchConfig& cfg) {
    Scenario s;
    s.seed = cfg.seed;
    s.backbone.layers = cfg.layers;
    s.backbone.hidden_dim = cfg.hidden_dim;
    s.task.train = 1;
    s.task.valid = 1;
    s.serving = cfg.serving;
    RequestSpec request;
    request.name = "bench";
    request.client = "bench-client";
    request.tokens = cfg.tokens;
    for (std::size_t i = 0; i < cfg.providers; ++i) {
        ProviderSpec p;
        p.id = "p" + std::to_string(i);
        p.seed = cfg.seed * 1000 + i;
        p.rank = cfg.rank;
        s.providers.push_back(p);
        s.plans.push_back(PlanSpec{p.id, {aegis::PolicyEntry{"bench-client", {}, {}}}});
        request.providers.push_back(p.id);
    }
    s.validate();

    auto data = make_task_data(s);
    std::map<std::string, Bytes> blobs;
    for (const auto& p : s.providers) {
        blobs[p.id] = serialize_adapter_set(
            random_adapter_set(data.backbone, p.id, s.base_model_id, p.rank, p.seed));
    }
    Deployment d(s, std::move(data));
    if (!d.launch(blobs)) {
        throw std::runtime_error("bench deployment failed: " + d.errors().front());
    }
    return d.serve(request, 0);
}

}  // namespace pkus
