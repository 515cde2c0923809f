// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "pkus/alignagg.hpp"
#include "pkus/deployment.hpp"
#include "pkus/edgeprune.hpp"
#include "pkus/random.hpp"
#include "support/cluster.hpp"
#include "support/fixtures.hpp"
#include "support/inspector.hpp"
#include "support/oracles.hpp"
#include "support/protocol.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

namespace {

using namespace pkus;
using namespace pkus::oracle;
using namespace pkus::testing_support;

struct Verdict {
    bool pass = true;
    std::string detail;

    void require(bool cond, const std::string& what) {
        if (!cond && pass) {
            pass = false;
            detail = what;
        }
    }
};

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Shared fixture: the standard scenario with every provider pruned once.
struct Standard {
    Scenario scenario;
    std::map<std::string, Bytes> blobs;

    static const Standard& get() {
        static const Standard s = [] {
            Standard out{load_scenario(std::string(PKUS_SCENARIOS) + "/standard.json"), {}};
            const auto data = make_task_data(out.scenario);
            for (const auto& p : out.scenario.providers) {
                out.blobs[p.id] = prune_provider(out.scenario, data, p).blob;
            }
            return out;
        }();
        return s;
    }

    [[nodiscard]] std::unique_ptr<Deployment> deploy(const Scenario& s) const {
        auto d = std::make_unique<Deployment>(s, make_task_data(s));
        auto b = blobs;
        std::erase_if(b, [&](const auto& kv) {
            return std::none_of(s.providers.begin(), s.providers.end(),
                                [&](const ProviderSpec& p) { return p.id == kv.first; });
        });
        if (!d->launch(b)) throw std::runtime_error("standard scenario failed to launch");
        return d;
    }
};

// Merged-weight execution: W_s + scale A B at every active site, no deltas.
Backbone merged(const Backbone& bb, const ProviderAdapterSet& set) {
    Backbone out = bb;
    for (const auto& [site, entry] : set.entries()) {
        if (!entry.active) continue;
        const auto& ad = entry.adapter;
        out = out.with_weight(site, bb.weight(site) + ad.scale() * naive_matmul(ad.a(), ad.b()));
    }
    return out;
}

double merged_accuracy(const Backbone& bb, const ProviderAdapterSet& set, const Dataset& data) {
    const Backbone m = merged(bb, set);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vec h = forward_plain(m, data.inputs[i]);
        double score = 0.0;
        for (Eigen::Index j = 0; j < h.size(); ++j) score += m.readout()[j] * h[j];
        correct += static_cast<int>(score > 0.0) == data.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Verdict ac1() {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1001, "ac1");
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        ClusterSpec spec;
        spec.backbone = {static_cast<std::uint32_t>(1 + rng.next_u64() % 4),
                         static_cast<Eigen::Index>(3 + rng.next_u64() % 8), rng.next_u64() % 1000};
        spec.providers = 1;
        spec.rank = 1 + static_cast<Eigen::Index>(rng.next_u64() % 3);
        spec.adapter_seed = 5000 + static_cast<std::uint64_t>(trial);
        spec.inactive_fraction = 0.3 * rng.uniform();
        Cluster cl(spec);
        const Vec x = rng.normal_vector(cl.backbone.hidden_dim());
        const Vec split = cl.run(x).outputs[0];
        const Vec dense = forward_plain(merged(cl.backbone, cl.parties[0].adapters), x);
        worst = std::max(worst, rel_error(split, dense));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    v.require(worst < 1e-9, fmt("max rel error %.3e >= 1e-9", worst));
    v.require(secs < 10.0, fmt("runtime %.2fs >= 10s", secs));
    if (v.pass) v.detail = fmt("100 triples, max rel error %.2e, %.2fs", worst, secs);
    return v;
}

Verdict ac2() {
    Verdict v;
    double worst = 0.0;
    for (std::size_t k = 1; k <= 4; ++k) {
        ClusterSpec spec;
        spec.providers = k;
        spec.adapter_seed = 700 + 10 * k;
        Cluster cl(spec);
        Rng rng(2000 + k, "ac2");
        for (int trial = 0; trial < 10; ++trial) {
            const Vec x = rng.normal_vector(cl.backbone.hidden_dim());
            const Vec got = cl.run(x).outputs[0];
            worst = std::max(worst, rel_error(got, virtual_adapter_forward(cl.backbone, cl.authorized_sets(), x)));
        }
    }
    v.require(worst < 1e-9, fmt("max rel error %.3e >= 1e-9", worst));

    v.require(bitwise_equal(aggregate_site({}, 7), Vec::Zero(7)), "empty aggregate is not exactly zero");
    // No contributor anywhere: every site takes the zero-delta path.
    ClusterSpec spec;
    spec.providers = 2;
    Cluster revoked(spec);
    for (std::size_t i = 0; i < spec.providers; ++i) revoked.contributors.revoke_provider(provider_name(i));
    spec.inactive_fraction = 1.0;
    Cluster inactive(spec);
    Rng rng(2099, "ac2-empty");
    for (int trial = 0; trial < 10; ++trial) {
        const Vec x = rng.normal_vector(revoked.backbone.hidden_dim());
        const Vec plain = forward_plain(revoked.backbone, x);
        const auto a = revoked.run(x);
        const auto b = inactive.run(x);
        v.require(bitwise_equal(a.outputs[0], plain) && bitwise_equal(b.outputs[0], plain),
                  "empty contributor set differs from plain forward");
        v.require(a.trace.message_count == 0 && b.trace.message_count == 0, "empty contributor set sent messages");
    }
    if (v.pass) v.detail = fmt("k=1..4 max rel error %.2e; empty sets bitwise plain", worst);
    return v;
}

Verdict ac3() {
    Verdict v;
    const auto task = make_sparse_teacher_task(31);
    const PruneConfig cfg{0.75, 0.125, 0.01, 10};
    const TrainingConfig training{40, 0.05};
    const auto result = edgeprune_run(task.backbone, task.train, task.valid, task.dense_start, cfg, training);
    const auto& rep = result.report;
    v.require(rep.final_ratio >= 0.5, fmt("committed ratio %.3f < 0.5", rep.final_ratio));

    const double floor = rep.m0 - cfg.epsilon;
    const double final_oracle = merged_accuracy(task.backbone, result.set, task.valid);
    v.require(final_oracle >= floor, fmt("re-evaluated final metric %.4f < m0-eps %.4f", final_oracle, floor));
    v.require(final_oracle == rep.final_metric, "re-evaluated final metric differs from the report");

    // Replay the same search, capturing every evaluated set, and re-evaluate each
    // pruned candidate independently.
    std::vector<ProviderAdapterSet> evaluated;
    auto set = task.dense_start;
    auto replay = progressive_prune(
        set, cfg, training.steps,
        [&](ProviderAdapterSet& s, std::size_t n) { train_adapters(task.backbone, task.train, s, n, training.lr); },
        [&](const ProviderAdapterSet& s) {
            evaluated.push_back(s);
            return evaluate_accuracy(task.backbone, task.valid, local_deltas(s));
        });
    v.require(replay.final_ratio == rep.final_ratio && replay.checkpoints.size() == rep.checkpoints.size(),
              "replayed search diverged");

    std::size_t next = 0, commits = 0;
    double expected_ratio = cfg.delta_r;
    for (const auto& rec : replay.checkpoints) {
        ++next;  // metric_current
        if (!rec.proposed_ratio) continue;
        const auto& candidate = evaluated.at(next++);
        if (rec.outcome != PruneOutcome::Committed) continue;
        ++commits;
        const double m = merged_accuracy(task.backbone, candidate, task.valid);
        const std::size_t inactive = candidate.entries().size() - candidate.active_sites().size();
        v.require(m >= floor, fmt("committed ratio %.3f has metric %.4f < %.4f", *rec.proposed_ratio, m, floor));
        v.require(*rec.proposed_ratio == expected_ratio, fmt("ratio grid skipped %.3f", expected_ratio));
        v.require(inactive == ratio_to_count(*rec.proposed_ratio, candidate.entries().size()),
                  "committed set has the wrong number of inactive sites");
        v.require(*rec.proposed_ratio <= cfg.r_max, "committed ratio above r_max");
        expected_ratio += cfg.delta_r;
    }
    v.require(commits * cfg.delta_r == rep.final_ratio, "committed steps do not add up to the final ratio");
    if (v.pass) {
        v.detail = fmt("ratio %.3f, final %.4f >= m0-eps %.4f, %zu commits re-checked", rep.final_ratio,
                       final_oracle, floor, commits);
    }
    return v;
}

template <typename F>
bool rejects(F&& f) {
    try {
        f();
    } catch (const aegis::ProtocolError&) {
        return true;
    }
    return false;
}

Verdict ac4() {
    Verdict v;
    const Backbone bb({2, 4, 1});
    auto adapters = [&](const std::string& owner) { return random_adapter_set(bb, owner, "toy-base", 2, 5); };

    // (a) single-bit tampering of nonce, ciphertext and associated data.
    Testbed tb(41);
    auto p = make_party(tb, "owner-a", {lease("alice")}, adapters("owner-a"), Stage::Channel);
    const auto msg = p.owner.seal_adapters(p.adapters, tb.image.measurement, p.plan_hash());
    Rng rng(4001, "ac4");
    std::map<std::string, std::pair<int, int>> tally;  // region -> (rejected, trials)
    auto flip = [&](Bytes& b, std::size_t lo, std::size_t hi) {
        const std::size_t bit = lo * 8 + rng.next_u64() % ((hi - lo) * 8);
        b[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
    };
    for (int t = 0; t < 100; ++t) {
        for (const auto* region : {"nonce", "ciphertext", "ad"}) {
            auto m = msg;
            const std::string r = region;
            if (r == "nonce") flip(m.payload, 0, crypto::kGcmNonceSize);
            if (r == "ciphertext") flip(m.payload, crypto::kGcmNonceSize, m.payload.size());
            if (r == "ad") flip(m.associated_data, 0, m.associated_data.size());
            auto& [rej, n] = tally[r];
            ++n;
            rej += rejects([&] { p.enclave->onboard(m); }) && p.enclave->state() == aegis::EnclaveState::PlanBound;
        }
    }
    for (const auto& [region, t] : tally) {
        v.require(t.first == t.second, fmt("%s: %d/%d rejected", region.c_str(), t.first, t.second));
    }
    p.enclave->onboard(msg);
    v.require(p.enclave->state() == aegis::EnclaveState::Onboarded, "honest onboarding failed after tampering");

    const SiteId site{0, Projection::AttnQ};
    auto batch = [&](const std::string& client) {
        return runtime::ActivationBatch{1, client, {site}, {Vec::Ones(4)}};
    };
    // (b) absent client.
    v.require(!p.enclave->invoke(batch("mallory"), 0).allowed(), "absent client admitted");

    // (c) exactly N batches under max_requests = N.
    for (std::uint64_t n : {1u, 3u, 7u}) {
        Testbed tbn(50 + n);
        auto q = make_party(tbn, "owner-n", {lease("alice", {}, n)}, adapters("owner-n"));
        std::uint64_t admitted = 0;
        for (std::uint64_t i = 0; i < n + 5; ++i) admitted += q.enclave->invoke(batch("alice"), i).allowed();
        v.require(admitted == n, fmt("max_requests=%llu admitted %llu", (unsigned long long)n,
                                     (unsigned long long)admitted));
    }

    // (d) expiry boundary.
    Testbed tbe(60);
    auto e = make_party(tbe, "owner-e", {lease("alice", 50)}, adapters("owner-e"));
    v.require(e.enclave->invoke(batch("alice"), 49).allowed(), "request before expiry denied");
    v.require(!e.enclave->invoke(batch("alice"), 50).allowed(), "request at now == expiry admitted");

    // (e) quotes from keys other than the hardware key.
    int forged_rejected = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const aegis::AttestationHardware forger(owner_identity(s, "forger"));
        const auto ud = aegis::revoked_user_data(p.plan_hash());
        const auto q = forger.quote(tb.image.measurement, ud, tb.nonce());
        forged_rejected += !aegis::verify_quote(q, tb.image.measurement, ud, tb.hw.public_key());
    }
    v.require(forged_rejected == 20, fmt("%d/20 forged quotes rejected", forged_rejected));
    if (v.pass) v.detail = "300/300 bit flips rejected; absent, quota, expiry, forged quote all hold";
    return v;
}

Verdict ac5() {
    Verdict v;
    ClusterSpec spec;
    spec.providers = 3;
    spec.adapter_seed = 900;
    Cluster full(spec);
    Cluster never(spec, {0, 2});
    auto& victim = full.parties[1];
    const auto plan_hash = victim.plan_hash();
    const auto quote = victim.enclave->revoke(victim.owner.revocation_request(victim.enclave->id(), plan_hash),
                                              full.tb.nonce());
    full.contributors.revoke_provider(victim.owner.id());

    v.require(aegis::verify_quote(quote, full.tb.image.measurement, aegis::revoked_user_data(plan_hash),
                                  full.tb.hw.public_key()),
              "final quote does not verify");
    v.require(quote.user_data.size() >= aegis::kRevokedMarker.size() &&
                  std::equal(aegis::kRevokedMarker.begin(), aegis::kRevokedMarker.end(), quote.user_data.begin()),
              "final quote lacks the revocation marker");
    const auto report = aegis::EnclaveInspector::inspect_for_test(*victim.enclave);
    v.require(report.erased() && report.adapter_values > 0, "enclave buffers not erased");

    Rng rng(5001, "ac5");
    for (int trial = 0; trial < 5; ++trial) {
        const Vec x = rng.normal_vector(full.backbone.hidden_dim());
        sched::RunOptions opt;
        opt.tokens = 3;
        const auto a = full.run(x, opt);
        const auto b = never.run(x, opt);
        for (std::size_t t = 0; t < opt.tokens; ++t) {
            v.require(bitwise_equal(a.outputs[t], b.outputs[t]), "post-revocation serve differs from counterfactual");
        }
    }

    // Same through a full deployment of the standard scenario.
    const auto& st = Standard::get();
    auto d = st.deploy(st.scenario);
    const RequestSpec req{"all", "alice", {"clinic-a", "clinic-b", "clinic-c", "clinic-d"}, 2};
    d->revoke("clinic-b");
    const auto after = d->serve(req, 1);
    const auto cf_scenario = st.scenario.without_provider("clinic-b");
    auto cf = st.deploy(cf_scenario);
    RequestSpec cf_req = req;
    std::erase(cf_req.providers, "clinic-b");
    const auto counterfactual = cf->serve(cf_req, 1);
    v.require(after.ok && counterfactual.ok && after.outputs.size() == counterfactual.outputs.size(),
              "deployment serve failed");
    for (std::size_t t = 0; v.pass && t < after.outputs.size(); ++t) {
        v.require(bitwise_equal(after.outputs[t], counterfactual.outputs[t]),
                  "deployment post-revocation serve differs from counterfactual");
    }
    if (v.pass) {
        v.detail = fmt("marker quote verifies, %zu adapter values zeroed, counterfactual bitwise equal",
                       report.adapter_values);
    }
    return v;
}

Verdict ac6() {
    Verdict v;
    const auto& st = Standard::get();
    auto bench = [&](std::size_t providers, sched::Schedule schedule, std::size_t segment) {
        BenchConfig cfg;
        cfg.providers = providers;
        cfg.layers = st.scenario.backbone.layers;
        cfg.hidden_dim = st.scenario.backbone.hidden_dim;
        cfg.serving = st.scenario.serving;
        cfg.serving.schedule = schedule;
        cfg.serving.segment_size = segment;
        const auto out = run_bench(cfg);
        if (!out.ok) throw std::runtime_error("bench failed: " + out.error);
        return out.trace;
    };
    using sched::Schedule;
    const auto unbatched = bench(4, Schedule::Pipelined, 1);
    const auto batched = bench(4, Schedule::Pipelined, 6);
    const auto cpu = bench(4, Schedule::CpuOnly, 6);
    v.require(unbatched.message_count == 6 * batched.message_count,
              fmt("messages %zu vs %zu, expected ratio 6", unbatched.message_count, batched.message_count));
    v.require(batched.makespan < cpu.makespan && cpu.makespan < unbatched.makespan,
              fmt("ordering violated: PKUS %.1f, cpu %.1f, pipeline %.1f", batched.makespan, cpu.makespan,
                  unbatched.makespan));
    const double k1 = bench(1, Schedule::Pipelined, 6).makespan;
    const double k32 = bench(32, Schedule::Pipelined, 6).makespan;
    v.require(k32 / k1 < 4.0, fmt("k32/k1 = %.2f >= 4", k32 / k1));
    if (v.pass) {
        v.detail = fmt("messages %zu->%zu; makespan PKUS %.0f < cpu %.0f < pipeline %.0f; k32/k1 %.2f",
                       unbatched.message_count, batched.message_count, batched.makespan, cpu.makespan,
                       unbatched.makespan, k32 / k1);
    }
    return v;
}

Verdict ac7() {
    Verdict v;
    ClusterSpec spec;
    spec.providers = 3;
    spec.adapter_seed = 1100;
    Cluster cl(spec);
    Rng rng(7001, "ac7");
    const Vec x = rng.normal_vector(cl.backbone.hidden_dim());
    std::optional<std::vector<Vec>> reference;
    std::size_t configs = 0;
    for (auto schedule : {sched::Schedule::Serialized, sched::Schedule::Pipelined}) {
        for (std::size_t seg : {1u, 2u, 6u}) {
            for (std::size_t workers : {1u, 4u}) {
                for (auto mode : {sched::Mode::Simulated, sched::Mode::Realtime}) {
                    sched::RunOptions opt;
                    opt.schedule = schedule;
                    opt.workers = workers;
                    opt.mode = mode;
                    opt.tokens = 2;
                    const auto out = cl.run(x, opt, sched::BatchPolicy::uniform(seg)).outputs;
                    ++configs;
                    if (!reference) {
                        reference = out;
                        continue;
                    }
                    for (std::size_t t = 0; t < out.size(); ++t) {
                        v.require(bitwise_equal(out[t], (*reference)[t]),
                                  fmt("%s seg=%zu workers=%zu differs", std::string(sched::schedule_name(schedule)).c_str(),
                                      seg, workers));
                    }
                }
            }
        }
    }
    if (v.pass) v.detail = fmt("%zu configurations bitwise identical", configs);
    return v;
}

Verdict ac8() {
    Verdict v;
    // Each provider trains dense adapters on its own shard only; aggregation,
    // not pruning, is under test here.
    const auto& st = Standard::get();
    const auto data = make_task_data(st.scenario);
    Standard shards{st.scenario, {}};
    const auto n = data.train.size();
    for (const auto& p : st.scenario.providers) {
        const auto shard = data.train.slice(*p.shard * n / st.scenario.task.shards,
                                            (*p.shard + 1) * n / st.scenario.task.shards);
        auto set = init_dense_adapters(data.backbone, p.id, st.scenario.base_model_id, p.rank, p.alpha, p.seed);
        train_adapters(data.backbone, shard, set, p.train.steps, p.train.lr);
        shards.blobs[p.id] = serialize_adapter_set(set);
    }
    auto d = shards.deploy(st.scenario);
    std::vector<std::string> ids;
    for (const auto& p : st.scenario.providers) ids.push_back(p.id);
    std::vector<double> sum(ids.size() + 1, 0.0);
    std::vector<int> count(ids.size() + 1, 0);
    for (unsigned mask = 1; mask < (1u << ids.size()); ++mask) {
        RequestSpec r{"subset", "alice", {}, 1, 0, true};
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (mask & (1u << i)) r.providers.push_back(ids[i]);
        }
        const auto out = d->serve(r, 1);
        if (!out.ok || !out.accuracy) throw std::runtime_error("subset request failed: " + out.error);
        sum[r.providers.size()] += *out.accuracy;
        ++count[r.providers.size()];
    }
    std::string means;
    double prev = -1.0;
    for (std::size_t k = 1; k <= ids.size(); ++k) {
        const double m = sum[k] / count[k];
        means += fmt("%sk%zu=%.4f", k > 1 ? " " : "", k, m);
        v.require(m >= prev, "mean metric decreased at k=" + std::to_string(k));
        prev = m;
    }
    v.detail = v.pass ? means : v.detail + " (" + means + ")";
    return v;
}

Verdict ac9() {
    Verdict v;
    const auto& st = Standard::get();
    auto d = st.deploy(st.scenario);
    d->run_timeline();
    std::ostringstream log;
    d->audit().write(log);
    std::istringstream in(log.str());
    const auto verdict = verify_audit_log(in, d->hardware_key());
    v.require(verdict.ok, "audit verify rejected the untouched log: " + verdict.reason);

    const auto records = d->audit().records();
    std::size_t caught = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto mutated = records;
        auto& r = mutated[i];
        switch (i % 5) {
            case 0: r.detail += "!"; break;
            case 1: r.event = "onboarded-x"; break;
            case 2: r.plan_hash[i % r.plan_hash.size()] ^= 1; break;
            case 3: r.signature[0] ^= 0x80; break;
            default: r.prev[3] ^= 4; break;
        }
        std::ostringstream os;
        for (const auto& rec : mutated) os << rec.to_json_line() << "\n";
        std::istringstream is(os.str());
        const auto bad = verify_audit_log(is, d->hardware_key());
        caught += !bad.ok && bad.bad_line == i + 1 && bad.bad_seq == r.seq;
    }
    v.require(caught == records.size(), fmt("%zu/%zu mutations rejected at the mutated record", caught, records.size()));
    if (v.pass) v.detail = fmt("%zu records accepted; every single-record mutation rejected at its line", records.size());
    return v;
}

Verdict ac10() {
    Verdict v;
    Rng rng(10001, "ac10");
    double worst = 0.0;
    for (std::uint64_t i = 0; i < 20; ++i) {
        const auto fx = random_gradient_fixture(rng, 300 + i);
        worst = std::max(worst, gradient_check_error(fx, 1e-5));
    }
    v.require(worst < 1e-4, fmt("max relative error %.3e >= 1e-4", worst));
    if (v.pass) v.detail = fmt("20 configurations, max relative error %.2e", worst);
    return v;
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
        {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10},
    };
    int failures = 0;
    for (const auto& [name, run] : criteria) {
        Verdict v;
        try {
            v = run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::cout << name << (v.pass ? " PASS " : " FAIL ") << v.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
