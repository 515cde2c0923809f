// pkus: scenario-driven driver for pruning, enclave lifecycle, serving,
// revocation, benchmarking and audit verification.

#include "pkus/deployment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
    std::string scenario;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "pkus-out";
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

pkus::Scenario load(const Globals& g) {
    if (g.scenario.empty()) throw UsageError("--scenario is required");
    auto s = pkus::load_scenario(g.scenario);
    if (g.seed) s.seed = *g.seed;
    return s;
}

fs::path adapter_path(const Globals& g, const std::string& provider) {
    return fs::path(g.out_dir) / "adapters" / (provider + ".pkad");
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

pkus::Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return pkus::Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json vec_json(const pkus::Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json trace_summary_json(const pkus::sched::ScheduleTrace& t) {
    json stats = json::array();
    for (const auto& p : t.provider_stats) {
        stats.push_back({{"provider", p.provider},
                         {"messages", p.messages},
                         {"mean_response", p.mean_response},
                         {"p95_response", p.p95_response}});
    }
    return {{"makespan", t.makespan}, {"message_count", t.message_count}, {"providers", stats}};
}

json outcome_json(const pkus::RequestOutcome& o) {
    json outputs = json::array();
    for (const auto& v : o.outputs) outputs.push_back(vec_json(v));
    json j = {{"name", o.name},       {"at", o.at},
              {"ok", o.ok},           {"error", o.error},
              {"providers", o.providers_used}, {"outputs", outputs}};
    if (o.ok) j["trace"] = trace_summary_json(o.trace);
    if (o.accuracy) j["accuracy"] = *o.accuracy;
    return j;
}

json quote_json(const pkus::aegis::Quote& q) {
    return {{"measurement", pkus::to_hex(q.measurement)},
            {"user_data", pkus::to_hex(q.user_data)},
            {"nonce", pkus::to_hex(q.nonce)},
            {"signature", pkus::to_hex(q.signature)}};
}

json status_json(const pkus::Deployment& d) {
    json providers = json::array();
    for (const auto& s : d.status()) {
        json p = {{"id", s.id},
                  {"state", std::string(pkus::aegis::state_name(s.state))},
                  {"active_sites", s.active_sites},
                  {"error", s.error}};
        if (s.plan_hash) p["plan_hash"] = pkus::to_hex(*s.plan_hash);
        providers.push_back(p);
    }
    return {{"hardware_key", pkus::to_hex(d.hardware_key().bytes)},
            {"providers", providers},
            {"errors", d.errors()}};
}

void write_audit(const Globals& g, const pkus::Deployment& d) {
    std::ostringstream os;
    d.audit().write(os);
    write_text(fs::path(g.out_dir) / "audit.log", os.str());
}

std::map<std::string, pkus::Bytes> load_adapters(const Globals& g, const pkus::Scenario& s) {
    std::map<std::string, pkus::Bytes> blobs;
    for (const auto& p : s.providers) {
        const auto path = adapter_path(g, p.id);
        if (!fs::exists(path)) {
            throw std::runtime_error("missing adapter file " + path.string() + " (run prune first)");
        }
        blobs[p.id] = read_file(path);
    }
    return blobs;
}

std::unique_ptr<pkus::Deployment> launch(const Globals& g, const pkus::Scenario& s) {
    auto blobs = load_adapters(g, s);
    auto d = std::make_unique<pkus::Deployment>(s, pkus::make_task_data(s));
    d->launch(blobs);
    return d;
}

int report_errors(const pkus::Deployment& d) {
    for (const auto& e : d.errors()) std::cerr << "pkus: " << e << "\n";
    return d.errors().empty() ? 0 : 1;
}

int cmd_prune(const Globals& g, const std::string& only) {
    const auto s = load(g);
    if (!only.empty()) (void)s.provider(only);  // throws for unknown ids
    const auto data = pkus::make_task_data(s);
    for (const auto& p : s.providers) {
        if (!only.empty() && p.id != only) continue;
        const auto out = pkus::prune_provider(s, data, p);
        const auto path = adapter_path(g, p.id);
        write_text(path, std::string(out.blob.begin(), out.blob.end()));

        json checkpoints = json::array();
        for (const auto& c : out.report.checkpoints) {
            json cj = {{"step", c.step}, {"metric", c.metric_current}, {"committed_ratio", c.committed_ratio}};
            if (c.proposed_ratio) cj["proposed_ratio"] = *c.proposed_ratio;
            if (c.metric_pruned) cj["metric_pruned"] = *c.metric_pruned;
            if (c.outcome) {
                cj["outcome"] = *c.outcome == pkus::PruneOutcome::Committed ? "committed" : "reverted";
            }
            checkpoints.push_back(cj);
        }
        write_json(fs::path(g.out_dir) / ("prune_" + p.id + ".json"),
                   {{"provider", p.id},
                    {"m0", out.report.m0},
                    {"final_ratio", out.report.final_ratio},
                    {"final_metric", out.report.final_metric},
                    {"halted", out.report.halted},
                    {"active_sites", out.set.active_sites().size()},
                    {"checkpoints", checkpoints}});
        std::cout << p.id << ": ratio " << out.report.final_ratio << " metric "
                  << out.report.final_metric << " (m0 " << out.report.m0 << ") -> "
                  << path.string() << "\n";
    }
    return 0;
}

int cmd_lifecycle(const Globals& g) {
    const auto s = load(g);
    auto d = launch(g, s);
    // Requests in the script are authorized and charged too, so denials land in the audit log.
    const auto outcomes = d->run_timeline(true);
    write_audit(g, *d);
    auto j = status_json(*d);
    json requests = json::array();
    for (const auto& o : outcomes) {
        requests.push_back({{"name", o.name}, {"at", o.at}, {"ok", o.ok}, {"error", o.error}});
    }
    j["requests"] = requests;
    write_json(fs::path(g.out_dir) / "lifecycle.json", j);
    for (const auto& st : d->status()) {
        std::cout << st.id << ": " << pkus::aegis::state_name(st.state) << "\n";
    }
    return report_errors(*d);
}

int cmd_serve(const Globals& g) {
    const auto s = load(g);
    auto d = launch(g, s);
    const auto outcomes = d->run_timeline(true);
    json requests = json::array();
    for (const auto& o : outcomes) {
        requests.push_back(outcome_json(o));
        if (o.ok) {
            std::ostringstream csv;
            o.trace.write_csv(csv);
            write_text(fs::path(g.out_dir) / "traces" / (o.name + ".csv"), csv.str());
        }
        std::cout << o.name << ": " << (o.ok ? o.trace.summary() : "aborted: " + o.error);
        if (o.accuracy) std::cout << " accuracy=" << *o.accuracy;
        std::cout << "\n";
    }
    write_audit(g, *d);
    auto j = status_json(*d);
    j["requests"] = requests;
    write_json(fs::path(g.out_dir) / "serve.json", j);
    return report_errors(*d);
}

int cmd_revoke(const Globals& g, const std::string& provider) {
    const auto s = load(g);
    (void)s.provider(provider);
    std::vector<pkus::RequestSpec> requests;
    std::vector<std::uint64_t> times;
    for (const auto& ev : s.timeline) {
        if (ev.request) {
            requests.push_back(*ev.request);
            times.push_back(ev.at);
        }
    }

    auto d = launch(g, s);
    d->run_timeline(false);
    std::vector<pkus::RequestOutcome> before, after;
    for (std::size_t i = 0; i < requests.size(); ++i) before.push_back(d->serve(requests[i], times[i]));
    const auto quote = d->revoke(provider);
    for (std::size_t i = 0; i < requests.size(); ++i) after.push_back(d->serve(requests[i], times[i]));

    // Counterfactual: the same scenario in which the provider never existed.
    const auto cf_scenario = s.without_provider(provider);
    auto cf = launch(g, cf_scenario);
    cf->run_timeline(false);
    bool identical = true;
    json cf_json = json::array();
    for (std::size_t i = 0; i < requests.size(); ++i) {
        auto r = requests[i];
        std::erase(r.providers, provider);
        const auto o = cf->serve(r, times[i]);
        cf_json.push_back(outcome_json(o));
        identical = identical && o.ok == after[i].ok && o.outputs.size() == after[i].outputs.size();
        for (std::size_t t = 0; identical && t < o.outputs.size(); ++t) {
            identical = o.outputs[t] == after[i].outputs[t];
        }
    }

    json jb = json::array(), ja = json::array();
    for (const auto& o : before) jb.push_back(outcome_json(o));
    for (const auto& o : after) ja.push_back(outcome_json(o));
    write_audit(g, *d);
    auto j = status_json(*d);
    j["revoked"] = provider;
    j["final_quote"] = quote_json(quote);
    j["before"] = jb;
    j["after"] = ja;
    j["counterfactual"] = cf_json;
    j["counterfactual_identical"] = identical;
    write_json(fs::path(g.out_dir) / "revoke.json", j);
    std::cout << provider << ": revoked, final quote verified; post-revocation outputs "
              << (identical ? "match" : "DIFFER FROM") << " the counterfactual run\n";
    int rc = report_errors(*d);
    if (!identical) {
        std::cerr << "pkus: post-revocation outputs differ from the counterfactual run\n";
        rc = 1;
    }
    return rc;
}

int cmd_audit_verify(const Globals& g, std::string log, std::optional<std::string> key_hex) {
    if (log.empty()) log = (fs::path(g.out_dir) / "audit.log").string();
    pkus::aegis::PublicKey key;
    if (key_hex) {
        const auto b = pkus::from_hex(*key_hex);
        if (b.size() != key.bytes.size()) throw UsageError("--hardware-key must be 32 bytes of hex");
        std::copy(b.begin(), b.end(), key.bytes.begin());
    } else {
        std::uint64_t seed = 0;
        if (g.seed) {
            seed = *g.seed;
        } else {
            seed = load(g).seed;
        }
        key = pkus::testbed_hardware(seed).public_key();
    }
    std::ifstream in(log);
    if (!in) throw std::runtime_error("cannot read " + log);
    const auto v = pkus::verify_audit_log(in, key);
    if (v.ok) {
        std::cout << "audit log accepted: " << v.records << " records\n";
        return 0;
    }
    std::cout << "audit log rejected at line " << v.bad_line.value_or(0);
    if (v.bad_seq) std::cout << " (seq " << *v.bad_seq << ")";
    std::cout << ": " << v.reason << "\n";
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pkus: split-execution serving of protected adapters"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "override the scenario seed");
    app.add_option("--scenario", g.scenario, "scenario file (JSON)");
    app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
    app.fallthrough();

    std::string prune_provider;
    auto* prune = app.add_subcommand("prune", "train and prune provider adapters");
    prune->add_option("--provider", prune_provider, "only this provider");

    auto* lifecycle = app.add_subcommand("lifecycle", "attest, bind, onboard, then run the policy script");
    auto* serve = app.add_subcommand("serve", "run the scenario timeline and serve its requests");

    std::string revoke_provider;
    auto* revoke = app.add_subcommand("revoke", "serve, revoke a provider, serve again");
    revoke->add_option("--provider", revoke_provider, "provider to revoke")->required();

    pkus::BenchConfig bench_cfg;
    std::string bench_schedule = "pipelined", bench_mode = "simulated";
    auto* bench = app.add_subcommand("bench", "synthetic serving benchmark, trace as CSV");
    bench->add_option("-k,--providers", bench_cfg.providers)->capture_default_str();
    bench->add_option("--tokens", bench_cfg.tokens)->capture_default_str();
    bench->add_option("--segment", bench_cfg.serving.segment_size)->capture_default_str();
    bench->add_option("--workers", bench_cfg.serving.workers)->capture_default_str();
    bench->add_option("--schedule", bench_schedule, "pipelined | serialized | cpu")->capture_default_str();
    bench->add_option("--mode", bench_mode, "simulated | realtime")->capture_default_str();
    bench->add_flag("--adaptive", bench_cfg.serving.adaptive);
    bench->add_option("--c-msg", bench_cfg.serving.cost.c_msg)->capture_default_str();
    bench->add_option("--c-byte", bench_cfg.serving.cost.c_byte)->capture_default_str();
    bench->add_option("--c-site", bench_cfg.serving.cost.c_site)->capture_default_str();
    bench->add_option("--c-gpu-layer", bench_cfg.serving.cost.c_gpu_layer)->capture_default_str();
    bench->add_option("--cpu-slowdown", bench_cfg.serving.cost.cpu_slowdown)->capture_default_str();

    auto* audit = app.add_subcommand("audit", "audit log tools");
    audit->require_subcommand(1);
    auto* verify = audit->add_subcommand("verify", "check every signature, sequence number and link");
    std::string log_path;
    std::string key_hex;
    verify->add_option("--log", log_path, "audit log (default <out-dir>/audit.log)");
    auto* key_opt = verify->add_option("--hardware-key", key_hex, "hex public key of the attestation hardware");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        if (*prune) return cmd_prune(g, prune_provider);
        if (*lifecycle) return cmd_lifecycle(g);
        if (*serve) return cmd_serve(g);
        if (*revoke) return cmd_revoke(g, revoke_provider);
        if (*bench) {
            if (g.seed) bench_cfg.seed = *g.seed;
            const auto sc = pkus::sched::parse_schedule(bench_schedule);
            if (!sc) throw UsageError("unknown schedule " + bench_schedule);
            bench_cfg.serving.schedule = *sc;
            if (bench_mode == "simulated") {
                bench_cfg.serving.mode = pkus::sched::Mode::Simulated;
            } else if (bench_mode == "realtime") {
                bench_cfg.serving.mode = pkus::sched::Mode::Realtime;
            } else {
                throw UsageError("unknown mode " + bench_mode);
            }
            const auto o = pkus::run_bench(bench_cfg);
            if (!o.ok) throw std::runtime_error(o.error);
            std::ostringstream csv;
            o.trace.write_csv(csv);
            write_text(fs::path(g.out_dir) / "bench_trace.csv", csv.str());
            std::cout << csv.str() << o.trace.summary() << "\n";
            return 0;
        }
        if (*verify) {
            return cmd_audit_verify(g, log_path,
                                    key_opt->count() > 0 ? std::optional(key_hex) : std::nullopt);
        }
    } catch (const UsageError& e) {
        std::cerr << "pkus: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "pkus: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
