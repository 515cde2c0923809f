#include "pkus/runtime.hpp"

#include <algorithm>
#include <limits>

namespace pkus::runtime {

namespace {

void write_sites(ByteWriter& w, const std::vector<SiteId>& sites) {
    w.u16(static_cast<std::uint16_t>(sites.size()));
    for (const auto& s : sites) {
        w.u32(s.layer);
        w.u8(static_cast<std::uint8_t>(s.projection));
    }
}

std::vector<SiteId> read_sites(ByteReader& r) {
    const auto n = r.u16();
    std::vector<SiteId> sites;
    sites.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SiteId s;
        s.layer = r.u32();
        const auto p = r.u8();
        if (p >= kProjectionsPerLayer) {
            throw FrameError("unknown projection tag " + std::to_string(p));
        }
        s.projection = static_cast<Projection>(p);
        sites.push_back(s);
    }
    return sites;
}

void write_vectors(ByteWriter& w, const std::vector<Vec>& vs) {
    const auto dim = vs.empty() ? 0 : vs.front().size();
    w.u32(static_cast<std::uint32_t>(dim));
    for (const auto& v : vs) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            w.f64(v[i]);
        }
    }
}

std::vector<Vec> read_vectors(ByteReader& r, std::size_t count) {
    const auto dim = r.u32();
    if (count > 0 && (dim == 0 || dim > 65536)) {
        throw FrameError("bad vector dimension " + std::to_string(dim));
    }
    if (static_cast<std::uint64_t>(dim) * count * 8 > r.remaining()) {
        throw FrameError("vector data truncated");
    }
    std::vector<Vec> out(count, Vec(static_cast<Eigen::Index>(dim)));
    for (auto& v : out) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            v[i] = r.f64();
        }
    }
    return out;
}

/// MAC input: type || session id || body.
crypto::Mac mac_over(FrameType type, std::uint64_t session_id, ByteView body,
                     const aegis::SymmetricKey& key) {
    ByteWriter w;
    w.u8(static_cast<std::uint8_t>(type));
    w.u64(session_id);
    w.raw(body);
    return crypto::hmac_sha256(key, w.bytes());
}

Bytes seal(FrameType type, std::uint64_t session_id, Bytes body, const aegis::SymmetricKey* key) {
    crypto::Mac mac{};
    if (key) {
        mac = mac_over(type, session_id, body, *key);
    }
    body.insert(body.end(), mac.begin(), mac.end());
    return encode_frame(type, session_id, body);
}

/// Splits payload into body and trailing MAC, checking the MAC when a key is given.
ByteView check_mac(const Frame& f, std::uint64_t session_id, const aegis::SymmetricKey& key) {
    if (f.payload.size() < crypto::kMacSize) {
        throw FrameError("payload shorter than its MAC");
    }
    const ByteView payload(f.payload);
    const auto body = payload.first(payload.size() - crypto::kMacSize);
    const auto mac = payload.last(crypto::kMacSize);
    const auto expected = mac_over(f.type, f.session_id, body, key);
    if (f.session_id != session_id || !crypto::constant_time_equal(mac, expected)) {
        throw MacFailure("frame MAC does not verify");
    }
    return body;
}

template <typename F>
auto decoding(F&& f) {
    try {
        return f();
    } catch (const TruncatedInput& e) {
        throw FrameError(e.what());
    }
}

}  // namespace

Bytes encode_frame(FrameType type, std::uint64_t session_id, ByteView payload) {
    const std::size_t body = 1 + 8 + payload.size();
    if (body > std::numeric_limits<std::uint32_t>::max()) {
        throw FrameError("frame too large");
    }
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(body));
    w.u8(static_cast<std::uint8_t>(type));
    w.u64(session_id);
    w.raw(payload);
    return std::move(w).take();
}

Frame decode_frame(ByteView bytes) {
    return decoding([&] {
        ByteReader r(bytes);
        const auto len = r.u32();
        if (len != r.remaining() || len < 9) {
            throw FrameError("frame length field " + std::to_string(len) + " does not match " +
                             std::to_string(r.remaining()) + " remaining bytes");
        }
        const auto t = r.u8();
        if (t < 1 || t > 4) {
            throw FrameError("unknown frame type " + std::to_string(t));
        }
        Frame f;
        f.type = static_cast<FrameType>(t);
        f.session_id = r.u64();
        auto rest = r.raw(r.remaining());
        f.payload.assign(rest.begin(), rest.end());
        return f;
    });
}

void validate_batch(const std::vector<SiteId>& sites, const std::vector<Vec>& vectors) {
    if (sites.empty() || sites.size() != vectors.size()) {
        throw ContractViolation("batch needs >= 1 site and one vector per site");
    }
    if (sites.size() > kMaxBatchSites) {
        throw ContractViolation("batch has too many sites");
    }
    for (std::size_t i = 1; i < sites.size(); ++i) {
        if (sites[i].layer != sites[0].layer || !(sites[i - 1] < sites[i])) {
            throw ContractViolation("batch sites must be increasing within one layer segment");
        }
    }
    for (const auto& v : vectors) {
        if (v.size() != vectors.front().size() || v.size() == 0) {
            throw ContractViolation("batch vectors must share one positive dimension");
        }
    }
}

Bytes seal_activation_batch(const ActivationBatch& batch, std::uint64_t session_id,
                            const aegis::SymmetricKey& traffic_key) {
    validate_batch(batch.sites, batch.activations);
    ByteWriter w;
    w.u64(batch.request_id);
    w.str(batch.client_id);
    write_sites(w, batch.sites);
    write_vectors(w, batch.activations);
    return seal(FrameType::ActivationBatch, session_id, std::move(w).take(), &traffic_key);
}

ActivationBatch open_activation_batch(ByteView frame, std::uint64_t session_id,
                                      const aegis::SymmetricKey& traffic_key) {
    const Frame f = decode_frame(frame);
    if (f.type != FrameType::ActivationBatch) {
        throw FrameError("expected an activation batch");
    }
    const auto body = check_mac(f, session_id, traffic_key);
    return decoding([&] {
        ByteReader r(body);
        ActivationBatch b;
        b.request_id = r.u64();
        b.client_id = r.str();
        b.sites = read_sites(r);
        b.activations = read_vectors(r, b.sites.size());
        if (!r.done()) {
            throw FrameError("trailing bytes in activation batch");
        }
        try {
            validate_batch(b.sites, b.activations);
        } catch (const ContractViolation& e) {
            throw FrameError(e.what());
        }
        return b;
    });
}

Bytes seal_delta_batch(const DeltaBatch& batch, std::uint64_t session_id,
                       const aegis::SymmetricKey& traffic_key) {
    ByteWriter w;
    w.u64(batch.request_id);
    write_sites(w, batch.sites);
    write_vectors(w, batch.deltas);
    return seal(FrameType::DeltaBatch, session_id, std::move(w).take(), &traffic_key);
}

Bytes seal_denial(const Denial& denial, std::uint64_t session_id,
                  const aegis::SymmetricKey& traffic_key) {
    ByteWriter w;
    w.u64(denial.request_id);
    w.str(denial.reason);
    return seal(FrameType::Denial, session_id, std::move(w).take(), &traffic_key);
}

Bytes encode_fault(const Fault& fault, std::uint64_t session_id,
                   const aegis::SymmetricKey* traffic_key) {
    ByteWriter w;
    w.u64(fault.request_id);
    w.str(fault.reason);
    return seal(FrameType::Fault, session_id, std::move(w).take(), traffic_key);
}

Response open_response(ByteView frame, std::uint64_t session_id,
                       const aegis::SymmetricKey& traffic_key) {
    const Frame f = decode_frame(frame);
    if (f.type == FrameType::Fault) {
        // Unauthenticated by design: a fault only ever aborts the request.
        if (f.payload.size() < crypto::kMacSize) {
            throw FrameError("fault frame too short");
        }
        return decoding([&]() -> Response {
            ByteReader r(ByteView(f.payload).first(f.payload.size() - crypto::kMacSize));
            Fault out;
            out.request_id = r.u64();
            out.reason = r.str();
            return out;
        });
    }
    const auto body = check_mac(f, session_id, traffic_key);
    return decoding([&]() -> Response {
        ByteReader r(body);
        if (f.type == FrameType::DeltaBatch) {
            DeltaBatch d;
            d.request_id = r.u64();
            d.sites = read_sites(r);
            d.deltas = read_vectors(r, d.sites.size());
            if (!r.done()) throw FrameError("trailing bytes in delta batch");
            return d;
        }
        if (f.type == FrameType::Denial) {
            Denial d;
            d.request_id = r.u64();
            d.reason = r.str();
            if (!r.done()) throw FrameError("trailing bytes in denial");
            return d;
        }
        throw FrameError("unexpected frame type from enclave");
    });
}

void ResponseQueue::push(WorkerResponse r) {
    {
        std::lock_guard lock(mu_);
        items_.push_back(std::move(r));
    }
    cv_.notify_one();
}

std::optional<WorkerResponse> ResponseQueue::pop_for(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return !items_.empty(); })) {
        return std::nullopt;
    }
    std::optional<WorkerResponse> out;
    out.emplace();
    std::swap(*out, items_.front());
    items_.pop_front();
    return out;
}

EnclaveWorker::EnclaveWorker(aegis::Enclave& enclave, std::size_t index, ResponseQueue& out,
                             Clock::time_point epoch)
    : enclave_(enclave), index_(index), out_(out), epoch_(epoch), thread_([this] { run(); }) {}

EnclaveWorker::~EnclaveWorker() {
    {
        std::lock_guard lock(mu_);
        stop_ = true;
    }
    cv_.notify_one();
    thread_.join();
}

void EnclaveWorker::submit(Bytes frame, std::uint64_t request_id, std::uint64_t now) {
    {
        std::lock_guard lock(mu_);
        inbox_.push_back({std::move(frame), request_id, now});
    }
    cv_.notify_one();
}

std::vector<std::uint64_t> EnclaveWorker::consumed_order() const {
    std::lock_guard lock(mu_);
    return consumed_;
}

void EnclaveWorker::run() {
    auto micros = [&] {
        return std::chrono::duration<double, std::micro>(Clock::now() - epoch_).count();
    };
    while (true) {
        Item item;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || !inbox_.empty(); });
            if (inbox_.empty()) {
                return;
            }
            item = std::move(inbox_.front());
            inbox_.pop_front();
            consumed_.push_back(item.request_id);
        }
        WorkerResponse r;
        r.enclave_index = index_;
        r.request_id = item.request_id;
        r.start_us = micros();
        try {
            r.frame = enclave_.handle_frame(item.frame, item.now);
        } catch (const std::exception& e) {
            r.frame = encode_fault({item.request_id, e.what()}, 0, nullptr);
        }
        r.end_us = micros();
        out_.push(std::move(r));
    }
}

}  // namespace pkus::runtime

// Enclave inference entry points live with the runtime codecs.
namespace pkus::aegis {

runtime::InvokeResult Enclave::invoke(const runtime::ActivationBatch& batch, std::uint64_t now) {
    require(EnclaveState::Onboarded, "invoke");
    runtime::validate_batch(batch.sites, batch.activations);
    // Policy is charged once per batch.
    if (!authorize(batch.client_id, now)) {
        return {runtime::Denial{batch.request_id, "client " + batch.client_id + " not authorized"}};
    }
    runtime::DeltaBatch out;
    out.request_id = batch.request_id;
    out.sites = batch.sites;
    out.deltas.reserve(batch.sites.size());
    const auto& entries = adapters_->entries();
    for (std::size_t i = 0; i < batch.sites.size(); ++i) {
        const Vec& x = batch.activations[i];
        auto it = entries.find(batch.sites[i]);
        if (it == entries.end() || !it->second.active) {
            out.deltas.push_back(Vec::Zero(x.size()));
            continue;
        }
        const auto& ad = it->second.adapter;
        if (ad.d_in() != x.size()) {
            throw ContractViolation("activation dim " + std::to_string(x.size()) + " at " +
                                    to_string(batch.sites[i]) + ", adapter expects " +
                                    std::to_string(ad.d_in()));
        }
        out.deltas.push_back(ad.delta(x));
    }
    return {std::move(out)};
}

std::optional<Bytes> Enclave::handle_frame(ByteView frame, std::uint64_t now) {
    std::uint64_t request_id = 0;
    if (state_ != EnclaveState::Onboarded) {
        const auto reason = state_ == EnclaveState::Revoked ? "revoked" : "not onboarded";
        return runtime::encode_fault({0, reason}, session_id_, nullptr);
    }
    runtime::ActivationBatch batch;
    try {
        batch = runtime::open_activation_batch(frame, session_id_, *traffic_key_);
    } catch (const runtime::MacFailure&) {
        audit_.append("mac_failure", plan_hash_);
        return std::nullopt;
    } catch (const runtime::FrameError& e) {
        audit_.append("mac_failure", plan_hash_, std::string("malformed: ") + e.what());
        return std::nullopt;
    }
    request_id = batch.request_id;
    try {
        auto result = invoke(batch, now);
        if (auto* d = std::get_if<runtime::DeltaBatch>(&result.value)) {
            return runtime::seal_delta_batch(*d, session_id_, *traffic_key_);
        }
        return runtime::seal_denial(std::get<runtime::Denial>(result.value), session_id_,
                                    *traffic_key_);
    } catch (const std::exception& e) {
        return runtime::encode_fault({request_id, e.what()}, session_id_, &*traffic_key_);
    }
}

}  // namespace pkus::aegis
