#include "pkus/aegis.hpp"

#include <algorithm>

namespace pkus::aegis {

namespace {

constexpr std::string_view kQuoteDomain = "PKUS-QUOTE-v1";
constexpr std::string_view kPlanDomain = "PKUS-PLAN-v1";
constexpr std::string_view kPlanApprovalDomain = "PKUS-PLAN-APPROVE-v1";
constexpr std::string_view kPolicyDomain = "PKUS-POLICY-v1";
constexpr std::string_view kRevokeDomain = "PKUS-REVOKE-v1";
constexpr std::string_view kHandshakeDomain = "PKUS-HANDSHAKE-v1";
constexpr std::string_view kSessionSalt = "pkus-session";
constexpr std::string_view kTrafficLabel = "pkus-traffic";

void write_domain(ByteWriter& w, std::string_view domain) { w.str(domain); }

void write_entry(ByteWriter& w, const PolicyEntry& e) {
    w.str(e.client_id);
    w.u8(e.expiry ? 1 : 0);
    w.u64(e.expiry.value_or(0));
    w.u8(e.max_requests ? 1 : 0);
    w.u64(e.max_requests.value_or(0));
}

PolicyEntry read_entry(ByteReader& r) {
    PolicyEntry e;
    e.client_id = r.str();
    const auto has_expiry = r.u8();
    const auto expiry = r.u64();
    const auto has_max = r.u8();
    const auto max = r.u64();
    if (has_expiry > 1 || has_max > 1) {
        throw ProtocolError(ErrorCode::DecodeFailure, "bad optional flag in policy entry");
    }
    if (has_expiry) e.expiry = expiry;
    if (has_max) e.max_requests = max;
    return e;
}

std::vector<PolicyEntry> sorted_entries(std::vector<PolicyEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const PolicyEntry& l, const PolicyEntry& r) { return l.client_id < r.client_id; });
    return entries;
}

template <std::size_t N>
Bytes concat(std::string_view domain, const std::array<std::uint8_t, N>& a) {
    ByteWriter w;
    write_domain(w, domain);
    w.raw(a);
    return std::move(w).take();
}

}  // namespace

RuntimeImage RuntimeImage::from_bytes(Bytes image) {
    RuntimeImage out;
    out.measurement = crypto::sha256(image);
    out.image_bytes = std::move(image);
    return out;
}

Bytes Quote::signed_message() const {
    ByteWriter w;
    write_domain(w, kQuoteDomain);
    w.raw(measurement);
    w.blob(user_data);
    w.raw(nonce);
    return std::move(w).take();
}

AttestationHardware AttestationHardware::from_seed(std::uint64_t seed) {
    crypto::DeterministicStream s(seed, "attestation-hardware");
    auto seed32 = s.take<32>();
    auto key = crypto::SigningKey::from_seed(seed32);
    crypto::secure_zero(seed32);
    return AttestationHardware(std::move(key));
}

Quote AttestationHardware::quote(const Digest& measurement, ByteView user_data,
                                 const Nonce16& nonce) const {
    Quote q;
    q.measurement = measurement;
    q.user_data.assign(user_data.begin(), user_data.end());
    q.nonce = nonce;
    q.signature = key_.sign(q.signed_message());
    return q;
}

bool verify_quote(const Quote& quote, const Digest& expected_measurement,
                  ByteView expected_user_data, const PublicKey& hw_key) {
    if (!crypto::verify(hw_key, quote.signed_message(), quote.signature)) {
        return false;
    }
    return crypto::constant_time_equal(quote.measurement, expected_measurement) &&
           crypto::constant_time_equal(quote.user_data, expected_user_data);
}

Bytes revoked_user_data(const Digest& plan_hash) {
    Bytes out(kRevokedMarker.begin(), kRevokedMarker.end());
    out.insert(out.end(), plan_hash.begin(), plan_hash.end());
    return out;
}

void PolicyEntry::validate() const {
    if (client_id.empty()) {
        throw ProtocolError(ErrorCode::InvalidPlan, "empty client id");
    }
    if ((expiry && *expiry == 0) || (max_requests && *max_requests == 0)) {
        throw ProtocolError(ErrorCode::InvalidPlan,
                            "expiry and max_requests must be positive for client " + client_id);
    }
}

Bytes PolicyPlan::canonical_bytes() const {
    ByteWriter w;
    write_domain(w, kPlanDomain);
    w.str(base_model_id);
    w.str(owner_id);
    w.raw(owner_key.bytes);
    const auto sorted = sorted_entries(entries);
    w.u32(static_cast<std::uint32_t>(sorted.size()));
    for (const auto& e : sorted) {
        write_entry(w, e);
    }
    return std::move(w).take();
}

Digest PolicyPlan::hash() const { return crypto::sha256(canonical_bytes()); }

const PolicyEntry* PolicyPlan::find(std::string_view client_id) const {
    for (const auto& e : entries) {
        if (e.client_id == client_id) {
            return &e;
        }
    }
    return nullptr;
}

void PolicyPlan::validate() const {
    if (owner_id.empty() || base_model_id.empty()) {
        throw ProtocolError(ErrorCode::InvalidPlan, "plan needs owner and base model ids");
    }
    auto sorted = sorted_entries(entries);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        sorted[i].validate();
        if (i > 0 && sorted[i].client_id == sorted[i - 1].client_id) {
            throw ProtocolError(ErrorCode::InvalidPlan, "duplicate client " + sorted[i].client_id);
        }
    }
}

SignedRecord SignedRecord::sign(Bytes payload, std::string signer_id,
                                const crypto::SigningKey& key) {
    SignedRecord r;
    r.signature = key.sign(payload);
    r.payload = std::move(payload);
    r.signer_id = std::move(signer_id);
    return r;
}

bool SignedRecord::verify(const PublicKey& key) const {
    return crypto::verify(key, payload, signature);
}

Bytes SignedRecord::serialize() const {
    ByteWriter w;
    w.blob(payload);
    w.str(signer_id);
    w.raw(signature);
    return std::move(w).take();
}

SignedRecord SignedRecord::deserialize(ByteView bytes) {
    try {
        ByteReader r(bytes);
        SignedRecord out;
        out.payload = r.blob();
        out.signer_id = r.str();
        auto sig = r.raw(crypto::kSignatureSize);
        std::copy(sig.begin(), sig.end(), out.signature.begin());
        if (!r.done()) {
            throw ProtocolError(ErrorCode::DecodeFailure, "trailing bytes after signed record");
        }
        return out;
    } catch (const TruncatedInput& e) {
        throw ProtocolError(ErrorCode::DecodeFailure, e.what());
    }
}

Bytes plan_approval_payload(const Digest& plan_hash) {
    return concat(kPlanApprovalDomain, plan_hash);
}

Bytes policy_update_payload(std::string_view enclave_id, const PolicyUpdate& update) {
    ByteWriter w;
    write_domain(w, kPolicyDomain);
    w.str(enclave_id);
    w.u8(static_cast<std::uint8_t>(update.op));
    w.u64(update.update_seq);
    write_entry(w, update.entry);
    return std::move(w).take();
}

PolicyUpdate parse_policy_update_payload(ByteView payload, std::string_view enclave_id) {
    try {
        ByteReader r(payload);
        if (r.str() != kPolicyDomain) {
            throw ProtocolError(ErrorCode::DecodeFailure, "not a policy update");
        }
        if (r.str() != enclave_id) {
            throw ProtocolError(ErrorCode::BindingMismatch, "policy update addressed to another enclave");
        }
        PolicyUpdate u;
        const auto op = r.u8();
        if (op != static_cast<std::uint8_t>(PolicyOp::Add) &&
            op != static_cast<std::uint8_t>(PolicyOp::Remove)) {
            throw ProtocolError(ErrorCode::DecodeFailure, "unknown policy op");
        }
        u.op = static_cast<PolicyOp>(op);
        u.update_seq = r.u64();
        u.entry = read_entry(r);
        if (!r.done()) {
            throw ProtocolError(ErrorCode::DecodeFailure, "trailing bytes after policy update");
        }
        return u;
    } catch (const TruncatedInput& e) {
        throw ProtocolError(ErrorCode::DecodeFailure, e.what());
    }
}

Bytes revocation_payload(std::string_view enclave_id, const Digest& plan_hash) {
    ByteWriter w;
    write_domain(w, kRevokeDomain);
    w.str(enclave_id);
    w.raw(plan_hash);
    return std::move(w).take();
}

Bytes binding_data(const Digest& measurement, const Digest& plan_hash) {
    Bytes out(measurement.begin(), measurement.end());
    out.insert(out.end(), plan_hash.begin(), plan_hash.end());
    return out;
}

Bytes policy_update_ad(const Digest& measurement, const Digest& plan_hash) {
    ByteWriter w;
    write_domain(w, kPolicyDomain);
    w.raw(binding_data(measurement, plan_hash));
    return std::move(w).take();
}

Bytes handshake_signing_bytes(const PublicKey& owner_ephemeral, const Nonce16& nonce,
                              const Digest& measurement) {
    ByteWriter w;
    write_domain(w, kHandshakeDomain);
    w.raw(owner_ephemeral.bytes);
    w.raw(nonce);
    w.raw(measurement);
    return std::move(w).take();
}

Digest transcript_digest(const PublicKey& owner_ephemeral, const PublicKey& enclave_ephemeral,
                         const Nonce16& nonce) {
    const auto domain = to_bytes(kHandshakeDomain);
    return crypto::sha256({domain, owner_ephemeral.bytes, enclave_ephemeral.bytes, nonce});
}

SymmetricKey derive_session_key(const SymmetricKey& shared_secret, const Nonce16& nonce,
                                const Digest& measurement, const Digest& plan_hash) {
    Bytes salt(kSessionSalt.begin(), kSessionSalt.end());
    salt.insert(salt.end(), nonce.begin(), nonce.end());
    return crypto::hkdf_sha256(shared_secret, salt, binding_data(measurement, plan_hash));
}

SymmetricKey derive_traffic_key(const SymmetricKey& session_key) {
    return crypto::hkdf_sha256(session_key, {}, to_bytes(kTrafficLabel));
}

std::uint64_t session_id_from(const Digest& transcript) {
    ByteReader r(transcript);
    return r.u64();
}

Bytes encode_onboarding_payload(const crypto::GcmNonce& nonce, ByteView ciphertext_and_tag) {
    Bytes out(nonce.begin(), nonce.end());
    out.insert(out.end(), ciphertext_and_tag.begin(), ciphertext_and_tag.end());
    return out;
}

std::string_view state_name(EnclaveState s) {
    switch (s) {
        case EnclaveState::Prepared: return "Prepared";
        case EnclaveState::PlanBound: return "PlanBound";
        case EnclaveState::Onboarded: return "Onboarded";
        case EnclaveState::Revoked: return "Revoked";
    }
    return "?";
}

std::string_view error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::WrongState: return "wrong_state";
        case ErrorCode::BadSignature: return "bad_signature";
        case ErrorCode::Unauthenticated: return "unauthenticated";
        case ErrorCode::ReplayedNonce: return "replayed_nonce";
        case ErrorCode::TagMismatch: return "tag_mismatch";
        case ErrorCode::BindingMismatch: return "binding_mismatch";
        case ErrorCode::DecodeFailure: return "decode_failure";
        case ErrorCode::NotOwner: return "not_owner";
        case ErrorCode::UnknownClient: return "unknown_client";
        case ErrorCode::StaleUpdate: return "stale_update";
        case ErrorCode::Revoked: return "revoked";
        case ErrorCode::InvalidPlan: return "invalid_plan";
    }
    return "?";
}

// Enclave

Enclave::Enclave(std::string id, const Digest& measurement, const AttestationHardware& hw,
                 std::uint64_t entropy_seed, AuditLog* log)
    : id_(std::move(id)),
      measurement_(measurement),
      hw_(&hw),
      entropy_(entropy_seed, "enclave:" + id_),
      audit_(id_, hw.key(), log) {}

Enclave::~Enclave() { erase_secrets(); }

std::pair<std::unique_ptr<Enclave>, Quote> Enclave::prepare(const RuntimeImage& image,
                                                            const AttestationHardware& hw,
                                                            const Nonce16& nonce,
                                                            std::string enclave_id,
                                                            std::uint64_t entropy_seed,
                                                            AuditLog* log) {
    // The measurement is taken over the bytes actually launched, not the claimed digest.
    const Digest measured = crypto::sha256(image.image_bytes);
    std::unique_ptr<Enclave> e(new Enclave(std::move(enclave_id), measured, hw, entropy_seed, log));
    e->audit_.append("prepared", Digest{});
    return {std::move(e), hw.quote(measured, {}, nonce)};
}

std::optional<Digest> Enclave::plan_hash() const {
    if (!plan_) {
        return std::nullopt;
    }
    return plan_hash_;
}

std::vector<SiteId> Enclave::active_sites() const {
    if (state_ != EnclaveState::Onboarded || !adapters_) {
        return {};
    }
    return adapters_->active_sites();
}

void Enclave::require(EnclaveState s, const char* op) const {
    if (state_ == EnclaveState::Revoked) {
        throw ProtocolError(ErrorCode::Revoked, std::string(op) + " on revoked enclave " + id_);
    }
    if (state_ != s) {
        throw ProtocolError(ErrorCode::WrongState, std::string(op) + " requires " +
                                                       std::string(state_name(s)) + ", enclave " +
                                                       id_ + " is " + std::string(state_name(state_)));
    }
}

Quote Enclave::bind_plan(const PolicyPlan& plan, const SignedRecord& owner_approval,
                         const Nonce16& quote_nonce) {
    require(EnclaveState::Prepared, "bind_plan");
    plan.validate();
    const Digest h = plan.hash();
    if (owner_approval.signer_id != plan.owner_id ||
        !crypto::constant_time_equal(owner_approval.payload, plan_approval_payload(h)) ||
        !owner_approval.verify(plan.owner_key)) {
        throw ProtocolError(ErrorCode::BadSignature, "plan approval does not verify under the owner key");
    }
    PolicyPlan stored = plan;
    stored.entries = sorted_entries(plan.entries);
    plan_ = std::move(stored);
    plan_hash_ = h;
    counters_.assign(plan_->entries.size(), 0);
    state_ = EnclaveState::PlanBound;
    audit_.append("plan_bound", plan_hash_, plan_->owner_id);
    return hw_->quote(measurement_, plan_hash_, quote_nonce);
}

HandshakeResponse Enclave::accept_channel(const HandshakeInit& init) {
    require(EnclaveState::PlanBound, "accept_channel");
    if (!crypto::verify(plan().owner_key,
                        handshake_signing_bytes(init.owner_ephemeral, init.nonce, measurement_),
                        init.owner_signature)) {
        throw ProtocolError(ErrorCode::Unauthenticated, "handshake not signed by the plan owner");
    }
    if (!seen_handshake_nonces_.insert(init.nonce).second) {
        throw ProtocolError(ErrorCode::ReplayedNonce, "handshake nonce already used");
    }
    auto eph_seed = entropy_.take<32>();
    const auto eph = crypto::KeyAgreement::from_seed(eph_seed);
    crypto::secure_zero(eph_seed);
    auto shared = eph.shared_secret(init.owner_ephemeral);
    if (session_key_) {
        crypto::secure_zero(*session_key_);
    }
    session_key_ = derive_session_key(shared, init.nonce, measurement_, plan_hash_);
    crypto::secure_zero(shared);

    const Digest transcript = transcript_digest(init.owner_ephemeral, eph.public_key(), init.nonce);
    session_id_ = session_id_from(transcript);
    audit_.append("channel_established", plan_hash_);
    return {eph.public_key(), hw_->quote(measurement_, transcript, init.nonce)};
}

void Enclave::onboard(const OnboardingMessage& msg) {
    require(EnclaveState::PlanBound, "onboard");
    if (!session_key_) {
        throw ProtocolError(ErrorCode::WrongState, "onboard before channel establishment");
    }
    if (msg.sender_id != plan().owner_id) {
        throw ProtocolError(ErrorCode::NotOwner, "only " + plan().owner_id + " may onboard");
    }
    if (msg.payload.size() < crypto::kGcmNonceSize + crypto::kGcmTagSize) {
        throw ProtocolError(ErrorCode::DecodeFailure, "onboarding payload too short");
    }
    crypto::GcmNonce nonce{};
    std::copy_n(msg.payload.begin(), nonce.size(), nonce.begin());
    const ByteView sealed = ByteView(msg.payload).subspan(nonce.size());
    // The tag is checked against the binding this enclave holds, so a message sealed
    // for another plan fails here exactly like a flipped ciphertext bit.
    const auto expected_ad = binding_data(measurement_, plan_hash_);
    auto plain = crypto::aead_open(*session_key_, nonce, sealed, expected_ad);
    if (!plain || !crypto::constant_time_equal(msg.associated_data, expected_ad)) {
        if (plain) crypto::secure_zero(plain->data(), plain->size());
        audit_.append("onboard_rejected", plan_hash_, "tag mismatch");
        throw ProtocolError(ErrorCode::TagMismatch, "onboarding tag check failed");
    }
    auto wipe = [&] { crypto::secure_zero(plain->data(), plain->size()); };
    ProviderAdapterSet set;
    try {
        set = deserialize_adapter_set(*plain);
    } catch (const DecodeError& e) {
        wipe();
        throw ProtocolError(ErrorCode::DecodeFailure, e.what());
    }
    wipe();
    if (set.base_model_id() != plan().base_model_id) {
        throw ProtocolError(ErrorCode::BindingMismatch, "adapters target base model " +
                                                            set.base_model_id() + ", plan is for " +
                                                            plan().base_model_id);
    }
    if (set.provider_id() != plan().owner_id) {
        throw ProtocolError(ErrorCode::NotOwner, "adapter set belongs to " + set.provider_id());
    }
    adapters_ = std::move(set);
    traffic_key_ = derive_traffic_key(*session_key_);
    state_ = EnclaveState::Onboarded;
    audit_.append("onboarded", plan_hash_,
                  std::to_string(adapters_->active_sites().size()) + " active sites");
}

Quote Enclave::apply_policy_update(const SealedMessage& msg, const Nonce16& quote_nonce) {
    require(EnclaveState::Onboarded, "apply_policy_update");
    auto plain = crypto::aead_open(*session_key_, msg.nonce, msg.ciphertext,
                                   policy_update_ad(measurement_, plan_hash_));
    if (!plain) {
        throw ProtocolError(ErrorCode::TagMismatch, "policy update not sealed under this channel");
    }
    const auto record = SignedRecord::deserialize(*plain);
    if (record.signer_id != plan().owner_id || !record.verify(plan().owner_key)) {
        throw ProtocolError(ErrorCode::BadSignature, "policy update not signed by the owner");
    }
    const auto update = parse_policy_update_payload(record.payload, id_);
    if (update.update_seq <= last_update_seq_) {
        throw ProtocolError(ErrorCode::StaleUpdate, "update_seq " + std::to_string(update.update_seq) +
                                                        " <= " + std::to_string(last_update_seq_));
    }
    auto& entries = plan_->entries;
    auto it = std::find_if(entries.begin(), entries.end(),
                           [&](const PolicyEntry& e) { return e.client_id == update.entry.client_id; });
    const auto idx = static_cast<std::size_t>(it - entries.begin());
    if (update.op == PolicyOp::Remove) {
        if (it == entries.end()) {
            throw ProtocolError(ErrorCode::UnknownClient, "no lease for " + update.entry.client_id);
        }
        entries.erase(it);
        counters_.erase(counters_.begin() + static_cast<std::ptrdiff_t>(idx));
    } else {
        update.entry.validate();
        if (it == entries.end()) {
            entries.push_back(update.entry);
            counters_.push_back(0);
        } else {
            // Re-adding a client grants a fresh lease.
            *it = update.entry;
            counters_[idx] = 0;
        }
        // Keep entries sorted with their counters.
        std::vector<std::size_t> order(entries.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
            return entries[l].client_id < entries[r].client_id;
        });
        std::vector<PolicyEntry> e2;
        std::vector<std::uint64_t> c2;
        for (auto i : order) {
            e2.push_back(std::move(entries[i]));
            c2.push_back(counters_[i]);
        }
        entries = std::move(e2);
        counters_ = std::move(c2);
    }
    last_update_seq_ = update.update_seq;
    plan_hash_ = plan_->hash();
    audit_.append("policy_update", plan_hash_,
                  std::string(update.op == PolicyOp::Add ? "add " : "remove ") +
                      update.entry.client_id);
    return hw_->quote(measurement_, plan_hash_, quote_nonce);
}

bool Enclave::authorize(std::string_view client_id, std::uint64_t now) {
    require(EnclaveState::Onboarded, "authorize");
    const auto& entries = plan_->entries;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].client_id != client_id) {
            continue;
        }
        const auto& e = entries[i];
        const bool live = !e.expiry || now < *e.expiry;
        const bool quota = !e.max_requests || counters_[i] < *e.max_requests;
        if (live && quota) {
            ++counters_[i];
            return true;
        }
        audit_.append("deny", plan_hash_,
                      std::string(client_id) + (live ? " quota exhausted" : " lease expired"));
        return false;
    }
    audit_.append("deny", plan_hash_, std::string(client_id) + " not in policy");
    return false;
}

Quote Enclave::revoke(const SignedRecord& request, const Nonce16& quote_nonce) {
    if (state_ == EnclaveState::Revoked) {
        return *final_quote_;
    }
    require(EnclaveState::Onboarded, "revoke");
    if (request.signer_id != plan().owner_id || !request.verify(plan().owner_key)) {
        throw ProtocolError(ErrorCode::BadSignature, "revocation not signed by the owner");
    }
    if (!crypto::constant_time_equal(request.payload, revocation_payload(id_, plan_hash_))) {
        throw ProtocolError(ErrorCode::BindingMismatch, "revocation names another enclave or plan");
    }
    const Digest last_plan = plan_hash_;
    erase_secrets();
    state_ = EnclaveState::Revoked;
    final_quote_ = hw_->quote(measurement_, revoked_user_data(last_plan), quote_nonce);
    audit_.append("revoked", last_plan);
    return *final_quote_;
}

void Enclave::erase_secrets() {
    if (adapters_) {
        for (auto& [site, entry] : adapters_->mutable_entries()) {
            auto a = entry.adapter.raw_a();
            auto b = entry.adapter.raw_b();
            crypto::secure_zero(a.data(), a.size_bytes());
            crypto::secure_zero(b.data(), b.size_bytes());
        }
    }
    if (session_key_) crypto::secure_zero(*session_key_);
    if (traffic_key_) crypto::secure_zero(*traffic_key_);
    if (plan_) {
        for (auto& e : plan_->entries) {
            crypto::secure_zero(e.client_id.data(), e.client_id.size());
            if (e.expiry) e.expiry = 0;
            if (e.max_requests) e.max_requests = 0;
        }
    }
    if (!counters_.empty()) {
        crypto::secure_zero(counters_.data(), counters_.size() * sizeof(std::uint64_t));
    }
}

// Owner side

OwnerEndpoint::OwnerEndpoint(std::string owner_id, crypto::SigningKey identity, std::uint64_t seed)
    : owner_id_(std::move(owner_id)), identity_(std::move(identity)), entropy_(seed, "owner:" + owner_id_) {}

SignedRecord OwnerEndpoint::approve_plan(const PolicyPlan& plan) const {
    return SignedRecord::sign(plan_approval_payload(plan.hash()), owner_id_, identity_);
}

HandshakeInit OwnerEndpoint::begin_handshake(const Digest& expected_measurement) {
    auto eph_seed = entropy_.take<32>();
    ephemeral_ = crypto::KeyAgreement::from_seed(eph_seed);
    crypto::secure_zero(eph_seed);
    pending_nonce_ = entropy_.take<16>();
    HandshakeInit init;
    init.owner_ephemeral = ephemeral_->public_key();
    init.nonce = pending_nonce_;
    init.owner_signature =
        identity_.sign(handshake_signing_bytes(init.owner_ephemeral, init.nonce, expected_measurement));
    return init;
}

void OwnerEndpoint::finish_handshake(const HandshakeResponse& response,
                                     const Digest& expected_measurement, const Digest& plan_hash,
                                     const PublicKey& hw_key) {
    if (!ephemeral_) {
        throw ProtocolError(ErrorCode::WrongState, "finish_handshake without begin_handshake");
    }
    const Digest transcript =
        transcript_digest(ephemeral_->public_key(), response.enclave_ephemeral, pending_nonce_);
    if (response.quote.nonce != pending_nonce_ ||
        !verify_quote(response.quote, expected_measurement, transcript, hw_key)) {
        throw ProtocolError(ErrorCode::Unauthenticated, "enclave quote does not bind the handshake");
    }
    auto shared = ephemeral_->shared_secret(response.enclave_ephemeral);
    session_key_ = derive_session_key(shared, pending_nonce_, expected_measurement, plan_hash);
    crypto::secure_zero(shared);
    session_id_ = session_id_from(transcript);
    ephemeral_.reset();
}

crypto::GcmNonce OwnerEndpoint::next_gcm_nonce() {
    // Counter nonces: unique per session key by construction.
    crypto::GcmNonce n{};
    ByteWriter w;
    w.u64(++gcm_counter_);
    std::copy(w.bytes().begin(), w.bytes().end(), n.begin());
    return n;
}

OnboardingMessage OwnerEndpoint::seal_adapters(const ProviderAdapterSet& set,
                                               const Digest& measurement, const Digest& plan_hash) {
    if (!session_key_) {
        throw ProtocolError(ErrorCode::WrongState, "seal_adapters without a session");
    }
    Bytes plain = serialize_adapter_set(set);
    const auto nonce = next_gcm_nonce();
    OnboardingMessage msg;
    msg.sender_id = owner_id_;
    msg.associated_data = binding_data(measurement, plan_hash);
    msg.payload = encode_onboarding_payload(
        nonce, crypto::aead_seal(*session_key_, nonce, plain, msg.associated_data));
    crypto::secure_zero(plain.data(), plain.size());
    return msg;
}

SealedMessage OwnerEndpoint::seal_policy_update(const PolicyUpdate& update,
                                                std::string_view enclave_id,
                                                const Digest& measurement,
                                                const Digest& current_plan_hash) {
    if (!session_key_) {
        throw ProtocolError(ErrorCode::WrongState, "seal_policy_update without a session");
    }
    const auto record =
        SignedRecord::sign(policy_update_payload(enclave_id, update), owner_id_, identity_);
    SealedMessage msg;
    msg.nonce = next_gcm_nonce();
    msg.ciphertext = crypto::aead_seal(*session_key_, msg.nonce, record.serialize(),
                                       policy_update_ad(measurement, current_plan_hash));
    return msg;
}

SignedRecord OwnerEndpoint::revocation_request(std::string_view enclave_id,
                                               const Digest& plan_hash) const {
    return SignedRecord::sign(revocation_payload(enclave_id, plan_hash), owner_id_, identity_);
}

SymmetricKey OwnerEndpoint::traffic_key() const {
    if (!session_key_) {
        throw ProtocolError(ErrorCode::WrongState, "no session established");
    }
    return derive_traffic_key(*session_key_);
}

}  // namespace pkus::aegis
