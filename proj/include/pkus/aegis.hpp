#ifndef PKUS_AEGIS_HPP
#define PKUS_AEGIS_HPP

#include "pkus/adapter.hpp"
#include "pkus/audit.hpp"
#include "pkus/crypto.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pkus::runtime {
struct ActivationBatch;
struct InvokeResult;
}  // namespace pkus::runtime

namespace pkus::aegis {

using crypto::Digest;
using crypto::PublicKey;
using crypto::Signature;
using crypto::SymmetricKey;
using Nonce16 = std::array<std::uint8_t, 16>;

/// Prefix of the user data in a final quote; followed by the last plan hash.
inline constexpr std::string_view kRevokedMarker = "PKUS-REVOKED";

struct RuntimeImage {
    Bytes image_bytes;
    Digest measurement{};

    static RuntimeImage from_bytes(Bytes image);
};

struct Quote {
    Digest measurement{};
    Bytes user_data;
    Nonce16 nonce{};
    Signature signature{};

    [[nodiscard]] Bytes signed_message() const;
    bool operator==(const Quote&) const = default;
};

/// Simulated attestation hardware: a testbed signing key whose public half is
/// distributed out of band to verifiers.
class AttestationHardware {
public:
    explicit AttestationHardware(crypto::SigningKey key) : key_(std::move(key)) {}
    static AttestationHardware from_seed(std::uint64_t seed);

    [[nodiscard]] const PublicKey& public_key() const { return key_.public_key(); }
    [[nodiscard]] Quote quote(const Digest& measurement, ByteView user_data,
                              const Nonce16& nonce) const;
    [[nodiscard]] const crypto::SigningKey& key() const { return key_; }

private:
    crypto::SigningKey key_;
};

/// Accepts iff the signature verifies under hw_key and both measurement and user
/// data match the expectation.
bool verify_quote(const Quote& quote, const Digest& expected_measurement,
                  ByteView expected_user_data, const PublicKey& hw_key);

Bytes revoked_user_data(const Digest& plan_hash);

struct PolicyEntry {
    std::string client_id;
    std::optional<std::uint64_t> expiry;
    std::optional<std::uint64_t> max_requests;

    void validate() const;
    bool operator==(const PolicyEntry&) const = default;
};

struct PolicyPlan {
    std::string base_model_id;
    std::string owner_id;
    PublicKey owner_key;
    std::vector<PolicyEntry> entries;

    /// Entries sorted by client_id, so the hash ignores insertion order.
    [[nodiscard]] Bytes canonical_bytes() const;
    [[nodiscard]] Digest hash() const;
    [[nodiscard]] const PolicyEntry* find(std::string_view client_id) const;
    /// Throws ProtocolError(InvalidPlan) on duplicate clients or bad entries.
    void validate() const;
};

struct SignedRecord {
    Bytes payload;
    std::string signer_id;
    Signature signature{};

    static SignedRecord sign(Bytes payload, std::string signer_id, const crypto::SigningKey& key);
    [[nodiscard]] bool verify(const PublicKey& key) const;

    [[nodiscard]] Bytes serialize() const;
    static SignedRecord deserialize(ByteView bytes);
};

enum class PolicyOp : std::uint8_t { Add = 1, Remove = 2 };

struct PolicyUpdate {
    PolicyOp op = PolicyOp::Add;
    std::uint64_t update_seq = 0;  // must increase per enclave
    PolicyEntry entry;
};

Bytes plan_approval_payload(const Digest& plan_hash);
Bytes policy_update_payload(std::string_view enclave_id, const PolicyUpdate& update);
PolicyUpdate parse_policy_update_payload(ByteView payload, std::string_view enclave_id);
Bytes revocation_payload(std::string_view enclave_id, const Digest& plan_hash);

/// measurement || plan_hash: the associated data of the onboarding payload.
Bytes binding_data(const Digest& measurement, const Digest& plan_hash);

struct HandshakeInit {
    PublicKey owner_ephemeral;
    Nonce16 nonce{};
    Signature owner_signature{};  // over ephemeral, nonce and the expected measurement
};

struct HandshakeResponse {
    PublicKey enclave_ephemeral;
    Quote quote;  // user_data = transcript digest
};

Bytes handshake_signing_bytes(const PublicKey& owner_ephemeral, const Nonce16& nonce,
                              const Digest& measurement);
Digest transcript_digest(const PublicKey& owner_ephemeral, const PublicKey& enclave_ephemeral,
                         const Nonce16& nonce);
SymmetricKey derive_session_key(const SymmetricKey& shared_secret, const Nonce16& nonce,
                                const Digest& measurement, const Digest& plan_hash);
/// Domain-separated MAC key for activation traffic.
SymmetricKey derive_traffic_key(const SymmetricKey& session_key);
std::uint64_t session_id_from(const Digest& transcript);

struct OnboardingMessage {
    std::string sender_id;
    Bytes payload;  // nonce(12) || ciphertext || tag(16)
    Bytes associated_data;
};

Bytes encode_onboarding_payload(const crypto::GcmNonce& nonce, ByteView ciphertext_and_tag);

struct SealedMessage {
    crypto::GcmNonce nonce{};
    Bytes ciphertext;  // ciphertext || tag
};

enum class EnclaveState { Prepared, PlanBound, Onboarded, Revoked };
std::string_view state_name(EnclaveState s);

enum class ErrorCode {
    WrongState,
    BadSignature,
    Unauthenticated,
    ReplayedNonce,
    TagMismatch,
    BindingMismatch,
    DecodeFailure,
    NotOwner,
    UnknownClient,
    StaleUpdate,
    Revoked,
    InvalidPlan,
};
std::string_view error_code_name(ErrorCode c);

class ProtocolError : public std::runtime_error {
public:
    ProtocolError(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}
    [[nodiscard]] ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

/// One provider's enclave. Single-threaded; the host talks to it only through the
/// methods below, none of which return adapter material.
class Enclave {
public:
    static std::pair<std::unique_ptr<Enclave>, Quote> prepare(const RuntimeImage& image,
                                                              const AttestationHardware& hw,
                                                              const Nonce16& nonce,
                                                              std::string enclave_id,
                                                              std::uint64_t entropy_seed,
                                                              AuditLog* log = nullptr);

    Enclave(const Enclave&) = delete;
    Enclave& operator=(const Enclave&) = delete;
    ~Enclave();

    [[nodiscard]] EnclaveState state() const { return state_; }
    [[nodiscard]] const std::string& id() const { return id_; }
    [[nodiscard]] const Digest& measurement() const { return measurement_; }
    [[nodiscard]] std::optional<Digest> plan_hash() const;
    [[nodiscard]] std::uint64_t session_id() const { return session_id_; }
    [[nodiscard]] const AuditChain& audit() const { return audit_; }
    /// Sites with an active adapter; metadata only.
    [[nodiscard]] std::vector<SiteId> active_sites() const;

    Quote bind_plan(const PolicyPlan& plan, const SignedRecord& owner_approval,
                    const Nonce16& quote_nonce);
    HandshakeResponse accept_channel(const HandshakeInit& init);
    void onboard(const OnboardingMessage& msg);
    Quote apply_policy_update(const SealedMessage& msg, const Nonce16& quote_nonce);
    /// Allow iff the client holds a live lease; charges one request on allow.
    bool authorize(std::string_view client_id, std::uint64_t now);
    Quote revoke(const SignedRecord& request, const Nonce16& quote_nonce);

    /// Typed inference entry point (batch MAC already checked by the caller).
    runtime::InvokeResult invoke(const runtime::ActivationBatch& batch, std::uint64_t now);
    /// Wire entry point: frame in, frame out. Frames that fail authentication
    /// are dropped (nullopt) and audited.
    std::optional<Bytes> handle_frame(ByteView frame, std::uint64_t now);

private:
    friend struct EnclaveInspector;

    Enclave(std::string id, const Digest& measurement, const AttestationHardware& hw,
            std::uint64_t entropy_seed, AuditLog* log);

    void require(EnclaveState s, const char* op) const;
    const PolicyPlan& plan() const { return *plan_; }
    void erase_secrets();

    EnclaveState state_ = EnclaveState::Prepared;
    std::string id_;
    Digest measurement_{};
    const AttestationHardware* hw_;
    crypto::DeterministicStream entropy_;
    AuditChain audit_;

    std::optional<PolicyPlan> plan_;
    Digest plan_hash_{};
    std::vector<std::uint64_t> counters_;  // parallel to plan_->entries
    std::uint64_t last_update_seq_ = 0;

    std::optional<SymmetricKey> session_key_;
    std::optional<SymmetricKey> traffic_key_;
    std::uint64_t session_id_ = 0;
    std::set<Nonce16> seen_handshake_nonces_;

    std::optional<ProviderAdapterSet> adapters_;
    std::optional<Quote> final_quote_;
};

/// Owner-side protocol driver for one enclave.
class OwnerEndpoint {
public:
    OwnerEndpoint(std::string owner_id, crypto::SigningKey identity, std::uint64_t seed);

    [[nodiscard]] const std::string& id() const { return owner_id_; }
    [[nodiscard]] const PublicKey& public_key() const { return identity_.public_key(); }
    [[nodiscard]] const crypto::SigningKey& identity() const { return identity_; }

    [[nodiscard]] SignedRecord approve_plan(const PolicyPlan& plan) const;

    HandshakeInit begin_handshake(const Digest& expected_measurement);
    /// Verifies the enclave's quote against the transcript and derives the session key.
    void finish_handshake(const HandshakeResponse& response, const Digest& expected_measurement,
                          const Digest& plan_hash, const PublicKey& hw_key);

    OnboardingMessage seal_adapters(const ProviderAdapterSet& set, const Digest& measurement,
                                    const Digest& plan_hash);
    SealedMessage seal_policy_update(const PolicyUpdate& update, std::string_view enclave_id,
                                     const Digest& measurement, const Digest& current_plan_hash);
    [[nodiscard]] SignedRecord revocation_request(std::string_view enclave_id,
                                                  const Digest& plan_hash) const;

    [[nodiscard]] bool has_session() const { return session_key_.has_value(); }
    /// Key the owner hands to the serving host so it can MAC activation traffic.
    [[nodiscard]] SymmetricKey traffic_key() const;
    [[nodiscard]] std::uint64_t session_id() const { return session_id_; }

private:
    crypto::GcmNonce next_gcm_nonce();

    std::string owner_id_;
    crypto::SigningKey identity_;
    crypto::DeterministicStream entropy_;
    std::optional<crypto::KeyAgreement> ephemeral_;
    Nonce16 pending_nonce_{};
    std::optional<SymmetricKey> session_key_;
    std::uint64_t session_id_ = 0;
    std::uint64_t gcm_counter_ = 0;
};

Bytes policy_update_ad(const Digest& measurement, const Digest& plan_hash);

}  // namespace pkus::aegis

#endif  // PKUS_AEGIS_HPP
