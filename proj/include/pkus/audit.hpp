#ifndef PKUS_AUDIT_HPP
#define PKUS_AUDIT_HPP

#include "pkus/crypto.hpp"

#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pkus {

/// One signed lifecycle event. Records of one enclave form a hash chain via `prev`.
struct AuditRecord {
    std::uint64_t seq = 0;
    std::string enclave_id;
    std::string event;
    crypto::Digest plan_hash{};
    crypto::Digest prev{};
    std::string detail;
    crypto::Signature signature{};

    /// Domain-separated bytes covered by the signature.
    [[nodiscard]] Bytes signing_bytes() const;
    /// Hash the next record of the same enclave stores in `prev`.
    [[nodiscard]] crypto::Digest link_hash() const;

    [[nodiscard]] std::string to_json_line() const;
    /// Throws std::invalid_argument on malformed lines.
    static AuditRecord from_json_line(std::string_view line);

    bool operator==(const AuditRecord&) const = default;
};

/// Append-only sink shared by all enclaves of a deployment.
class AuditLog {
public:
    void append(AuditRecord record);
    [[nodiscard]] std::vector<AuditRecord> records() const;
    [[nodiscard]] std::size_t size() const;
    void write(std::ostream& os) const;

private:
    mutable std::mutex mu_;
    std::vector<AuditRecord> records_;
};

/// Per-enclave writer: assigns contiguous sequence numbers from 1 and links records.
class AuditChain {
public:
    AuditChain(std::string enclave_id, const crypto::SigningKey& key, AuditLog* sink)
        : enclave_id_(std::move(enclave_id)), key_(&key), sink_(sink) {}

    const AuditRecord& append(std::string event, const crypto::Digest& plan_hash,
                              std::string detail = {});

    [[nodiscard]] std::uint64_t last_seq() const { return last_.seq; }
    [[nodiscard]] const AuditRecord& last() const { return last_; }

private:
    std::string enclave_id_;
    const crypto::SigningKey* key_;
    AuditLog* sink_;
    AuditRecord last_;
};

struct AuditVerdict {
    bool ok = true;
    std::size_t records = 0;
    std::optional<std::size_t> bad_line;  // 1-based
    std::optional<std::uint64_t> bad_seq;
    std::string reason;
};

/// Re-verifies every signature, per-enclave sequence contiguity and hash links.
/// Stops at the first bad record.
AuditVerdict verify_audit_log(std::istream& in, const crypto::PublicKey& hw_key);

}  // namespace pkus

#endif  // PKUS_AUDIT_HPP
