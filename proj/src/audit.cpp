#include "pkus/audit.hpp"

#include <json.hpp>

#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

namespace pkus {

namespace {

constexpr std::string_view kAuditDomain = "PKUS-AUDIT-v1";

template <std::size_t N>
std::array<std::uint8_t, N> fixed_from_hex(const std::string& hex, const char* field) {
    Bytes raw = from_hex(hex);
    if (raw.size() != N) {
        throw std::invalid_argument(std::string("audit field '") + field + "' has wrong length");
    }
    std::array<std::uint8_t, N> out{};
    std::copy(raw.begin(), raw.end(), out.begin());
    return out;
}

}  // namespace

Bytes AuditRecord::signing_bytes() const {
    ByteWriter w;
    w.str(kAuditDomain);
    w.u64(seq);
    w.str(enclave_id);
    w.str(event);
    w.raw(plan_hash);
    w.raw(prev);
    w.str(detail);
    return std::move(w).take();
}

crypto::Digest AuditRecord::link_hash() const {
    return crypto::sha256({signing_bytes(), signature});
}

std::string AuditRecord::to_json_line() const {
    nlohmann::ordered_json j;
    j["seq"] = seq;
    j["enclave_id"] = enclave_id;
    j["event"] = event;
    j["plan_hash"] = to_hex(plan_hash);
    j["prev"] = to_hex(prev);
    j["detail"] = detail;
    j["signature"] = to_hex(signature);
    return j.dump();
}

AuditRecord AuditRecord::from_json_line(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
        AuditRecord r;
        r.seq = j.at("seq").get<std::uint64_t>();
        r.enclave_id = j.at("enclave_id").get<std::string>();
        r.event = j.at("event").get<std::string>();
        r.plan_hash = fixed_from_hex<crypto::kDigestSize>(j.at("plan_hash").get<std::string>(), "plan_hash");
        r.prev = fixed_from_hex<crypto::kDigestSize>(j.at("prev").get<std::string>(), "prev");
        r.detail = j.at("detail").get<std::string>();
        r.signature =
            fixed_from_hex<crypto::kSignatureSize>(j.at("signature").get<std::string>(), "signature");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed audit record: ") + e.what());
    }
}

void AuditLog::append(AuditRecord record) {
    std::lock_guard lock(mu_);
    records_.push_back(std::move(record));
}

std::vector<AuditRecord> AuditLog::records() const {
    std::lock_guard lock(mu_);
    return records_;
}

std::size_t AuditLog::size() const {
    std::lock_guard lock(mu_);
    return records_.size();
}

void AuditLog::write(std::ostream& os) const {
    std::lock_guard lock(mu_);
    for (const auto& r : records_) {
        os << r.to_json_line() << '\n';
    }
}

const AuditRecord& AuditChain::append(std::string event, const crypto::Digest& plan_hash,
                                      std::string detail) {
    AuditRecord r;
    r.seq = last_.seq + 1;
    r.enclave_id = enclave_id_;
    r.event = std::move(event);
    r.plan_hash = plan_hash;
    r.prev = last_.seq == 0 ? crypto::Digest{} : last_.link_hash();
    r.detail = std::move(detail);
    r.signature = key_->sign(r.signing_bytes());
    last_ = r;
    if (sink_) {
        sink_->append(std::move(r));
    }
    return last_;
}

AuditVerdict verify_audit_log(std::istream& in, const crypto::PublicKey& hw_key) {
    AuditVerdict verdict;
    std::map<std::string, AuditRecord> heads;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](std::string reason, std::optional<std::uint64_t> seq) {
        verdict.ok = false;
        verdict.bad_line = line_no;
        verdict.bad_seq = seq;
        verdict.reason = std::move(reason);
        return verdict;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        AuditRecord r;
        try {
            r = AuditRecord::from_json_line(line);
        } catch (const std::exception& e) {
            return fail(e.what(), std::nullopt);
        }
        if (!crypto::verify(hw_key, r.signing_bytes(), r.signature)) {
            return fail("signature does not verify", r.seq);
        }
        auto it = heads.find(r.enclave_id);
        const std::uint64_t expected_seq = it == heads.end() ? 1 : it->second.seq + 1;
        if (r.seq != expected_seq) {
            return fail("sequence gap: expected " + std::to_string(expected_seq), r.seq);
        }
        const crypto::Digest expected_prev = it == heads.end() ? crypto::Digest{} : it->second.link_hash();
        if (r.prev != expected_prev) {
            return fail("broken hash link", r.seq);
        }
        heads[r.enclave_id] = std::move(r);
        ++verdict.records;
    }
    return verdict;
}

}  // namespace pkus
