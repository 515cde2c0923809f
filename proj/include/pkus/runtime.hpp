#ifndef PKUS_RUNTIME_HPP
#define PKUS_RUNTIME_HPP

#include "pkus/adapter.hpp"
#include "pkus/aegis.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace pkus::runtime {

// Wire frame: u32 length (of everything after it) || u8 type || u64 session id || payload.
enum class FrameType : std::uint8_t { ActivationBatch = 1, DeltaBatch = 2, Denial = 3, Fault = 4 };

inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 8;
inline constexpr std::size_t kMaxBatchSites = 0xFFFF;

class FrameError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MacFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Frame {
    FrameType type = FrameType::Fault;
    std::uint64_t session_id = 0;
    Bytes payload;
};

Bytes encode_frame(FrameType type, std::uint64_t session_id, ByteView payload);
/// Throws FrameError on bad length, unknown type or truncation.
Frame decode_frame(ByteView bytes);

struct ActivationBatch {
    std::uint64_t request_id = 0;
    std::string client_id;
    std::vector<SiteId> sites;
    std::vector<Vec> activations;  // parallel to sites
};

struct DeltaBatch {
    std::uint64_t request_id = 0;
    std::vector<SiteId> sites;
    std::vector<Vec> deltas;  // parallel to sites
};

struct Denial {
    std::uint64_t request_id = 0;
    std::string reason;
};

struct Fault {
    std::uint64_t request_id = 0;
    std::string reason;
};

struct InvokeResult {
    std::variant<DeltaBatch, Denial> value;
    [[nodiscard]] bool allowed() const { return std::holds_alternative<DeltaBatch>(value); }
};

/// Throws ContractViolation unless the batch is non-empty, parallel, within one
/// layer, strictly increasing in SiteId, and all activations share one dimension.
void validate_batch(const std::vector<SiteId>& sites, const std::vector<Vec>& vectors);

Bytes seal_activation_batch(const ActivationBatch& batch, std::uint64_t session_id,
                            const aegis::SymmetricKey& traffic_key);
/// Throws MacFailure when the MAC or session id does not check, FrameError on malformed input.
ActivationBatch open_activation_batch(ByteView frame, std::uint64_t session_id,
                                      const aegis::SymmetricKey& traffic_key);

Bytes seal_delta_batch(const DeltaBatch& batch, std::uint64_t session_id,
                       const aegis::SymmetricKey& traffic_key);
Bytes seal_denial(const Denial& denial, std::uint64_t session_id,
                  const aegis::SymmetricKey& traffic_key);
/// Faults may be sent by enclaves that hold no key; their MAC is then all-zero.
Bytes encode_fault(const Fault& fault, std::uint64_t session_id,
                   const aegis::SymmetricKey* traffic_key);

using Response = std::variant<DeltaBatch, Denial, Fault>;

/// Host-side response check. DeltaBatch and Denial frames must carry a valid MAC.
Response open_response(ByteView frame, std::uint64_t session_id,
                       const aegis::SymmetricKey& traffic_key);

/// Output of an enclave worker for one submitted frame.
struct WorkerResponse {
    std::size_t enclave_index = 0;
    std::uint64_t request_id = 0;
    std::optional<Bytes> frame;  // nullopt: the enclave dropped the input
    double start_us = 0.0;
    double end_us = 0.0;
};

/// Multi-producer, single-consumer queue for worker responses.
class ResponseQueue {
public:
    void push(WorkerResponse r);
    std::optional<WorkerResponse> pop_for(std::chrono::milliseconds timeout);

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<WorkerResponse> items_;
};

/// One thread per enclave draining an ordered inbox. The enclave is touched only
/// by this thread while the worker is alive.
class EnclaveWorker {
public:
    using Clock = std::chrono::steady_clock;

    EnclaveWorker(aegis::Enclave& enclave, std::size_t index, ResponseQueue& out,
                  Clock::time_point epoch);
    EnclaveWorker(const EnclaveWorker&) = delete;
    EnclaveWorker& operator=(const EnclaveWorker&) = delete;
    ~EnclaveWorker();

    void submit(Bytes frame, std::uint64_t request_id, std::uint64_t now);

    /// Request ids in the order the enclave consumed them.
    [[nodiscard]] std::vector<std::uint64_t> consumed_order() const;

private:
    struct Item {
        Bytes frame;
        std::uint64_t request_id;
        std::uint64_t now;
    };

    void run();

    aegis::Enclave& enclave_;
    std::size_t index_;
    ResponseQueue& out_;
    Clock::time_point epoch_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Item> inbox_;
    std::vector<std::uint64_t> consumed_;
    bool stop_ = false;
    std::thread thread_;
};

}  // namespace pkus::runtime

#endif  // PKUS_RUNTIME_HPP
