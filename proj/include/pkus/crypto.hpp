#ifndef PKUS_CRYPTO_HPP
#define PKUS_CRYPTO_HPP

#include "pkus/bytes.hpp"

#include <array>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string_view>

namespace pkus::crypto {

inline constexpr std::size_t kDigestSize = 32;
inline constexpr std::size_t kKeySize = 32;
inline constexpr std::size_t kSignatureSize = 64;
inline constexpr std::size_t kGcmNonceSize = 12;
inline constexpr std::size_t kGcmTagSize = 16;
inline constexpr std::size_t kMacSize = 32;

using Digest = std::array<std::uint8_t, kDigestSize>;
using Signature = std::array<std::uint8_t, kSignatureSize>;
using SymmetricKey = std::array<std::uint8_t, kKeySize>;
using GcmNonce = std::array<std::uint8_t, kGcmNonceSize>;
using Mac = std::array<std::uint8_t, kMacSize>;

class CryptoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

Digest sha256(ByteView data);
/// Digest of the concatenation of parts.
Digest sha256(std::initializer_list<ByteView> parts);

struct PublicKey {
    std::array<std::uint8_t, kKeySize> bytes{};
    bool operator==(const PublicKey&) const = default;
};

/// Ed25519 signing key. Wiped on destruction.
class SigningKey {
public:
    static SigningKey from_seed(ByteView seed32);

    SigningKey(const SigningKey&) = default;
    SigningKey& operator=(const SigningKey&) = default;
    ~SigningKey();

    [[nodiscard]] const PublicKey& public_key() const { return public_; }
    [[nodiscard]] Signature sign(ByteView message) const;

private:
    SigningKey() = default;
    std::array<std::uint8_t, kKeySize> seed_{};
    PublicKey public_;
};

bool verify(const PublicKey& key, ByteView message, const Signature& signature);

/// X25519 key agreement keypair. Wiped on destruction.
class KeyAgreement {
public:
    static KeyAgreement from_seed(ByteView seed32);

    KeyAgreement(const KeyAgreement&) = default;
    KeyAgreement& operator=(const KeyAgreement&) = default;
    ~KeyAgreement();

    [[nodiscard]] const PublicKey& public_key() const { return public_; }
    /// Throws CryptoError for low-order peer keys (all-zero shared secret).
    [[nodiscard]] SymmetricKey shared_secret(const PublicKey& peer) const;

private:
    KeyAgreement() = default;
    std::array<std::uint8_t, kKeySize> secret_{};
    PublicKey public_;
};

/// HKDF-SHA256 extract-then-expand producing 32 bytes.
SymmetricKey hkdf_sha256(ByteView ikm, ByteView salt, ByteView info);

/// AES-256-GCM; returns ciphertext || tag.
Bytes aead_seal(const SymmetricKey& key, const GcmNonce& nonce, ByteView plaintext, ByteView aad);
/// Empty optional when the tag does not verify.
std::optional<Bytes> aead_open(const SymmetricKey& key, const GcmNonce& nonce,
                               ByteView ciphertext_and_tag, ByteView aad);

Mac hmac_sha256(const SymmetricKey& key, ByteView data);

bool constant_time_equal(ByteView a, ByteView b);

/// Zeroing that the optimizer may not elide.
void secure_zero(void* data, std::size_t size);

template <typename T, std::size_t N>
void secure_zero(std::array<T, N>& a) {
    secure_zero(a.data(), sizeof(T) * N);
}

/// Deterministic byte stream: block i = SHA-256(seed || label || i). Used for
/// scenario-derived keys and nonces so runs are reproducible.
class DeterministicStream {
public:
    DeterministicStream(std::uint64_t seed, std::string_view label);

    void fill(std::span<std::uint8_t> out);

    template <std::size_t N>
    std::array<std::uint8_t, N> take() {
        std::array<std::uint8_t, N> out{};
        fill(out);
        return out;
    }

private:
    Bytes prefix_;
    std::uint64_t counter_ = 0;
};

}  // namespace pkus::crypto

#endif  // PKUS_CRYPTO_HPP
