#include "pkus/crypto.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/kdf.h>
#include <openssl/params.h>

#include <memory>

namespace pkus::crypto {

namespace {

struct PkeyDeleter {
    void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); }
};
struct PkeyCtxDeleter {
    void operator()(EVP_PKEY_CTX* p) const { EVP_PKEY_CTX_free(p); }
};
struct CipherCtxDeleter {
    void operator()(EVP_CIPHER_CTX* p) const { EVP_CIPHER_CTX_free(p); }
};
struct KdfDeleter {
    void operator()(EVP_KDF* p) const { EVP_KDF_free(p); }
};
struct KdfCtxDeleter {
    void operator()(EVP_KDF_CTX* p) const { EVP_KDF_CTX_free(p); }
};

using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

void check(int rc, const char* what) {
    if (rc != 1) {
        throw CryptoError(what);
    }
}

PkeyPtr raw_private(int type, ByteView seed) {
    if (seed.size() != kKeySize) {
        throw CryptoError("private key seed must be 32 bytes");
    }
    PkeyPtr key(EVP_PKEY_new_raw_private_key(type, nullptr, seed.data(), seed.size()));
    if (!key) {
        throw CryptoError("EVP_PKEY_new_raw_private_key failed");
    }
    return key;
}

PublicKey raw_public(EVP_PKEY* key) {
    PublicKey out;
    std::size_t len = out.bytes.size();
    check(EVP_PKEY_get_raw_public_key(key, out.bytes.data(), &len), "get raw public key");
    if (len != out.bytes.size()) {
        throw CryptoError("unexpected public key length");
    }
    return out;
}

}  // namespace

Digest sha256(ByteView data) { return sha256({data}); }

Digest sha256(std::initializer_list<ByteView> parts) {
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
    check(ctx ? 1 : 0, "EVP_MD_CTX_new");
    check(EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr), "sha256 init");
    for (auto part : parts) {
        check(EVP_DigestUpdate(ctx.get(), part.data(), part.size()), "sha256 update");
    }
    Digest out{};
    unsigned int len = 0;
    check(EVP_DigestFinal_ex(ctx.get(), out.data(), &len), "sha256 final");
    return out;
}

SigningKey SigningKey::from_seed(ByteView seed32) {
    auto pkey = raw_private(EVP_PKEY_ED25519, seed32);
    SigningKey key;
    std::copy(seed32.begin(), seed32.end(), key.seed_.begin());
    key.public_ = raw_public(pkey.get());
    return key;
}

SigningKey::~SigningKey() { secure_zero(seed_); }

Signature SigningKey::sign(ByteView message) const {
    auto pkey = raw_private(EVP_PKEY_ED25519, seed_);
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
    check(ctx ? 1 : 0, "EVP_MD_CTX_new");
    check(EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, pkey.get()), "sign init");
    Signature sig{};
    std::size_t len = sig.size();
    check(EVP_DigestSign(ctx.get(), sig.data(), &len, message.data(), message.size()), "sign");
    return sig;
}

bool verify(const PublicKey& key, ByteView message, const Signature& signature) {
    PkeyPtr pkey(EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, key.bytes.data(),
                                             key.bytes.size()));
    if (!pkey) {
        return false;
    }
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
    if (!ctx || EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, pkey.get()) != 1) {
        return false;
    }
    return EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), message.data(),
                            message.size()) == 1;
}

KeyAgreement KeyAgreement::from_seed(ByteView seed32) {
    auto pkey = raw_private(EVP_PKEY_X25519, seed32);
    KeyAgreement out;
    std::copy(seed32.begin(), seed32.end(), out.secret_.begin());
    out.public_ = raw_public(pkey.get());
    return out;
}

KeyAgreement::~KeyAgreement() { secure_zero(secret_); }

SymmetricKey KeyAgreement::shared_secret(const PublicKey& peer) const {
    auto own = raw_private(EVP_PKEY_X25519, secret_);
    PkeyPtr theirs(EVP_PKEY_new_raw_public_key(EVP_PKEY_X25519, nullptr, peer.bytes.data(),
                                               peer.bytes.size()));
    if (!theirs) {
        throw CryptoError("invalid X25519 peer key");
    }
    std::unique_ptr<EVP_PKEY_CTX, PkeyCtxDeleter> ctx(EVP_PKEY_CTX_new(own.get(), nullptr));
    check(ctx ? 1 : 0, "EVP_PKEY_CTX_new");
    check(EVP_PKEY_derive_init(ctx.get()), "derive init");
    check(EVP_PKEY_derive_set_peer(ctx.get(), theirs.get()), "derive set peer");
    SymmetricKey out{};
    std::size_t len = out.size();
    check(EVP_PKEY_derive(ctx.get(), out.data(), &len), "X25519 derive");
    SymmetricKey zero{};
    if (len != out.size() || constant_time_equal(out, zero)) {
        throw CryptoError("degenerate X25519 shared secret");
    }
    return out;
}

SymmetricKey hkdf_sha256(ByteView ikm, ByteView salt, ByteView info) {
    std::unique_ptr<EVP_KDF, KdfDeleter> kdf(EVP_KDF_fetch(nullptr, "HKDF", nullptr));
    check(kdf ? 1 : 0, "EVP_KDF_fetch HKDF");
    std::unique_ptr<EVP_KDF_CTX, KdfCtxDeleter> ctx(EVP_KDF_CTX_new(kdf.get()));
    check(ctx ? 1 : 0, "EVP_KDF_CTX_new");
    char digest[] = "SHA256";
    // OpenSSL rejects empty salts/info only when given null pointers with length 0 on some
    // builds, so point at a dummy byte when the span is empty.
    static const std::uint8_t kEmpty = 0;
    auto ptr = [](ByteView v) { return const_cast<std::uint8_t*>(v.empty() ? &kEmpty : v.data()); };
    OSSL_PARAM params[] = {
        OSSL_PARAM_construct_utf8_string("digest", digest, 0),
        OSSL_PARAM_construct_octet_string("key", ptr(ikm), ikm.size()),
        OSSL_PARAM_construct_octet_string("salt", ptr(salt), salt.size()),
        OSSL_PARAM_construct_octet_string("info", ptr(info), info.size()),
        OSSL_PARAM_construct_end(),
    };
    SymmetricKey out{};
    check(EVP_KDF_derive(ctx.get(), out.data(), out.size(), params), "HKDF derive");
    return out;
}

Bytes aead_seal(const SymmetricKey& key, const GcmNonce& nonce, ByteView plaintext, ByteView aad) {
    std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter> ctx(EVP_CIPHER_CTX_new());
    check(ctx ? 1 : 0, "EVP_CIPHER_CTX_new");
    check(EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr), "gcm init");
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kGcmNonceSize, nullptr), "ivlen");
    check(EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()), "gcm key");
    int len = 0;
    if (!aad.empty()) {
        check(EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())),
              "gcm aad");
    }
    Bytes out(plaintext.size() + kGcmTagSize);
    int written = 0;
    if (!plaintext.empty()) {
        check(EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(),
                                static_cast<int>(plaintext.size())),
              "gcm encrypt");
        written = len;
    }
    check(EVP_EncryptFinal_ex(ctx.get(), out.data() + written, &len), "gcm final");
    written += len;
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, kGcmTagSize, out.data() + written),
          "gcm tag");
    out.resize(static_cast<std::size_t>(written) + kGcmTagSize);
    return out;
}

std::optional<Bytes> aead_open(const SymmetricKey& key, const GcmNonce& nonce,
                               ByteView ciphertext_and_tag, ByteView aad) {
    if (ciphertext_and_tag.size() < kGcmTagSize) {
        return std::nullopt;
    }
    const auto ct = ciphertext_and_tag.first(ciphertext_and_tag.size() - kGcmTagSize);
    const auto tag = ciphertext_and_tag.last(kGcmTagSize);
    std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter> ctx(EVP_CIPHER_CTX_new());
    check(ctx ? 1 : 0, "EVP_CIPHER_CTX_new");
    check(EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr), "gcm init");
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, kGcmNonceSize, nullptr), "ivlen");
    check(EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()), "gcm key");
    int len = 0;
    if (!aad.empty()) {
        check(EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), static_cast<int>(aad.size())),
              "gcm aad");
    }
    Bytes out(ct.size());
    int written = 0;
    if (!ct.empty()) {
        check(EVP_DecryptUpdate(ctx.get(), out.data(), &len, ct.data(), static_cast<int>(ct.size())),
              "gcm decrypt");
        written = len;
    }
    std::array<std::uint8_t, kGcmTagSize> tag_copy{};
    std::copy(tag.begin(), tag.end(), tag_copy.begin());
    check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, kGcmTagSize, tag_copy.data()),
          "gcm set tag");
    if (EVP_DecryptFinal_ex(ctx.get(), out.data() + written, &len) != 1) {
        secure_zero(out.data(), out.size());
        return std::nullopt;
    }
    out.resize(static_cast<std::size_t>(written + len));
    return out;
}

Mac hmac_sha256(const SymmetricKey& key, ByteView data) {
    Mac out{};
    unsigned int len = 0;
    if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
              out.data(), &len) ||
        len != out.size()) {
        throw CryptoError("HMAC-SHA256 failed");
    }
    return out;
}

bool constant_time_equal(ByteView a, ByteView b) {
    return a.size() == b.size() && CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

void secure_zero(void* data, std::size_t size) {
    if (size > 0) {
        OPENSSL_cleanse(data, size);
    }
}

DeterministicStream::DeterministicStream(std::uint64_t seed, std::string_view label) {
    ByteWriter w;
    w.u64(seed);
    w.str(label);
    prefix_ = std::move(w).take();
}

void DeterministicStream::fill(std::span<std::uint8_t> out) {
    std::size_t pos = 0;
    while (pos < out.size()) {
        ByteWriter ctr;
        ctr.u64(counter_++);
        auto block = sha256({prefix_, ctr.bytes()});
        const auto n = std::min(block.size(), out.size() - pos);
        std::copy_n(block.begin(), n, out.begin() + static_cast<std::ptrdiff_t>(pos));
        pos += n;
    }
}

}  // namespace pkus::crypto
