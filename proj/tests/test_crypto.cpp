#include "pkus/crypto.hpp"

#include <gtest/gtest.h>

namespace pkus::crypto {
namespace {

template <std::size_t N>
std::array<std::uint8_t, N> hex_array(std::string_view hex) {
    const auto b = from_hex(hex);
    std::array<std::uint8_t, N> out{};
    EXPECT_EQ(b.size(), N);
    std::copy_n(b.begin(), std::min(N, b.size()), out.begin());
    return out;
}

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(to_hex(sha256(to_bytes("abc"))),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(to_hex(sha256(Bytes{})),
              "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Sha256, PartsHashTheConcatenation) {
    const auto a = to_bytes("ab"), c = to_bytes("c");
    EXPECT_EQ(sha256({a, c}), sha256(to_bytes("abc")));
}

// RFC 8032, test 1.
TEST(Ed25519, Rfc8032Vector) {
    const auto seed = from_hex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60");
    const auto key = SigningKey::from_seed(seed);
    EXPECT_EQ(to_hex(key.public_key().bytes),
              "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a");
    const auto sig = key.sign(Bytes{});
    EXPECT_EQ(to_hex(sig),
              "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b");
    EXPECT_TRUE(verify(key.public_key(), Bytes{}, sig));
}

TEST(Ed25519, RejectsMutatedSignatureMessageAndKey) {
    DeterministicStream s(3, "ed");
    const auto key = SigningKey::from_seed(s.take<32>());
    const auto other = SigningKey::from_seed(s.take<32>());
    const auto msg = to_bytes("policy plan");
    const auto sig = key.sign(msg);
    ASSERT_TRUE(verify(key.public_key(), msg, sig));
    for (std::size_t byte = 0; byte < sig.size(); byte += 7) {
        auto bad = sig;
        bad[byte] ^= 0x10;
        EXPECT_FALSE(verify(key.public_key(), msg, bad));
    }
    auto bad_msg = msg;
    bad_msg[0] ^= 1;
    EXPECT_FALSE(verify(key.public_key(), bad_msg, sig));
    EXPECT_FALSE(verify(other.public_key(), msg, sig));
}

TEST(Ed25519, SeedMustBe32Bytes) {
    EXPECT_THROW(SigningKey::from_seed(Bytes(31, 1)), CryptoError);
}

// RFC 7748 Diffie-Hellman test vector.
TEST(X25519, Rfc7748Vector) {
    const auto alice = KeyAgreement::from_seed(
        from_hex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a"));
    const auto bob = KeyAgreement::from_seed(
        from_hex("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb"));
    EXPECT_EQ(to_hex(alice.public_key().bytes),
              "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a");
    EXPECT_EQ(to_hex(bob.public_key().bytes),
              "de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f");
    const auto k1 = alice.shared_secret(bob.public_key());
    EXPECT_EQ(k1, bob.shared_secret(alice.public_key()));
    EXPECT_EQ(to_hex(k1), "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742");
}

TEST(X25519, LowOrderPeerIsRejected) {
    DeterministicStream s(4, "x");
    const auto k = KeyAgreement::from_seed(s.take<32>());
    EXPECT_THROW((void)k.shared_secret(PublicKey{}), CryptoError);
}

// RFC 5869, test case 1 (first 32 bytes of the 42-byte OKM).
TEST(Hkdf, Rfc5869Prefix) {
    const Bytes ikm(22, 0x0b);
    const auto salt = from_hex("000102030405060708090a0b0c");
    const auto info = from_hex("f0f1f2f3f4f5f6f7f8f9");
    EXPECT_EQ(to_hex(hkdf_sha256(ikm, salt, info)),
              "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf");
}

TEST(Hkdf, InfoSeparatesKeys) {
    const Bytes ikm(32, 7);
    EXPECT_NE(hkdf_sha256(ikm, {}, to_bytes("a")), hkdf_sha256(ikm, {}, to_bytes("b")));
}

// HMAC recomputed from its definition over SHA-256.
TEST(Hmac, MatchesDefinition) {
    DeterministicStream s(5, "hmac");
    for (int trial = 0; trial < 8; ++trial) {
        const auto key = s.take<32>();
        Bytes data(static_cast<std::size_t>(trial * 37), 0);
        s.fill(data);
        Bytes ipad(64, 0x36), opad(64, 0x5c);
        for (std::size_t i = 0; i < key.size(); ++i) {
            ipad[i] ^= key[i];
            opad[i] ^= key[i];
        }
        const auto inner = sha256({ipad, data});
        EXPECT_EQ(hmac_sha256(key, data), sha256({opad, inner}));
    }
}

// NIST GCM test cases 13 and 14 (AES-256, zero key and IV).
TEST(AesGcm, NistVectors) {
    const SymmetricKey key{};
    const GcmNonce nonce{};
    EXPECT_EQ(to_hex(aead_seal(key, nonce, {}, {})), "530f8afbc74536b9a963b4f1c4cb738b");
    EXPECT_EQ(to_hex(aead_seal(key, nonce, Bytes(16, 0), {})),
              "cea7403d4d606b6e074ec5d3baf39d18d0d1c8a799996bf0265b98b5d48ab919");
}

TEST(AesGcm, RoundTripAndEveryBitFlipRejected) {
    DeterministicStream s(6, "gcm");
    const auto key = s.take<32>();
    const auto nonce = s.take<12>();
    const auto pt = to_bytes("adapter payload");
    const auto aad = to_bytes("binding");
    const auto ct = aead_seal(key, nonce, pt, aad);
    ASSERT_EQ(ct.size(), pt.size() + kGcmTagSize);
    EXPECT_EQ(aead_open(key, nonce, ct, aad), pt);

    for (std::size_t bit = 0; bit < ct.size() * 8; ++bit) {
        auto bad = ct;
        bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        EXPECT_FALSE(aead_open(key, nonce, bad, aad).has_value()) << "ciphertext bit " << bit;
    }
    for (std::size_t bit = 0; bit < nonce.size() * 8; ++bit) {
        auto bad = nonce;
        bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        EXPECT_FALSE(aead_open(key, bad, ct, aad).has_value()) << "nonce bit " << bit;
    }
    for (std::size_t bit = 0; bit < aad.size() * 8; ++bit) {
        auto bad = aad;
        bad[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        EXPECT_FALSE(aead_open(key, nonce, ct, bad).has_value()) << "aad bit " << bit;
    }
    EXPECT_FALSE(aead_open(key, nonce, Bytes(5, 0), aad).has_value());
}

TEST(ConstantTimeEqual, ComparesLengthAndContent) {
    EXPECT_TRUE(constant_time_equal(to_bytes("abc"), to_bytes("abc")));
    EXPECT_FALSE(constant_time_equal(to_bytes("abc"), to_bytes("abd")));
    EXPECT_FALSE(constant_time_equal(to_bytes("abc"), to_bytes("ab")));
}

TEST(SecureZero, ClearsArray) {
    auto k = hex_array<4>("deadbeef");
    secure_zero(k);
    EXPECT_EQ(k, (std::array<std::uint8_t, 4>{}));
}

TEST(DeterministicStream, ReproducibleAndLabelled) {
    DeterministicStream a(9, "x"), b(9, "x"), c(9, "y"), d(10, "x");
    const auto first = a.take<48>();
    EXPECT_EQ(first, b.take<48>());
    EXPECT_NE(first, c.take<48>());
    EXPECT_NE(first, d.take<48>());
}

}  // namespace
}  // namespace pkus::crypto
