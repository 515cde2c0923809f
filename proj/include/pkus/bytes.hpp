#ifndef PKUS_BYTES_HPP
#define PKUS_BYTES_HPP

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pkus {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

static_assert(std::endian::native == std::endian::little,
              "wire codecs assume a little-endian host");

/// Raised by ByteReader when a payload ends before a field does.
class TruncatedInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Little-endian append-only writer.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }

    void raw(ByteView bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }

    void blob(ByteView bytes) {
        u32(static_cast<std::uint32_t>(bytes.size()));
        raw(bytes);
    }

    [[nodiscard]] const Bytes& bytes() const& { return buf_; }
    [[nodiscard]] Bytes take() && { return std::move(buf_); }
    [[nodiscard]] std::size_t size() const { return buf_.size(); }

private:
    template <typename T>
    void put(T v) {
        std::array<std::uint8_t, sizeof(T)> tmp{};
        std::memcpy(tmp.data(), &v, sizeof(T));
        buf_.insert(buf_.end(), tmp.begin(), tmp.end());
    }

    Bytes buf_;
};

/// Bounds-checked little-endian reader over a borrowed buffer.
class ByteReader {
public:
    explicit ByteReader(ByteView data) : data_(data) {}

    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

    ByteView raw(std::size_t n) {
        need(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    std::string str() {
        auto n = u32();
        auto view = raw(n);
        return {view.begin(), view.end()};
    }

    Bytes blob() {
        auto n = u32();
        auto view = raw(n);
        return {view.begin(), view.end()};
    }

    [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
    [[nodiscard]] std::size_t position() const { return pos_; }
    [[nodiscard]] bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw TruncatedInput("need " + std::to_string(n) + " bytes at offset " +
                                 std::to_string(pos_) + ", have " +
                                 std::to_string(data_.size() - pos_));
        }
    }

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    ByteView data_;
    std::size_t pos_ = 0;
};

inline Bytes to_bytes(std::string_view s) { return {s.begin(), s.end()}; }

std::string to_hex(ByteView bytes);
Bytes from_hex(std::string_view hex);

}  // namespace pkus

#endif  // PKUS_BYTES_HPP
