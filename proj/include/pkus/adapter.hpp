#ifndef PKUS_ADAPTER_HPP
#define PKUS_ADAPTER_HPP

#include "pkus/bytes.hpp"
#include "pkus/linalg.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pkus {

enum class Projection : std::uint8_t { AttnQ = 0, AttnK, AttnV, AttnO, FfnUp, FfnDown };

inline constexpr std::size_t kProjectionsPerLayer = 6;
inline constexpr std::array<Projection, kProjectionsPerLayer> kAllProjections = {
    Projection::AttnQ, Projection::AttnK, Projection::AttnV,
    Projection::AttnO, Projection::FfnUp, Projection::FfnDown};

std::string_view projection_name(Projection p);
std::optional<Projection> parse_projection(std::string_view name);

/// An injection site: one linear projection of one backbone layer.
struct SiteId {
    std::uint32_t layer = 0;
    Projection projection = Projection::AttnQ;

    auto operator<=>(const SiteId&) const = default;

    /// Position in the global (layer, projection) order.
    [[nodiscard]] std::size_t ordinal() const {
        return layer * kProjectionsPerLayer + static_cast<std::size_t>(projection);
    }
    static SiteId from_ordinal(std::size_t ordinal);
};

std::string to_string(const SiteId& s);

/// Low-rank update scale * A * B with A: d_out x r and B: r x d_in.
class LowRankAdapter {
public:
    LowRankAdapter(Mat a, Mat b, double alpha);

    static LowRankAdapter zeros(Eigen::Index d_out, Eigen::Index d_in, Eigen::Index rank,
                                double alpha);

    [[nodiscard]] const Mat& a() const { return a_; }
    [[nodiscard]] const Mat& b() const { return b_; }
    [[nodiscard]] Eigen::Index rank() const { return a_.cols(); }
    [[nodiscard]] Eigen::Index d_out() const { return a_.rows(); }
    [[nodiscard]] Eigen::Index d_in() const { return b_.cols(); }
    [[nodiscard]] double alpha() const { return alpha_; }
    [[nodiscard]] double scale() const { return alpha_ / static_cast<double>(rank()); }

    [[nodiscard]] Vec delta(const Vec& x) const { return lowrank_delta(a_, b_, x, scale()); }

    /// Dense scale * A * B. Only used by oracles and importance scoring.
    [[nodiscard]] Mat dense_update() const { return scale() * (a_ * b_); }

    /// Gradient-descent step: A -= lr * grad_a, B -= lr * grad_b.
    void step(const Mat& grad_a, const Mat& grad_b, double lr);

    std::span<double> raw_a() { return {a_.data(), static_cast<std::size_t>(a_.size())}; }
    std::span<double> raw_b() { return {b_.data(), static_cast<std::size_t>(b_.size())}; }

    bool operator==(const LowRankAdapter& other) const;

private:
    Mat a_;
    Mat b_;
    double alpha_;
};

/// One provider's adapters keyed by site. Inactive entries are kept so pruning can revert.
class ProviderAdapterSet {
public:
    struct Entry {
        LowRankAdapter adapter;
        bool active = true;
        bool operator==(const Entry&) const = default;
    };

    ProviderAdapterSet() = default;
    ProviderAdapterSet(std::string provider_id, std::string base_model_id)
        : provider_id_(std::move(provider_id)), base_model_id_(std::move(base_model_id)) {}

    [[nodiscard]] const std::string& provider_id() const { return provider_id_; }
    [[nodiscard]] const std::string& base_model_id() const { return base_model_id_; }

    void insert(SiteId site, LowRankAdapter adapter, bool active = true);
    [[nodiscard]] bool contains(SiteId site) const { return entries_.contains(site); }
    [[nodiscard]] const Entry& at(SiteId site) const;
    Entry& at(SiteId site);
    void set_active(SiteId site, bool active);

    [[nodiscard]] const std::map<SiteId, Entry>& entries() const { return entries_; }
    std::map<SiteId, Entry>& mutable_entries() { return entries_; }
    [[nodiscard]] std::size_t size() const { return entries_.size(); }

    /// Sites whose active flag is set, in SiteId order.
    [[nodiscard]] std::vector<SiteId> active_sites() const;
    [[nodiscard]] std::size_t inactive_count() const;

    /// Throws ContractViolation unless every adapter is hidden_dim x hidden_dim and
    /// every layer index is below `layers`.
    void check_compatible(std::uint32_t layers, Eigen::Index hidden_dim) const;

    bool operator==(const ProviderAdapterSet&) const = default;

private:
    std::string provider_id_;
    std::string base_model_id_;
    std::map<SiteId, Entry> entries_;
};

std::vector<SiteId> active_sites(const ProviderAdapterSet& set);

// Adapter blob codec.

inline constexpr std::array<std::uint8_t, 4> kAdapterMagic = {'P', 'K', 'U', 'S'};
inline constexpr std::uint16_t kAdapterFormatVersion = 1;

enum class DecodeErrorKind { BadMagic, UnsupportedVersion, Truncated, DimensionInconsistency, InvalidValue };

class DecodeError : public std::runtime_error {
public:
    DecodeError(DecodeErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] DecodeErrorKind kind() const { return kind_; }

private:
    DecodeErrorKind kind_;
};

Bytes serialize_adapter_set(const ProviderAdapterSet& set);
ProviderAdapterSet deserialize_adapter_set(ByteView bytes);

/// base + scale * A * B.
Mat merge_to_dense(const LowRankAdapter& adapter, const Mat& base);

}  // namespace pkus

#endif  // PKUS_ADAPTER_HPP
