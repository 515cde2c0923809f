#include "pkus/adapter.hpp"

#include <cmath>

namespace pkus {

namespace {

constexpr std::array<std::string_view, kProjectionsPerLayer> kProjectionNames = {
    "attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down"};

// Upper bound on a single matrix dimension accepted from the wire.
constexpr std::uint32_t kMaxDim = 1u << 16;

void write_matrix(ByteWriter& w, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        w.f64(m.data()[i]);
    }
}

Mat read_matrix(ByteReader& r, std::uint32_t rows, std::uint32_t cols) {
    const auto count = static_cast<std::size_t>(rows) * cols;
    if (r.remaining() / sizeof(double) < count) {
        throw DecodeError(DecodeErrorKind::Truncated, "adapter matrix truncated");
    }
    Mat m(rows, cols);
    for (std::size_t i = 0; i < count; ++i) {
        m.data()[i] = r.f64();
    }
    return m;
}

}  // namespace

std::string_view projection_name(Projection p) {
    return kProjectionNames.at(static_cast<std::size_t>(p));
}

std::optional<Projection> parse_projection(std::string_view name) {
    for (std::size_t i = 0; i < kProjectionNames.size(); ++i) {
        if (kProjectionNames[i] == name) {
            return static_cast<Projection>(i);
        }
    }
    return std::nullopt;
}

SiteId SiteId::from_ordinal(std::size_t ordinal) {
    return {static_cast<std::uint32_t>(ordinal / kProjectionsPerLayer),
            static_cast<Projection>(ordinal % kProjectionsPerLayer)};
}

std::string to_string(const SiteId& s) {
    return std::to_string(s.layer) + "." + std::string(projection_name(s.projection));
}

LowRankAdapter::LowRankAdapter(Mat a, Mat b, double alpha)
    : a_(std::move(a)), b_(std::move(b)), alpha_(alpha) {
    if (a_.cols() < 1 || a_.cols() != b_.rows()) {
        throw ContractViolation("adapter: a.cols must equal b.rows and be >= 1");
    }
    if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) {
        throw ContractViolation("adapter: alpha must be positive and finite");
    }
    if (!all_finite(a_) || !all_finite(b_)) {
        throw ContractViolation("adapter: non-finite factor entries");
    }
}

LowRankAdapter LowRankAdapter::zeros(Eigen::Index d_out, Eigen::Index d_in, Eigen::Index rank,
                                     double alpha) {
    return {Mat::Zero(d_out, rank), Mat::Zero(rank, d_in), alpha};
}

void LowRankAdapter::step(const Mat& grad_a, const Mat& grad_b, double lr) {
    if (grad_a.rows() != a_.rows() || grad_a.cols() != a_.cols() ||
        grad_b.rows() != b_.rows() || grad_b.cols() != b_.cols()) {
        throw ContractViolation("adapter step: gradient shape mismatch");
    }
    a_ -= lr * grad_a;
    b_ -= lr * grad_b;
}

bool LowRankAdapter::operator==(const LowRankAdapter& other) const {
    return alpha_ == other.alpha_ && a_.rows() == other.a_.rows() &&
           a_.cols() == other.a_.cols() && b_.cols() == other.b_.cols() && a_ == other.a_ &&
           b_ == other.b_;
}

void ProviderAdapterSet::insert(SiteId site, LowRankAdapter adapter, bool active) {
    entries_.insert_or_assign(site, Entry{std::move(adapter), active});
}

const ProviderAdapterSet::Entry& ProviderAdapterSet::at(SiteId site) const {
    auto it = entries_.find(site);
    if (it == entries_.end()) {
        throw ContractViolation("no adapter at site " + to_string(site));
    }
    return it->second;
}

ProviderAdapterSet::Entry& ProviderAdapterSet::at(SiteId site) {
    auto it = entries_.find(site);
    if (it == entries_.end()) {
        throw ContractViolation("no adapter at site " + to_string(site));
    }
    return it->second;
}

void ProviderAdapterSet::set_active(SiteId site, bool active) { at(site).active = active; }

std::vector<SiteId> ProviderAdapterSet::active_sites() const {
    std::vector<SiteId> out;
    for (const auto& [site, entry] : entries_) {
        if (entry.active) {
            out.push_back(site);
        }
    }
    return out;
}

std::size_t ProviderAdapterSet::inactive_count() const {
    std::size_t n = 0;
    for (const auto& [site, entry] : entries_) {
        n += entry.active ? 0 : 1;
    }
    return n;
}

void ProviderAdapterSet::check_compatible(std::uint32_t layers, Eigen::Index hidden_dim) const {
    for (const auto& [site, entry] : entries_) {
        if (site.layer >= layers) {
            throw ContractViolation("adapter at " + to_string(site) + " beyond backbone depth");
        }
        if (entry.adapter.d_out() != hidden_dim || entry.adapter.d_in() != hidden_dim) {
            throw ContractViolation("adapter at " + to_string(site) +
                                    " does not match hidden dim " + std::to_string(hidden_dim));
        }
    }
}

std::vector<SiteId> active_sites(const ProviderAdapterSet& set) { return set.active_sites(); }

Bytes serialize_adapter_set(const ProviderAdapterSet& set) {
    ByteWriter w;
    w.raw(kAdapterMagic);
    w.u16(kAdapterFormatVersion);
    w.str(set.base_model_id());
    w.str(set.provider_id());
    w.u32(static_cast<std::uint32_t>(set.size()));
    for (const auto& [site, entry] : set.entries()) {
        const auto& ad = entry.adapter;
        w.u32(site.layer);
        w.u8(static_cast<std::uint8_t>(site.projection));
        w.u8(entry.active ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(ad.rank()));
        w.u32(static_cast<std::uint32_t>(ad.d_out()));
        w.u32(static_cast<std::uint32_t>(ad.d_in()));
        w.f64(ad.alpha());
        write_matrix(w, ad.a());
        write_matrix(w, ad.b());
    }
    return std::move(w).take();
}

ProviderAdapterSet deserialize_adapter_set(ByteView bytes) {
    ByteReader r(bytes);
    try {
        auto magic = r.raw(kAdapterMagic.size());
        if (!std::equal(magic.begin(), magic.end(), kAdapterMagic.begin())) {
            throw DecodeError(DecodeErrorKind::BadMagic, "bad adapter magic");
        }
        auto version = r.u16();
        if (version != kAdapterFormatVersion) {
            throw DecodeError(DecodeErrorKind::UnsupportedVersion,
                              "unsupported adapter format version " + std::to_string(version));
        }
        auto base_model_id = r.str();
        auto provider_id = r.str();
        ProviderAdapterSet set(std::move(provider_id), std::move(base_model_id));
        auto count = r.u32();
        for (std::uint32_t i = 0; i < count; ++i) {
            SiteId site;
            site.layer = r.u32();
            auto proj = r.u8();
            if (proj >= kProjectionsPerLayer) {
                throw DecodeError(DecodeErrorKind::InvalidValue,
                                  "unknown projection " + std::to_string(proj));
            }
            site.projection = static_cast<Projection>(proj);
            auto active = r.u8();
            if (active > 1) {
                throw DecodeError(DecodeErrorKind::InvalidValue, "active flag out of range");
            }
            auto rank = r.u32();
            auto d_out = r.u32();
            auto d_in = r.u32();
            if (rank == 0 || d_out == 0 || d_in == 0 || rank > kMaxDim || d_out > kMaxDim ||
                d_in > kMaxDim) {
                throw DecodeError(DecodeErrorKind::DimensionInconsistency,
                                  "invalid adapter dims at " + to_string(site));
            }
            if (set.contains(site)) {
                throw DecodeError(DecodeErrorKind::DimensionInconsistency,
                                  "duplicate site " + to_string(site));
            }
            auto alpha = r.f64();
            auto a = read_matrix(r, d_out, rank);
            auto b = read_matrix(r, rank, d_in);
            if (!(alpha > 0.0) || !std::isfinite(alpha) || !all_finite(a) || !all_finite(b)) {
                throw DecodeError(DecodeErrorKind::InvalidValue,
                                  "non-finite or non-positive values at " + to_string(site));
            }
            set.insert(site, LowRankAdapter(std::move(a), std::move(b), alpha), active == 1);
        }
        if (!r.done()) {
            throw DecodeError(DecodeErrorKind::InvalidValue, "trailing bytes after adapter entries");
        }
        return set;
    } catch (const TruncatedInput& e) {
        throw DecodeError(DecodeErrorKind::Truncated, e.what());
    }
}

Mat merge_to_dense(const LowRankAdapter& adapter, const Mat& base) {
    if (base.rows() != adapter.d_out() || base.cols() != adapter.d_in()) {
        throw ContractViolation("merge_to_dense: base shape does not match adapter");
    }
    return base + adapter.dense_update();
}

}  // namespace pkus
