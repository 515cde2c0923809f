#ifndef PKUS_ALIGNAGG_HPP
#define PKUS_ALIGNAGG_HPP

#include "pkus/adapter.hpp"
#include "pkus/linalg.hpp"

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace pkus {

/// Mean of the contributors' deltas, or the zero vector when nobody contributes.
/// Inputs are summed in lexicographic order so the result is bitwise independent
/// of contributor order.
Vec aggregate_site(std::span<const Vec> deltas, Eigen::Index dim);

/// Providers whose deltas a client's requests combine, with the per-site
/// contributor cache P_C(s).
class ContributorSet {
public:
    explicit ContributorSet(std::string client_id = {}) : client_id_(std::move(client_id)) {}

    [[nodiscard]] const std::string& client_id() const { return client_id_; }

    /// Registers a provider with its declared active sites and authorizes it.
    void add_provider(const std::string& provider_id, const std::vector<SiteId>& active_sites);
    /// Removes k from P_C and every P_C(s). Unknown ids are a no-op.
    void revoke_provider(const std::string& provider_id);
    /// Re-admits a previously registered provider. Returns false if it was never registered.
    bool authorize_provider(const std::string& provider_id);

    [[nodiscard]] const std::set<std::string>& providers() const { return providers_; }
    /// P_C(s), in provider-id order.
    [[nodiscard]] std::vector<std::string> contributors(SiteId site) const;
    /// Sites in `layer` where `provider_id` contributes, in SiteId order.
    [[nodiscard]] std::vector<SiteId> provider_sites(const std::string& provider_id,
                                                     std::uint32_t layer) const;

    /// Checks P_C(s) subset of P_C and cache consistency with declarations.
    [[nodiscard]] bool consistent() const;

private:
    void rebuild_cache();

    std::string client_id_;
    std::map<std::string, std::vector<SiteId>> declared_;
    std::set<std::string> providers_;
    std::map<SiteId, std::vector<std::string>> cache_;
};

}  // namespace pkus

#endif  // PKUS_ALIGNAGG_HPP
