#include "pkus/alignagg.hpp"

#include <algorithm>

namespace pkus {

Vec aggregate_site(std::span<const Vec> deltas, Eigen::Index dim) {
    if (deltas.empty()) {
        return Vec::Zero(dim);
    }
    std::vector<const Vec*> order;
    order.reserve(deltas.size());
    for (const auto& d : deltas) {
        if (d.size() != dim) {
            throw ContractViolation("aggregate_site: delta dim " + std::to_string(d.size()) +
                                    " != " + std::to_string(dim));
        }
        order.push_back(&d);
    }
    std::sort(order.begin(), order.end(), [](const Vec* l, const Vec* r) {
        return std::lexicographical_compare(l->data(), l->data() + l->size(), r->data(),
                                            r->data() + r->size());
    });
    Vec sum = Vec::Zero(dim);
    for (const Vec* d : order) {
        sum += *d;
    }
    return sum / static_cast<double>(deltas.size());
}

void ContributorSet::add_provider(const std::string& provider_id,
                                  const std::vector<SiteId>& active_sites) {
    auto sites = active_sites;
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
    declared_[provider_id] = std::move(sites);
    providers_.insert(provider_id);
    rebuild_cache();
}

void ContributorSet::revoke_provider(const std::string& provider_id) {
    if (providers_.erase(provider_id) > 0) {
        rebuild_cache();
    }
}

bool ContributorSet::authorize_provider(const std::string& provider_id) {
    if (!declared_.contains(provider_id)) {
        return false;
    }
    providers_.insert(provider_id);
    rebuild_cache();
    return true;
}

std::vector<std::string> ContributorSet::contributors(SiteId site) const {
    auto it = cache_.find(site);
    return it == cache_.end() ? std::vector<std::string>{} : it->second;
}

std::vector<SiteId> ContributorSet::provider_sites(const std::string& provider_id,
                                                   std::uint32_t layer) const {
    std::vector<SiteId> out;
    if (!providers_.contains(provider_id)) {
        return out;
    }
    for (const auto& s : declared_.at(provider_id)) {
        if (s.layer == layer) {
            out.push_back(s);
        }
    }
    return out;
}

bool ContributorSet::consistent() const {
    for (const auto& [site, ks] : cache_) {
        for (const auto& k : ks) {
            if (!providers_.contains(k)) return false;
            const auto& d = declared_.at(k);
            if (!std::binary_search(d.begin(), d.end(), site)) return false;
        }
    }
    for (const auto& k : providers_) {
        for (const auto& s : declared_.at(k)) {
            auto it = cache_.find(s);
            if (it == cache_.end() || std::find(it->second.begin(), it->second.end(), k) == it->second.end()) {
                return false;
            }
        }
    }
    return true;
}

void ContributorSet::rebuild_cache() {
    cache_.clear();
    for (const auto& k : providers_) {
        for (const auto& s : declared_.at(k)) {
            cache_[s].push_back(k);
        }
    }
}

}  // namespace pkus
