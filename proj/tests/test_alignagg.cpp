#include "pkus/alignagg.hpp"
#include "pkus/random.hpp"
#include "support/cluster.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>

namespace pkus {
namespace {

using namespace pkus::oracle;
using testing_support::Cluster;
using testing_support::ClusterSpec;
using testing_support::provider_name;
using testing_support::virtual_adapter_forward;
using testing_support::virtual_adapter_oracle;

Vec vec(std::initializer_list<double> v) {
    Vec out(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), out.data());
    return out;
}

TEST(AggregateSite, Examples) {
    EXPECT_TRUE(bitwise_equal(aggregate_site({}, 3), Vec::Zero(3)));
    const Vec d = vec({0.1, -2.5, 3e-7});
    const std::vector<Vec> one{d};
    EXPECT_TRUE(bitwise_equal(aggregate_site(one, 3), d));
    const std::vector<Vec> two{vec({1, 3}), vec({3, 5})};
    EXPECT_TRUE(bitwise_equal(aggregate_site(two, 2), vec({2, 4})));
}

TEST(AggregateSite, MixedDimensionsRejected) {
    const std::vector<Vec> mixed{Vec::Ones(2), Vec::Ones(3)};
    EXPECT_THROW(aggregate_site(mixed, 2), ContractViolation);
    const std::vector<Vec> wrong{Vec::Ones(3)};
    EXPECT_THROW(aggregate_site(wrong, 2), ContractViolation);
}

TEST(AggregateSite, MatchesMeanAndIgnoresOrder) {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.next_u64() % 6;
        std::vector<Vec> deltas;
        for (std::size_t i = 0; i < n; ++i) deltas.push_back(rng.normal_vector(7, 1e3));
        const Vec reference = aggregate_site(deltas, 7);

        std::vector<double> mean(7, 0.0);
        for (const auto& d : deltas) {
            for (Eigen::Index j = 0; j < 7; ++j) mean[static_cast<std::size_t>(j)] += d[j];
        }
        for (auto& m : mean) m /= static_cast<double>(n);
        EXPECT_LT(max_abs_diff(reference, mean), 1e-9);

        for (int shuffle = 0; shuffle < 5; ++shuffle) {
            std::shuffle(deltas.begin(), deltas.end(), rng.engine());
            EXPECT_TRUE(bitwise_equal(aggregate_site(deltas, 7), reference));
        }
    }
}

SiteId q(std::uint32_t layer) { return {layer, Projection::AttnQ}; }
SiteId v(std::uint32_t layer) { return {layer, Projection::AttnV}; }

TEST(ContributorSet, CacheFollowsDeclarations) {
    ContributorSet c("alice");
    c.add_provider("b", {v(0), q(0), q(1)});
    c.add_provider("a", {q(0)});
    EXPECT_EQ(c.contributors(q(0)), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(c.contributors(v(0)), std::vector<std::string>{"b"});
    EXPECT_TRUE(c.contributors(v(1)).empty());
    EXPECT_EQ(c.provider_sites("b", 0), (std::vector<SiteId>{q(0), v(0)}));
    EXPECT_TRUE(c.consistent());
}

TEST(ContributorSet, RevokeAndReauthorize) {
    ContributorSet c("alice");
    c.add_provider("a", {q(0)});
    c.add_provider("b", {q(0), v(0)});
    c.revoke_provider("b");
    EXPECT_FALSE(c.providers().contains("b"));
    EXPECT_EQ(c.contributors(q(0)), std::vector<std::string>{"a"});
    EXPECT_TRUE(c.contributors(v(0)).empty());
    EXPECT_TRUE(c.provider_sites("b", 0).empty());
    EXPECT_TRUE(c.consistent());

    c.revoke_provider("nobody");  // no-op
    EXPECT_EQ(c.providers().size(), 1u);
    EXPECT_FALSE(c.authorize_provider("nobody"));

    EXPECT_TRUE(c.authorize_provider("b"));
    EXPECT_EQ(c.contributors(v(0)), std::vector<std::string>{"b"});
    EXPECT_TRUE(c.consistent());
}

// Random add/revoke/authorize sequences never leave a site contributor outside the provider set.
TEST(ContributorSet, ConsistencyUnderRandomOperations) {
    Rng rng(22);
    ContributorSet c("alice");
    for (int step = 0; step < 300; ++step) {
        const auto id = "p" + std::to_string(rng.next_u64() % 5);
        switch (rng.next_u64() % 3) {
            case 0: {
                std::vector<SiteId> sites;
                for (std::size_t ord = 0; ord < 12; ++ord) {
                    if (rng.uniform() < 0.4) sites.push_back(SiteId::from_ordinal(ord));
                }
                c.add_provider(id, sites);
                break;
            }
            case 1: c.revoke_provider(id); break;
            default: c.authorize_provider(id); break;
        }
        ASSERT_TRUE(c.consistent());
        for (std::size_t ord = 0; ord < 12; ++ord) {
            for (const auto& k : c.contributors(SiteId::from_ordinal(ord))) {
                ASSERT_TRUE(c.providers().contains(k));
            }
        }
    }
}

// Oracle

TEST(VirtualAdapterOracle, OneAndTwoProviders) {
    const Backbone bb({1, 4, 3});
    auto s1 = random_adapter_set(bb, "a", "m", 2, 1);
    auto s2 = random_adapter_set(bb, "b", "m", 3, 2);
    const SiteId site{0, Projection::FfnUp};
    const Mat m1 = s1.at(site).adapter.dense_update();
    const Mat m2 = s2.at(site).adapter.dense_update();
    EXPECT_LT((virtual_adapter_oracle({&s1}, site, 4) - m1).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((virtual_adapter_oracle({&s1, &s2}, site, 4) - 0.5 * (m1 + m2)).cwiseAbs().maxCoeff(), 1e-12);
    s2.set_active(site, false);
    EXPECT_LT((virtual_adapter_oracle({&s1, &s2}, site, 4) - m1).cwiseAbs().maxCoeff(), 1e-12);
}

// Split path (enclave deltas aggregated on the host) against the oracle matrix.
TEST(VirtualAdapterOracle, SplitPathMatchesPerSite) {
    Cluster cl(ClusterSpec{});
    Rng rng(23);
    const auto sets = cl.authorized_sets();
    for (std::size_t ord = 0; ord < cl.backbone.site_count(); ++ord) {
        const auto site = SiteId::from_ordinal(ord);
        const Mat dense = virtual_adapter_oracle(sets, site, cl.backbone.hidden_dim());
        for (int trial = 0; trial < 3; ++trial) {
            const Vec x = rng.normal_vector(cl.backbone.hidden_dim());
            std::vector<Vec> deltas;
            for (const auto& k : cl.contributors.contributors(site)) {
                for (auto& p : cl.parties) {
                    if (p.owner.id() != k) continue;
                    const auto r = p.enclave->invoke({1, testing_support::kClient, {site}, {x}}, 0);
                    deltas.push_back(std::get<runtime::DeltaBatch>(r.value).deltas[0]);
                }
            }
            const Vec agg = aggregate_site(deltas, cl.backbone.hidden_dim());
            EXPECT_LT(max_abs_diff(agg, naive_matvec(dense, x)), 1e-9) << to_string(site);
        }
    }
}

TEST(Linearity, EndToEndEqualsVirtualAdapterForward) {
    for (std::size_t k = 1; k <= 4; ++k) {
        ClusterSpec spec;
        spec.providers = k;
        spec.adapter_seed = 200 + k;
        Cluster cl(spec);
        Rng rng(24 + k);
        for (int trial = 0; trial < 5; ++trial) {
            const Vec x = rng.normal_vector(cl.backbone.hidden_dim());
            const auto r = cl.run(x);
            const Vec expected = virtual_adapter_forward(cl.backbone, cl.authorized_sets(), x);
            EXPECT_LT(rel_error(r.outputs[0], expected), 1e-9) << "k=" << k;
        }
    }
}

TEST(Revocation, OnlyContributorRevokedGivesZeroAggregate) {
    ClusterSpec spec;
    spec.providers = 1;
    spec.inactive_fraction = 0.0;
    Cluster cl(spec);
    cl.contributors.revoke_provider(provider_name(0));
    const Vec x = Vec::Constant(cl.backbone.hidden_dim(), 0.3);
    const auto r = cl.run(x);
    EXPECT_EQ(r.trace.message_count, 0u);
    EXPECT_TRUE(bitwise_equal(r.outputs[0], forward_plain(cl.backbone, x)));
}

TEST(Revocation, RevokingOneOfTwoEqualProvidersChangesNothing) {
    const Backbone bb({2, 4, 9});
    const auto set = random_adapter_set(bb, "x", "m", 2, 4);
    const SiteId site{1, Projection::AttnO};
    const Vec d = set.at(site).adapter.delta(Vec::Ones(4));
    const std::vector<Vec> both{d, d}, one{d};
    EXPECT_TRUE(bitwise_equal(aggregate_site(both, 4), aggregate_site(one, 4)));
}

// After revocation the output is bitwise that of a cluster where k never existed.
TEST(Revocation, MatchesCounterfactualCluster) {
    ClusterSpec spec;
    spec.providers = 3;
    Cluster full(spec);
    Cluster without(spec, {0, 2});
    full.contributors.revoke_provider(provider_name(1));
    Rng rng(25);
    for (int trial = 0; trial < 4; ++trial) {
        const Vec x = rng.normal_vector(full.backbone.hidden_dim());
        sched::RunOptions opt;
        opt.tokens = 2;
        const auto a = full.run(x, opt);
        const auto b = without.run(x, opt);
        ASSERT_EQ(a.outputs.size(), 2u);
        for (std::size_t t = 0; t < 2; ++t) EXPECT_TRUE(bitwise_equal(a.outputs[t], b.outputs[t]));
        EXPECT_FALSE(a.issue_order.contains(provider_name(1)));
    }

    full.contributors.authorize_provider(provider_name(1));
    const Vec x = rng.normal_vector(full.backbone.hidden_dim());
    EXPECT_FALSE(bitwise_equal(full.run(x).outputs[0], without.run(x).outputs[0]));
}

}  // namespace
}  // namespace pkus
