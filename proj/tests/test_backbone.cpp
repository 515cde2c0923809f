#include "pkus/backbone.hpp"
#include "pkus/random.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace pkus {
namespace {

Vec zero_delta(SiteId, const Vec& x) { return Vec::Zero(x.size()); }

// Independent plain forward: explicit loops over every layer and element.
Vec reference_forward(const Backbone& bb, const Vec& input,
                      const std::function<Mat(SiteId)>& weight_of) {
    const auto d = bb.hidden_dim();
    std::vector<double> h(input.data(), input.data() + d);
    for (std::uint32_t l = 0; l < bb.layers(); ++l) {
        Vec hv = Eigen::Map<const Vec>(h.data(), d);
        std::vector<std::vector<double>> y;
        for (auto p : kAllProjections) {
            y.push_back(oracle::naive_matvec(weight_of({l, p}), hv));
        }
        for (Eigen::Index i = 0; i < d; ++i) {
            const auto k = static_cast<std::size_t>(i);
            double z = std::tanh(y[0][k]) * std::tanh(y[1][k]) + y[2][k] + y[3][k] +
                       std::tanh(y[4][k]) * y[5][k];
            h[k] += std::tanh(z);
        }
    }
    return Eigen::Map<const Vec>(h.data(), d);
}

TEST(Forward, ZeroDeltaMatchesReferenceForward) {
    Backbone bb({3, 6, 11});
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        Vec x = rng.normal_vector(6);
        auto [y, trace] = forward(bb, x, zero_delta);
        Vec ref = reference_forward(bb, x, [&](SiteId s) { return bb.weight(s); });
        EXPECT_LT(oracle::rel_error(y, ref), 1e-12);
        EXPECT_TRUE(oracle::bitwise_equal(y, forward_plain(bb, x)));
        EXPECT_EQ(trace.sites.size(), 18u);
    }
}

TEST(Forward, SingleAdapterSplitEqualsMergedWeights) {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        Backbone bb({2, 5, static_cast<std::uint64_t>(100 + trial)});
        ProviderAdapterSet set("p", "m");
        const SiteId site = SiteId::from_ordinal(static_cast<std::size_t>(trial) % 12);
        LowRankAdapter ad(rng.normal_matrix(5, 2, 0.5), rng.normal_matrix(2, 5, 0.5), 4.0);
        set.insert(site, ad);
        Vec x = rng.normal_vector(5);
        auto [split, trace] = forward(bb, x, local_deltas(set));
        Backbone merged = bb.with_weight(site, merge_to_dense(ad, bb.weight(site)));
        Vec dense = forward_plain(merged, x);
        EXPECT_LT(oracle::rel_error(split, dense), 1e-9);
    }
}

TEST(Forward, DeterministicForSameSeedAndInput) {
    Backbone a({4, 8, 7}), b({4, 8, 7});
    Vec x = Rng(3).normal_vector(8);
    EXPECT_TRUE(oracle::bitwise_equal(forward_plain(a, x), forward_plain(b, x)));
    Backbone c({4, 8, 8});
    EXPECT_FALSE(oracle::bitwise_equal(forward_plain(a, x), forward_plain(c, x)));
}

TEST(Forward, AddThenSubtractRestoresZeroDeltaOutput) {
    Backbone bb({3, 6, 5});
    Rng rng(4);
    Vec x = rng.normal_vector(6);
    std::vector<Vec> offsets;
    for (int i = 0; i < 18; ++i) offsets.push_back(rng.normal_vector(6));
    auto cancel = [&](SiteId s, const Vec&) -> Vec {
        const Vec& d = offsets[s.ordinal()];
        return vec_add(d, vec_scale(d, -1.0));
    };
    auto [y, trace] = forward(bb, x, cancel);
    EXPECT_TRUE(oracle::bitwise_equal(y, forward_plain(bb, x)));
}

TEST(Forward, TraceRecordsEverySiteInput) {
    Backbone bb({2, 4, 9});
    Vec x = Rng(5).normal_vector(4);
    std::vector<std::pair<SiteId, Vec>> seen;
    auto spy = [&](SiteId s, const Vec& xs) {
        seen.emplace_back(s, xs);
        return Vec::Zero(xs.size()).eval();
    };
    auto [y, trace] = forward(bb, x, spy);
    ASSERT_EQ(seen.size(), trace.sites.size());
    for (std::size_t i = 0; i < seen.size(); ++i) {
        EXPECT_EQ(trace.sites[i].site, seen[i].first);
        EXPECT_EQ(trace.sites[i].input, seen[i].second);
        EXPECT_EQ(trace.sites[i].site.ordinal(), i);
    }
    EXPECT_EQ(trace.sites.front().input, x);

    std::ostringstream os;
    trace.write_jsonl(os);
    const auto text = os.str();
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 13);
}

TEST(Forward, WrongDeltaDimensionFailsClosed) {
    Backbone bb({1, 4, 1});
    auto bad = [](SiteId, const Vec&) { return Vec::Zero(3).eval(); };
    EXPECT_THROW(forward(bb, Vec::Zero(4), bad), ContractViolation);
    EXPECT_THROW(forward(bb, Vec::Zero(5), zero_delta), ContractViolation);
}

TEST(Backward, MatchesFiniteDifferencesOnSiteOutputs) {
    Backbone bb({2, 5, 21});
    Rng rng(6);
    Vec x = rng.normal_vector(5);
    std::vector<Vec> bias;
    for (int i = 0; i < 12; ++i) bias.push_back(rng.normal_vector(5, 0.3));
    auto run = [&](const std::vector<Vec>& b) {
        auto [y, trace] = forward(bb, x, [&](SiteId s, const Vec&) { return b[s.ordinal()]; });
        return std::make_pair(classifier_score(bb, y), trace);
    };
    auto [score, trace] = run(bias);
    auto zero_vjp = [](SiteId, const Vec& xs, const Vec&) { return Vec::Zero(xs.size()).eval(); };
    auto grads = backward(bb, trace, bb.readout(), zero_vjp);
    const double h = 1e-6;
    for (std::size_t s = 0; s < 12; ++s) {
        for (Eigen::Index i = 0; i < 5; ++i) {
            auto plus = bias, minus = bias;
            plus[s][i] += h;
            minus[s][i] -= h;
            double fd = (run(plus).first - run(minus).first) / (2 * h);
            EXPECT_NEAR(grads[s][i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(ToyTask, RejectsEmptyDataset) { EXPECT_THROW(toy_task_dataset(1, 0), std::invalid_argument); }

TEST(ToyTask, PerfectPredictorScoresOne) {
    auto data = toy_task_dataset(2, 100);
    EXPECT_DOUBLE_EQ(toy_metric(data.labels, data.labels), 1.0);
}

TEST(ToyTask, ConstantPredictorMatchesLabelCount) {
    auto data = toy_task_dataset(3, 4000);
    const auto ones = static_cast<double>(std::count(data.labels.begin(), data.labels.end(), 1));
    const double frac_zero = 1.0 - ones / static_cast<double>(data.size());
    std::vector<int> constant(data.size(), 0);
    const double metric = toy_metric(constant, data.labels);
    EXPECT_DOUBLE_EQ(metric, frac_zero);
    EXPECT_NEAR(metric, 0.5, 0.05);
}

TEST(ToyTask, DeterministicPerSeed) {
    auto a = toy_task_dataset(4, 50), b = toy_task_dataset(4, 50);
    EXPECT_EQ(a.labels, b.labels);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.inputs[i], b.inputs[i]);
}

}  // namespace
}  // namespace pkus
