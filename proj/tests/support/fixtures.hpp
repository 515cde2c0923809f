#ifndef PKUS_TESTS_FIXTURES_HPP
#define PKUS_TESTS_FIXTURES_HPP

#include "pkus/backbone.hpp"
#include "pkus/edgeprune.hpp"
#include "pkus/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace pkus::testing_support {

struct GradientFixture {
    Backbone backbone;
    Dataset data;
    ProviderAdapterSet set;
};

inline GradientFixture random_gradient_fixture(Rng& rng, std::uint64_t seed) {
    const auto layers = static_cast<std::uint32_t>(1 + rng.next_u64() % 3);
    const Eigen::Index d = 3 + static_cast<Eigen::Index>(rng.next_u64() % 4);
    const Eigen::Index rank = 1 + static_cast<Eigen::Index>(rng.next_u64() % 3);
    Backbone bb({layers, d, seed});
    Dataset data = sample_dataset(make_toy_task(seed + 1, d), seed + 2, 6);
    ProviderAdapterSet set("p", "m");
    for (std::size_t ord = 0; ord < bb.site_count(); ++ord) {
        set.insert(SiteId::from_ordinal(ord),
                   LowRankAdapter(rng.normal_matrix(d, rank, 0.4), rng.normal_matrix(rank, d, 0.4),
                                  1.0 + 3.0 * rng.uniform()),
                   rng.uniform() < 0.7);
    }
    return {std::move(bb), std::move(data), std::move(set)};
}

/// Norm-wise relative error between the analytic adapter gradient and central
/// finite differences of adapter_loss with step h, over every active factor entry.
inline double gradient_check_error(const GradientFixture& fx, double h) {
    const auto analytic = adapter_loss_and_gradients(fx.backbone, fx.data, fx.set);
    std::vector<double> got, fd;
    for (const auto& [site, g] : analytic.grads) {
        for (int which = 0; which < 2; ++which) {
            const Mat& grad = which == 0 ? g.grad_a : g.grad_b;
            for (Eigen::Index i = 0; i < grad.size(); ++i) {
                auto plus = fx.set, minus = fx.set;
                auto& ap = plus.at(site).adapter;
                auto& am = minus.at(site).adapter;
                (which == 0 ? ap.raw_a() : ap.raw_b())[static_cast<std::size_t>(i)] += h;
                (which == 0 ? am.raw_a() : am.raw_b())[static_cast<std::size_t>(i)] -= h;
                const double num = (adapter_loss(fx.backbone, fx.data, plus) -
                                    adapter_loss(fx.backbone, fx.data, minus)) /
                                   (2.0 * h);
                got.push_back(grad.data()[i]);
                fd.push_back(num);
            }
        }
    }
    double diff = 0.0, ng = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        diff += (got[i] - fd[i]) * (got[i] - fd[i]);
        ng += got[i] * got[i];
        nf += fd[i] * fd[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(ng), std::sqrt(nf), 1e-300});
}

/// 24-site task whose labels come from a teacher with adapters on 12 sites. The
/// starting set carries the teacher's adapters there and near-zero adapters on
/// the other 12.
struct SparseTeacherTask {
    Backbone backbone;
    ProviderAdapterSet teacher;
    ProviderAdapterSet dense_start;
    Dataset train;
    Dataset valid;
    std::vector<SiteId> informative;
    std::vector<SiteId> near_zero;
};

inline SparseTeacherTask make_sparse_teacher_task(std::uint64_t seed) {
    constexpr Eigen::Index d = 8;
    constexpr Eigen::Index rank = 2;
    Backbone bb({4, d, seed});
    Rng rng(seed, "sparse-teacher");
    std::vector<std::size_t> ords(24);
    std::iota(ords.begin(), ords.end(), 0);
    std::shuffle(ords.begin(), ords.end(), rng.engine());

    SparseTeacherTask t{bb, ProviderAdapterSet("teacher", "toy"), ProviderAdapterSet("provider", "toy"),
                        {}, {}, {}, {}};
    for (std::size_t i = 0; i < ords.size(); ++i) {
        const auto site = SiteId::from_ordinal(ords[i]);
        if (i < 12) {
            LowRankAdapter ad(rng.normal_matrix(d, rank, 0.4), rng.normal_matrix(rank, d, 0.4), 4.0);
            t.teacher.insert(site, ad);
            t.dense_start.insert(site, LowRankAdapter(ad.a() + rng.normal_matrix(d, rank, 0.1), ad.b(), 4.0));
            t.informative.push_back(site);
        } else {
            t.dense_start.insert(site, LowRankAdapter(rng.normal_matrix(d, rank, 1e-4),
                                                      rng.normal_matrix(rank, d, 1e-4), 4.0));
            t.near_zero.push_back(site);
        }
    }
    std::sort(t.informative.begin(), t.informative.end());
    std::sort(t.near_zero.begin(), t.near_zero.end());

    const auto task = make_toy_task(seed, d);
    auto label = [&](Dataset data) {
        data.labels = predict(bb, data, local_deltas(t.teacher));
        return data;
    };
    t.train = label(sample_dataset(task, seed + 100, 1000));
    t.valid = label(sample_dataset(task, seed + 200, 400));
    return t;
}

}  // namespace pkus::testing_support

#endif
