#ifndef PKUS_BACKBONE_HPP
#define PKUS_BACKBONE_HPP

#include "pkus/adapter.hpp"
#include "pkus/linalg.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

namespace pkus {

struct BackboneConfig {
    std::uint32_t layers = 4;
    Eigen::Index hidden_dim = 8;
    std::uint64_t seed = 0;
};

/// Frozen toy backbone. Every layer has six d x d projections that all read the
/// layer input h; their outputs are combined as
///
///   z  = tanh(y_q) * tanh(y_k) + y_v + y_o + tanh(y_up) * y_down   (elementwise)
///   h' = h + tanh(z)
///
/// where y_s = W_s h + delta_s. The classifier score is readout . h_L.
class Backbone {
public:
    explicit Backbone(BackboneConfig cfg);

    [[nodiscard]] const BackboneConfig& config() const { return cfg_; }
    [[nodiscard]] std::uint32_t layers() const { return cfg_.layers; }
    [[nodiscard]] Eigen::Index hidden_dim() const { return cfg_.hidden_dim; }
    [[nodiscard]] std::size_t site_count() const { return cfg_.layers * kProjectionsPerLayer; }

    [[nodiscard]] const Mat& weight(SiteId site) const;
    [[nodiscard]] const Vec& readout() const { return readout_; }

    /// Copy with the weight at `site` replaced; used by merged-weight oracles.
    [[nodiscard]] Backbone with_weight(SiteId site, Mat w) const;

private:
    BackboneConfig cfg_;
    std::vector<Mat> weights_;  // indexed by SiteId::ordinal()
    Vec readout_;
};

using LayerDeltas = std::array<Vec, kProjectionsPerLayer>;

/// Per-site delta provider; receives x_s and returns the delta added to W_s x_s.
using SiteDeltaFn = std::function<Vec(SiteId, const Vec&)>;
/// Per-layer delta provider; all six sites of a layer share the same input.
using LayerDeltaFn = std::function<LayerDeltas(std::uint32_t layer, const Vec&)>;

struct ForwardTrace {
    struct SiteRecord {
        SiteId site;
        Vec input;
        Vec delta;
    };
    std::vector<SiteRecord> sites;  // execution order
    Vec output;

    /// One JSON object per line: {"site": ..., "input": [...], "delta": [...]}, then the output.
    void write_jsonl(std::ostream& os) const;
};

Vec forward_layers(const Backbone& backbone, const Vec& input, const LayerDeltaFn& deltas,
                   ForwardTrace* trace = nullptr);

std::pair<Vec, ForwardTrace> forward(const Backbone& backbone, const Vec& input,
                                     const SiteDeltaFn& delta_source);

/// Forward with no adapters.
Vec forward_plain(const Backbone& backbone, const Vec& input);

/// Deltas of one adapter set applied locally (all active sites).
SiteDeltaFn local_deltas(const ProviderAdapterSet& set);

/// Vector-Jacobian product of a site's delta with respect to its input x_s.
using DeltaVjpFn = std::function<Vec(SiteId, const Vec& x, const Vec& grad_y)>;

/// Reverse pass through a recorded forward. Returns dL/dy_s for every site
/// (indexed by ordinal) given dL/d(output).
std::vector<Vec> backward(const Backbone& backbone, const ForwardTrace& trace,
                          const Vec& grad_output, const DeltaVjpFn& delta_vjp);

[[nodiscard]] inline double classifier_score(const Backbone& backbone, const Vec& output) {
    return backbone.readout().dot(output);
}

// Toy classification task.

struct ToyTask {
    Eigen::Index dim = 8;
    Vec linear_dir;
    Vec nonlinear_dir;
};

struct Dataset {
    std::vector<Vec> inputs;
    std::vector<int> labels;  // 0 or 1

    [[nodiscard]] std::size_t size() const { return inputs.size(); }
    [[nodiscard]] Dataset slice(std::size_t begin, std::size_t end) const;
};

ToyTask make_toy_task(std::uint64_t seed, Eigen::Index dim);

/// Draws n examples. Label is [u.x + 0.75 tanh(2 v.x) > 0], flipped with
/// probability label_noise.
Dataset sample_dataset(const ToyTask& task, std::uint64_t seed, std::size_t n,
                       double label_noise = 0.0);

/// Convenience: task and samples from one seed.
Dataset toy_task_dataset(std::uint64_t seed, std::size_t n, Eigen::Index dim = 8);

/// Accuracy in [0, 1].
double toy_metric(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Predicted labels with the given delta source at every site.
std::vector<int> predict(const Backbone& backbone, const Dataset& data,
                         const SiteDeltaFn& delta_source);

double evaluate_accuracy(const Backbone& backbone, const Dataset& data,
                         const SiteDeltaFn& delta_source);

}  // namespace pkus

#endif  // PKUS_BACKBONE_HPP
