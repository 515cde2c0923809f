#include "pkus/backbone.hpp"

#include "pkus/random.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace pkus {

namespace {

constexpr std::size_t kQ = 0, kK = 1, kV = 2, kO = 3, kUp = 4, kDown = 5;

struct LayerState {
    std::array<Vec, kProjectionsPerLayer> y;
    std::array<Vec, kProjectionsPerLayer> t;  // tanh(y) for q, k, up
    Vec z;
};

Vec combine(LayerState& s) {
    s.t[kQ] = s.y[kQ].array().tanh();
    s.t[kK] = s.y[kK].array().tanh();
    s.t[kUp] = s.y[kUp].array().tanh();
    s.z = (s.t[kQ].array() * s.t[kK].array() + s.y[kV].array() + s.y[kO].array() +
           s.t[kUp].array() * s.y[kDown].array())
              .matrix();
    return s.z.array().tanh().matrix();
}

void write_vec(std::ostream& os, const Vec& v) {
    os << '[';
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
    }
    os << ']';
}

}  // namespace

Backbone::Backbone(BackboneConfig cfg) : cfg_(cfg) {
    if (cfg_.layers < 1 || cfg_.hidden_dim < 2) {
        throw ContractViolation("backbone needs >= 1 layer and hidden_dim >= 2");
    }
    Rng rng(cfg_.seed, "backbone");
    const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
    weights_.reserve(site_count());
    for (std::size_t i = 0; i < site_count(); ++i) {
        weights_.push_back(rng.normal_matrix(cfg_.hidden_dim, cfg_.hidden_dim, stddev));
    }
    readout_ = rng.normal_vector(cfg_.hidden_dim, stddev);
}

const Mat& Backbone::weight(SiteId site) const {
    if (site.layer >= cfg_.layers) {
        throw ContractViolation("site " + to_string(site) + " beyond backbone depth");
    }
    return weights_[site.ordinal()];
}

Backbone Backbone::with_weight(SiteId site, Mat w) const {
    const auto& old = weight(site);
    if (w.rows() != old.rows() || w.cols() != old.cols()) {
        throw ContractViolation("with_weight: shape mismatch");
    }
    Backbone copy = *this;
    copy.weights_[site.ordinal()] = std::move(w);
    return copy;
}

Vec forward_layers(const Backbone& backbone, const Vec& input, const LayerDeltaFn& deltas,
                   ForwardTrace* trace) {
    const auto d = backbone.hidden_dim();
    if (input.size() != d) {
        throw ContractViolation("forward: input dim " + std::to_string(input.size()) +
                                " != hidden dim " + std::to_string(d));
    }
    if (trace) {
        trace->sites.clear();
        trace->sites.reserve(backbone.site_count());
    }
    Vec h = input;
    LayerState state;
    for (std::uint32_t layer = 0; layer < backbone.layers(); ++layer) {
        LayerDeltas delta = deltas(layer, h);
        for (std::size_t p = 0; p < kProjectionsPerLayer; ++p) {
            const SiteId site{layer, kAllProjections[p]};
            if (delta[p].size() != d) {
                throw ContractViolation("delta source returned dim " +
                                        std::to_string(delta[p].size()) + " at " +
                                        to_string(site));
            }
            state.y[p] = matvec(backbone.weight(site), h) + delta[p];
            if (trace) {
                trace->sites.push_back({site, h, delta[p]});
            }
        }
        h += combine(state);
    }
    if (trace) {
        trace->output = h;
    }
    return h;
}

std::pair<Vec, ForwardTrace> forward(const Backbone& backbone, const Vec& input,
                                     const SiteDeltaFn& delta_source) {
    ForwardTrace trace;
    auto per_layer = [&](std::uint32_t layer, const Vec& x) {
        LayerDeltas out;
        for (std::size_t p = 0; p < kProjectionsPerLayer; ++p) {
            out[p] = delta_source(SiteId{layer, kAllProjections[p]}, x);
        }
        return out;
    };
    Vec out = forward_layers(backbone, input, per_layer, &trace);
    return {std::move(out), std::move(trace)};
}

Vec forward_plain(const Backbone& backbone, const Vec& input) {
    const auto d = backbone.hidden_dim();
    return forward_layers(backbone, input, [d](std::uint32_t, const Vec&) {
        LayerDeltas out;
        out.fill(Vec::Zero(d));
        return out;
    });
}

SiteDeltaFn local_deltas(const ProviderAdapterSet& set) {
    return [&set](SiteId site, const Vec& x) -> Vec {
        auto it = set.entries().find(site);
        if (it == set.entries().end() || !it->second.active) {
            return Vec::Zero(x.size());
        }
        return it->second.adapter.delta(x);
    };
}

std::vector<Vec> backward(const Backbone& backbone, const ForwardTrace& trace,
                          const Vec& grad_output, const DeltaVjpFn& delta_vjp) {
    const auto d = backbone.hidden_dim();
    if (trace.sites.size() != backbone.site_count() || grad_output.size() != d) {
        throw ContractViolation("backward: trace does not match backbone");
    }
    std::vector<Vec> grad_y(backbone.site_count());
    Vec dh = grad_output;
    LayerState state;
    for (std::uint32_t layer = backbone.layers(); layer-- > 0;) {
        const std::size_t base = layer * kProjectionsPerLayer;
        const Vec& x = trace.sites[base].input;
        for (std::size_t p = 0; p < kProjectionsPerLayer; ++p) {
            const auto& rec = trace.sites[base + p];
            state.y[p] = backbone.weight(rec.site) * rec.input + rec.delta;
        }
        Vec tz = combine(state);
        Vec dz = (dh.array() * (1.0 - tz.array().square())).matrix();
        const auto& tq = state.t[kQ].array();
        const auto& tk = state.t[kK].array();
        const auto& tup = state.t[kUp].array();
        std::array<Vec, kProjectionsPerLayer> dy;
        dy[kQ] = (dz.array() * tk * (1.0 - tq.square())).matrix();
        dy[kK] = (dz.array() * tq * (1.0 - tk.square())).matrix();
        dy[kV] = dz;
        dy[kO] = dz;
        dy[kUp] = (dz.array() * state.y[kDown].array() * (1.0 - tup.square())).matrix();
        dy[kDown] = (dz.array() * tup).matrix();

        Vec dx = dh;  // residual path
        for (std::size_t p = 0; p < kProjectionsPerLayer; ++p) {
            const SiteId site{layer, kAllProjections[p]};
            dx.noalias() += backbone.weight(site).transpose() * dy[p];
            Vec through_delta = delta_vjp(site, x, dy[p]);
            if (through_delta.size() != d) {
                throw ContractViolation("delta vjp returned wrong dim at " + to_string(site));
            }
            dx += through_delta;
            grad_y[base + p] = std::move(dy[p]);
        }
        dh = std::move(dx);
    }
    return grad_y;
}

void ForwardTrace::write_jsonl(std::ostream& os) const {
    for (const auto& rec : sites) {
        os << "{\"site\":\"" << to_string(rec.site) << "\",\"input\":";
        write_vec(os, rec.input);
        os << ",\"delta\":";
        write_vec(os, rec.delta);
        os << "}\n";
    }
    os << "{\"output\":";
    write_vec(os, output);
    os << "}\n";
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) {
        throw std::out_of_range("dataset slice out of range");
    }
    Dataset out;
    out.inputs.assign(inputs.begin() + static_cast<std::ptrdiff_t>(begin),
                      inputs.begin() + static_cast<std::ptrdiff_t>(end));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      labels.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

ToyTask make_toy_task(std::uint64_t seed, Eigen::Index dim) {
    if (dim < 2) {
        throw std::invalid_argument("toy task needs dim >= 2");
    }
    Rng rng(seed, "toy-task");
    ToyTask task;
    task.dim = dim;
    task.linear_dir = rng.normal_vector(dim).normalized();
    task.nonlinear_dir = rng.normal_vector(dim).normalized();
    return task;
}

Dataset sample_dataset(const ToyTask& task, std::uint64_t seed, std::size_t n,
                       double label_noise) {
    if (n == 0) {
        throw std::invalid_argument("dataset size must be >= 1");
    }
    Rng rng(seed, "toy-samples");
    Dataset data;
    data.inputs.reserve(n);
    data.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Vec x = rng.normal_vector(task.dim);
        double s = task.linear_dir.dot(x) + 0.75 * std::tanh(2.0 * task.nonlinear_dir.dot(x));
        int label = s > 0.0 ? 1 : 0;
        if (label_noise > 0.0 && rng.uniform() < label_noise) {
            label = 1 - label;
        }
        data.inputs.push_back(std::move(x));
        data.labels.push_back(label);
    }
    return data;
}

Dataset toy_task_dataset(std::uint64_t seed, std::size_t n, Eigen::Index dim) {
    return sample_dataset(make_toy_task(seed, dim), seed, n);
}

double toy_metric(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size() || labels.empty()) {
        throw std::invalid_argument("toy_metric: predictions and labels must be non-empty and equal length");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += predictions[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<int> predict(const Backbone& backbone, const Dataset& data,
                         const SiteDeltaFn& delta_source) {
    std::vector<int> out;
    out.reserve(data.size());
    for (const auto& x : data.inputs) {
        auto [y, trace] = forward(backbone, x, delta_source);
        out.push_back(classifier_score(backbone, y) > 0.0 ? 1 : 0);
    }
    return out;
}

double evaluate_accuracy(const Backbone& backbone, const Dataset& data,
                         const SiteDeltaFn& delta_source) {
    return toy_metric(predict(backbone, data, delta_source), data.labels);
}

}  // namespace pkus
