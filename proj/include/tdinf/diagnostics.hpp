#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tdinf/gradients.hpp"
#include "tdinf/jobs.hpp"
#include "tdinf/linalg.hpp"
#include "tdinf/model.hpp"
#include "tdinf/rng.hpp"

namespace tdinf {

// Parameter groups for the cancellation diagnostics. Weight groups exclude
// biases; "all_weight" covers conv and fc weights (the embedding has its own
// group, matching the paper-style accounting that reports non-embedding
// parameters), "all_bias" covers every bias vector.
inline std::vector<std::string> diagnostic_groups(const ModelConfig& cfg) {
    std::vector<std::string> g = {"embedding"};
    for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) {
        g.push_back("conv" + std::to_string(i + 1) + "_w");
        g.push_back("conv" + std::to_string(i + 1) + "_b");
    }
    g.push_back("fc_w");
    g.push_back("fc_b");
    g.push_back("all_weight");
    g.push_back("all_bias");
    return g;
}

namespace detail {

template <typename FW, typename FB>
void for_group(const ModelConfig& cfg, const std::string& group, FW&& on_weights, FB&& on_bias) {
    bool matched = false;
    auto conv_name = [](std::size_t i) { return "conv" + std::to_string(i + 1); };
    if (group == "embedding") {
        on_weights("embedding");
        matched = true;
    }
    for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) {
        if (group == conv_name(i) + "_w") {
            on_weights(conv_name(i));
            matched = true;
        }
        if (group == conv_name(i) + "_b") {
            on_bias(conv_name(i));
            matched = true;
        }
    }
    if (group == "fc_w") {
        on_weights("fc");
        matched = true;
    }
    if (group == "fc_b") {
        on_bias("fc");
        matched = true;
    }
    if (group == "all_weight") {
        for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) on_weights(conv_name(i));
        on_weights("fc");
        matched = true;
    }
    if (group == "all_bias") {
        for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) on_bias(conv_name(i));
        on_bias("fc");
        matched = true;
    }
    if (!matched) throw ConfigError("unknown parameter group: " + group);
}

inline int conv_index(const std::string& layer) {
    return std::stoi(layer.substr(4)) - 1;
}

}  // namespace detail

inline std::vector<double> flatten_group(const Params& p, const ModelConfig& cfg,
                                         const std::string& group) {
    std::vector<double> flat;
    detail::for_group(
        cfg, group,
        [&](const std::string& layer) {
            if (layer == "embedding")
                flat.insert(flat.end(), p.embedding.begin(), p.embedding.end());
            else if (layer == "fc")
                flat.insert(flat.end(), p.fc_w.begin(), p.fc_w.end());
            else {
                const auto& c = p.convs[static_cast<std::size_t>(detail::conv_index(layer))];
                flat.insert(flat.end(), c.w.begin(), c.w.end());
            }
        },
        [&](const std::string& layer) {
            if (layer == "fc")
                flat.insert(flat.end(), p.fc_b.begin(), p.fc_b.end());
            else {
                const auto& c = p.convs[static_cast<std::size_t>(detail::conv_index(layer))];
                flat.insert(flat.end(), c.b.begin(), c.b.end());
            }
        });
    return flat;
}

// L2 norm of one example's loss gradient restricted to a group. The
// embedding part sums position gradients per word before taking the norm.
inline double group_grad_norm(const ModelGrads& g, const ModelConfig& cfg,
                              const std::string& group) {
    double sq = 0.0;
    detail::for_group(
        cfg, group,
        [&](const std::string& layer) {
            if (layer == "embedding") {
                std::map<int, std::vector<double>> rows;
                for (const auto& pg : g.embed_positions) {
                    auto [it, fresh] = rows.try_emplace(pg.word_id);
                    if (fresh) it->second.assign(pg.g.size(), 0.0);
                    for (std::size_t c = 0; c < pg.g.size(); ++c) it->second[c] += pg.g[c];
                }
                for (const auto& [w, row] : rows)
                    for (double x : row) sq += x * x;
            } else if (layer == "fc") {
                for (double x : g.fc_w) sq += x * x;
            } else {
                for (double x : g.convs[static_cast<std::size_t>(detail::conv_index(layer))].w)
                    sq += x * x;
            }
        },
        [&](const std::string& layer) {
            if (layer == "fc") {
                for (double x : g.fc_b) sq += x * x;
            } else {
                for (double x : g.convs[static_cast<std::size_t>(detail::conv_index(layer))].b)
                    sq += x * x;
            }
        });
    return std::sqrt(sq);
}

// Delta W_c = ||W_{c+1} - W_c|| over consecutive checkpoints.
inline std::vector<double> weight_delta(const CheckpointSet& cks, const std::string& group) {
    std::vector<double> deltas;
    for (std::size_t i = 0; i + 1 < cks.checkpoints.size(); ++i) {
        auto a = flatten_group(cks.checkpoints[i].theta, cks.cfg, group);
        auto b = flatten_group(cks.checkpoints[i + 1].theta, cks.cfg, group);
        double sq = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) sq += (b[j] - a[j]) * (b[j] - a[j]);
        deltas.push_back(std::sqrt(sq));
    }
    return deltas;
}

// G(W)_c = eta_c * sum_i ||d loss(x_i)/d W_c||, evaluated at the checkpoint
// opening each interval (aligned with weight_delta).
inline std::vector<double> grad_norm_sum(const CheckpointSet& cks, const Dataset& data,
                                         const std::string& group, int n_threads = 1) {
    std::vector<double> gs;
    for (std::size_t ci = 0; ci + 1 < cks.checkpoints.size(); ++ci) {
        const Checkpoint& ck = cks.checkpoints[ci];
        Model m{cks.cfg, ck.theta};
        std::vector<double> norms = parallel_map<double>(
            static_cast<int>(data.size()), n_threads, [&](int i) {
                const Example& e = data.examples[static_cast<std::size_t>(i)];
                ModelGrads g = backward(m, e.token_ids, e.label);
                return group_grad_norm(g, cks.cfg, group);
            });
        double total = 0.0;
        for (double v : norms) total += v;
        gs.push_back(ck.eta * total);
    }
    return gs;
}

struct CancellationReport {
    std::string group;
    std::vector<double> delta_per_ckpt;
    std::vector<double> g_per_ckpt;
    double sum_delta = 0.0;
    double sum_g = 0.0;
    bool defined = false;  // false when sum_delta == 0 (e.g. frozen group)
    double ratio = 0.0;    // C(W) = sum G / sum Delta
};

inline CancellationReport cancellation_from_series(std::string group,
                                                   std::vector<double> deltas,
                                                   std::vector<double> gs) {
    CancellationReport r;
    r.group = std::move(group);
    r.delta_per_ckpt = std::move(deltas);
    r.g_per_ckpt = std::move(gs);
    for (double v : r.delta_per_ckpt) r.sum_delta += v;
    for (double v : r.g_per_ckpt) r.sum_g += v;
    r.defined = r.sum_delta > 0.0;
    r.ratio = r.defined ? r.sum_g / r.sum_delta : 0.0;
    return r;
}

inline CancellationReport cancellation_ratio(const CheckpointSet& cks, const Dataset& data,
                                             const std::string& group, int n_threads = 1) {
    return cancellation_from_series(group, weight_delta(cks, group),
                                    grad_norm_sum(cks, data, group, n_threads));
}

// Mean pairwise gradient cosine per layer (weights only) over sampled
// example pairs. Returns layer -> per-pair cosines.
inline std::map<std::string, std::vector<double>> layer_grad_cosines(
    const Model& m, const Dataset& data, int n_pairs, std::uint64_t seed, int n_threads = 1) {
    if (data.size() < 2) throw ConfigError("need at least two examples for pair sampling");
    Rng rng(seed, "cosine-pairs");
    std::vector<std::pair<int, int>> pairs;
    for (int p = 0; p < n_pairs; ++p) {
        int i = static_cast<int>(rng.next_below(data.size()));
        int j = static_cast<int>(rng.next_below(data.size() - 1));
        if (j >= i) ++j;
        pairs.push_back({i, j});
    }

    std::vector<std::string> weight_groups = {"embedding"};
    for (std::size_t i = 0; i < m.cfg.conv_specs.size(); ++i)
        weight_groups.push_back("conv" + std::to_string(i + 1) + "_w");
    weight_groups.push_back("fc_w");

    struct PairCos {
        std::vector<double> per_group;
    };
    std::vector<PairCos> rows = parallel_map<PairCos>(
        static_cast<int>(pairs.size()), n_threads, [&](int pi) {
            const auto& [ia, ib] = pairs[static_cast<std::size_t>(pi)];
            const Example& ea = data.examples[static_cast<std::size_t>(ia)];
            const Example& eb = data.examples[static_cast<std::size_t>(ib)];
            ModelGrads ga = backward(m, ea.token_ids, ea.label);
            ModelGrads gb = backward(m, eb.token_ids, eb.label);
            PairCos pc;
            for (const auto& group : weight_groups) {
                if (group == "embedding") {
                    // sparse cosine: dot over overlapping word rows
                    auto rows_of = [&](const ModelGrads& g) {
                        std::map<int, std::vector<double>> r;
                        for (const auto& pg : g.embed_positions) {
                            auto [it, fresh] = r.try_emplace(pg.word_id);
                            if (fresh) it->second.assign(pg.g.size(), 0.0);
                            for (std::size_t c = 0; c < pg.g.size(); ++c) it->second[c] += pg.g[c];
                        }
                        return r;
                    };
                    auto ra = rows_of(ga), rb = rows_of(gb);
                    double na = 0.0, nb = 0.0, dp = 0.0;
                    for (const auto& [w, v] : ra) na += dot(v, v);
                    for (const auto& [w, v] : rb) nb += dot(v, v);
                    for (const auto& [w, v] : ra) {
                        auto it = rb.find(w);
                        if (it != rb.end()) dp += dot(v, it->second);
                    }
                    pc.per_group.push_back(na > 0 && nb > 0 ? dp / std::sqrt(na * nb) : 0.0);
                } else if (group == "fc_w") {
                    pc.per_group.push_back(cosine(ga.fc_w, gb.fc_w));
                } else {
                    int ci = detail::conv_index(group.substr(0, group.size() - 2));
                    pc.per_group.push_back(cosine(ga.convs[static_cast<std::size_t>(ci)].w,
                                                  gb.convs[static_cast<std::size_t>(ci)].w));
                }
            }
            return pc;
        });

    std::map<std::string, std::vector<double>> out;
    for (std::size_t gi = 0; gi < weight_groups.size(); ++gi) {
        auto& v = out[weight_groups[gi]];
        for (const auto& r : rows) v.push_back(r.per_group[gi]);
    }
    return out;
}

inline std::map<std::string, double> layer_grad_cosine_means(
    const Model& m, const Dataset& data, int n_pairs, std::uint64_t seed, int n_threads = 1) {
    auto per = layer_grad_cosines(m, data, n_pairs, seed, n_threads);
    std::map<std::string, double> means;
    for (const auto& [g, v] : per) {
        double s = 0.0;
        for (double x : v) s += x;
        means[g] = v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
    return means;
}

}  // namespace tdinf
