#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tdinf/gradients.hpp"
#include "tdinf/linalg.hpp"
#include "tdinf/model.hpp"
#include "tdinf/similarity.hpp"

namespace tdinf {

// Scores are stored proponent-positive: positive score means removing the
// training example is expected to lower the test example's groundtruth
// probability. Self-influence is therefore a nonnegative sum of squared
// norms, which keeps the influence-distance normalization well defined.

struct InfluenceResult {
    int train_id = -1;
    int test_id = -1;
    double score = 0.0;
    bool has_word_contribs = false;
    std::map<int, double> word_contribs;
    std::string method;
    std::vector<int> checkpoints_used;
};

enum class TokenFilter { All, CommonOnly, NoCommon };

inline const char* token_filter_name(TokenFilter f) {
    switch (f) {
        case TokenFilter::All: return "all";
        case TokenFilter::CommonOnly: return "common_only";
        case TokenFilter::NoCommon: return "no_common";
    }
    return "?";
}

using StepEtas = std::vector<std::pair<int, double>>;  // (checkpoint step, eta)

inline StepEtas step_etas(const CheckpointSet& cks) {
    StepEtas se;
    for (const Checkpoint* c : cks.selected()) se.push_back({c->step, c->eta});
    return se;
}

// ---------------------------------------------------------------------------
// TracIn-WE family (store-backed, sparse word gradients).

inline InfluenceResult tracin_we(const GradientStore& store, const StepEtas& etas, int train_id,
                                 int test_id, TokenFilter filter = TokenFilter::All,
                                 const std::set<int>* common_set = nullptr) {
    if (filter != TokenFilter::All && common_set == nullptr)
        throw ConfigError("token filter needs the vocab common set");
    InfluenceResult r;
    r.train_id = train_id;
    r.test_id = test_id;
    r.method = store.meta.topk > 0 ? "tracin_we_topk" : "tracin_we";
    r.has_word_contribs = true;

    for (const auto& [step, eta] : etas) {
        r.checkpoints_used.push_back(step);
        const auto& a = store.find(train_id, step).words.entries;
        const auto& b = store.find(test_id, step).words.entries;
        auto ia = a.begin();
        auto ib = b.begin();
        while (ia != a.end() && ib != b.end()) {
            if (ia->first < ib->first) {
                ++ia;
            } else if (ib->first < ia->first) {
                ++ib;
            } else {
                const int w = ia->first;
                const bool common = common_set && common_set->count(w) > 0;
                const bool keep = filter == TokenFilter::All ||
                                  (filter == TokenFilter::CommonOnly && common) ||
                                  (filter == TokenFilter::NoCommon && !common);
                if (keep) r.word_contribs[w] += eta * dot(ia->second, ib->second);
                ++ia;
                ++ib;
            }
        }
    }
    for (const auto& [w, v] : r.word_contribs) r.score += v;
    return r;
}

// Word gradient similarity with synonym matching: the top-k word lists of
// the two sentences are matched 1:1 by an optimal assignment that minimizes
// -|WGS| over synonym pairs; non-synonym pairs contribute nothing.
inline InfluenceResult tracin_we_syn(const GradientStore& store, const StepEtas& etas,
                                     int train_id, int test_id, const SynConfig& syncfg,
                                     const std::vector<double>& embedding, int embed_dim, int k) {
    syncfg.check();
    if (k < 1) throw ConfigError("tracin_we_syn needs k >= 1");
    InfluenceResult r;
    r.train_id = train_id;
    r.test_id = test_id;
    r.method = "tracin_we_syn";

    for (const auto& [step, eta] : etas) {
        r.checkpoints_used.push_back(step);
        const auto& ea = store.find(train_id, step).words.entries;
        const auto& eb = store.find(test_id, step).words.entries;
        if (ea.empty() || eb.empty()) continue;

        // word lists truncated to k by entry norm (descending, ties by id)
        auto top_words = [&](const std::map<int, std::vector<double>>& entries) {
            std::vector<const std::pair<const int, std::vector<double>>*> v;
            for (const auto& p : entries) v.push_back(&p);
            if (static_cast<int>(v.size()) > k) {
                std::stable_sort(v.begin(), v.end(), [](const auto* a, const auto* b) {
                    return norm2(a->second) > norm2(b->second);
                });
                v.resize(static_cast<std::size_t>(k));
            }
            return v;
        };
        auto wa = top_words(ea);
        auto wb = top_words(eb);
        const int n = std::max(static_cast<int>(wa.size()), static_cast<int>(wb.size()));

        // cost = -|WGS-syn|; slots past a sentence's word list are dummies
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                              std::vector<double>(static_cast<std::size_t>(n), 0.0));
        std::vector<std::vector<double>> wgs = cost;
        for (int i = 0; i < n && i < static_cast<int>(wa.size()); ++i) {
            for (int j = 0; j < n && j < static_cast<int>(wb.size()); ++j) {
                if (!syn(wa[static_cast<std::size_t>(i)]->first,
                         wb[static_cast<std::size_t>(j)]->first, embedding, embed_dim, syncfg))
                    continue;
                double v = dot(wa[static_cast<std::size_t>(i)]->second,
                               wb[static_cast<std::size_t>(j)]->second);
                wgs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
                cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = -std::abs(v);
            }
        }
        Assignment as = solve_assignment(cost);
        for (int i = 0; i < n; ++i) {
            int j = as.mapping[static_cast<std::size_t>(i)];
            if (cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] != 0.0)
                r.score += eta * wgs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    return r;
}

// TracIn on the last layer in factorized form <a,a'><L,L'> (weights only,
// bias excluded); identical to the flat fc-weight gradient dot product.
inline InfluenceResult tracin_last(const GradientStore& store, const StepEtas& etas, int train_id,
                                   int test_id) {
    InfluenceResult r;
    r.train_id = train_id;
    r.test_id = test_id;
    r.method = "tracin_last";
    for (const auto& [step, eta] : etas) {
        r.checkpoints_used.push_back(step);
        const auto& a = store.find(train_id, step);
        const auto& b = store.find(test_id, step);
        r.score += eta * dot(a.final_activation, b.final_activation) *
                   dot(a.loss_saliency, b.loss_saliency);
    }
    return r;
}

// TF-IDF similarity times the loss-saliency dot product.
inline InfluenceResult tracin_tfidf(const TfIdfModel& tfidf, const GradientStore& store,
                                    const StepEtas& etas, const Example& train_ex,
                                    const Example& test_ex) {
    InfluenceResult r;
    r.train_id = train_ex.id;
    r.test_id = test_ex.id;
    r.method = "tracin_tfidf";
    const double sim = tfidf_cosine(tfidf, train_ex, test_ex);
    for (const auto& [step, eta] : etas) {
        r.checkpoints_used.push_back(step);
        const auto& a = store.find(train_ex.id, step);
        const auto& b = store.find(test_ex.id, step);
        r.score += eta * sim * dot(a.loss_saliency, b.loss_saliency);
    }
    return r;
}

// Dense on-the-fly TracIn over an arbitrary layer selection; the reference
// route for the sparse implementations.
inline InfluenceResult tracin(const CheckpointSet& cks, const Example& train_ex,
                              const Example& test_ex, const LayerSelector& sel) {
    sel.check(cks.cfg);
    InfluenceResult r;
    r.train_id = train_ex.id;
    r.test_id = test_ex.id;
    r.method = "tracin";
    for (const Checkpoint* ck : cks.selected()) {
        r.checkpoints_used.push_back(ck->step);
        Model m{cks.cfg, ck->theta};
        std::vector<double> ga = param_grads(m, train_ex, sel);
        std::vector<double> gb = param_grads(m, test_ex, sel);
        r.score += ck->eta * dot(ga, gb);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Last-layer influence functions. The Hessian of the softmax cross-entropy
// w.r.t. the fc weights is assembled exactly from final activations and
// probabilities: block (c1,c2) equals sum_i S_i[c1,c2] * a_i a_i^T with
// S_i = diag(p_i) - p_i p_i^T, in the same [class][act] layout as fc_w.

struct LastLayerInfluenceConfig {
    double damping = 1e-3;
    double lambda_rep = 1e-3;
    int target_class = -1;  // -1: use the test example's groundtruth label

    void check() const {
        if (damping < 0) throw ConfigError("damping must be >= 0");
        if (lambda_rep <= 0) throw ConfigError("lambda_rep must be > 0");
    }
};

inline std::vector<double> build_fc_hessian(const std::vector<std::vector<double>>& acts,
                                            const std::vector<std::vector<double>>& probs,
                                            int act_dim, int num_classes) {
    const std::size_t p = static_cast<std::size_t>(act_dim) * num_classes;
    std::vector<double> h(p * p, 0.0);
    for (std::size_t i = 0; i < acts.size(); ++i) {
        const auto& a = acts[i];
        const auto& pr = probs[i];
        for (int c1 = 0; c1 < num_classes; ++c1) {
            for (int c2 = 0; c2 < num_classes; ++c2) {
                double s = (c1 == c2 ? pr[static_cast<std::size_t>(c1)] : 0.0) -
                           pr[static_cast<std::size_t>(c1)] * pr[static_cast<std::size_t>(c2)];
                if (s == 0.0) continue;
                for (int j1 = 0; j1 < act_dim; ++j1) {
                    double sa = s * a[static_cast<std::size_t>(j1)];
                    if (sa == 0.0) continue;
                    double* row = &h[(static_cast<std::size_t>(c1) * act_dim + j1) * p +
                                     static_cast<std::size_t>(c2) * act_dim];
                    for (int j2 = 0; j2 < act_dim; ++j2)
                        row[j2] += sa * a[static_cast<std::size_t>(j2)];
                }
            }
        }
    }
    return h;
}

class FcInfluence {
public:
    // H + damping*I must be positive definite; Cholesky enforces it.
    FcInfluence(std::vector<double> hessian, std::size_t p, double damping)
        : chol_([&] {
              for (std::size_t i = 0; i < p; ++i) hessian[i * p + i] += damping;
              return Cholesky(std::move(hessian), p);
          }()) {}

    // score = g_train^T (H + dI)^{-1} g_test, proponent-positive.
    double score(const std::vector<double>& g_train, const std::vector<double>& g_test) const {
        return dot(g_train, chol_.solve(g_test));
    }

    std::vector<double> preconditioned(const std::vector<double>& g_test) const {
        return chol_.solve(g_test);
    }

    std::size_t dim() const { return chol_.dim(); }

private:
    Cholesky chol_;
};

// fc weight gradient (saliency ⊗ activation) at the given model.
inline std::vector<double> fc_weight_grad(const Model& m, const Example& e) {
    ForwardTrace t = forward(m, e.token_ids);
    const int act = m.cfg.act_dim();
    std::vector<double> sal = t.probs;
    sal[static_cast<std::size_t>(e.label)] -= 1.0;
    std::vector<double> g(static_cast<std::size_t>(m.cfg.num_classes) * act);
    for (int c = 0; c < m.cfg.num_classes; ++c)
        for (int j = 0; j < act; ++j)
            g[static_cast<std::size_t>(c) * act + j] =
                sal[static_cast<std::size_t>(c)] * t.pooled[static_cast<std::size_t>(j)];
    return g;
}

inline FcInfluence build_last_layer_influence(const Model& final_model, const Dataset& train,
                                              const LastLayerInfluenceConfig& cfg) {
    cfg.check();
    std::vector<std::vector<double>> acts, probs;
    acts.reserve(train.size());
    probs.reserve(train.size());
    for (const auto& e : train.examples) {
        ForwardTrace t = forward(final_model, e.token_ids);
        acts.push_back(t.pooled);
        probs.push_back(t.probs);
    }
    const int act_dim = final_model.cfg.act_dim();
    const int C = final_model.cfg.num_classes;
    std::vector<double> h = build_fc_hessian(acts, probs, act_dim, C);
    return FcInfluence(std::move(h), static_cast<std::size_t>(act_dim) * C, cfg.damping);
}

inline InfluenceResult influence_last(const FcInfluence& fci, const Model& final_model,
                                      const Example& train_ex, const Example& test_ex) {
    InfluenceResult r;
    r.train_id = train_ex.id;
    r.test_id = test_ex.id;
    r.method = "influence_last";
    r.score = fci.score(fc_weight_grad(final_model, train_ex),
                        fc_weight_grad(final_model, test_ex));
    return r;
}

// Representer point score, proponent-positive per the stored convention:
// -(1/2 lambda n) dL/df_j(train) <a(train), a(test)>, j = target class.
inline InfluenceResult representer(const Model& final_model, const Example& train_ex,
                                   const Example& test_ex, std::size_t n_train,
                                   const LastLayerInfluenceConfig& cfg) {
    cfg.check();
    ForwardTrace ta = forward(final_model, train_ex.token_ids);
    ForwardTrace tb = forward(final_model, test_ex.token_ids);
    int j = cfg.target_class >= 0 ? cfg.target_class : test_ex.label;
    if (j < 0 || j >= final_model.cfg.num_classes)
        throw ConfigError("representer target class out of range");
    double sal_j = ta.probs[static_cast<std::size_t>(j)] - (train_ex.label == j ? 1.0 : 0.0);
    InfluenceResult r;
    r.train_id = train_ex.id;
    r.test_id = test_ex.id;
    r.method = "representer";
    r.score = -sal_j * dot(ta.pooled, tb.pooled) /
              (2.0 * cfg.lambda_rep * static_cast<double>(n_train));
    return r;
}

// ---------------------------------------------------------------------------
// Ranking and influence distance.

struct Ranking {
    std::vector<std::pair<int, double>> proponents;  // score desc, ties by id
    std::vector<std::pair<int, double>> opponents;   // score asc, ties by id
};

inline Ranking rank(std::vector<std::pair<int, double>> scores) {
    Ranking r;
    r.proponents = scores;
    std::sort(r.proponents.begin(), r.proponents.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    r.opponents = std::move(scores);
    std::sort(r.opponents.begin(), r.opponents.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return a.first < b.first;
    });
    return r;
}

// Inf-dis(a, b) = max(1 - I(a,b)/sqrt(I(a,a) I(b,b)), 0). Only the whole
// expression is clamped at 0, so strongly negative influence yields values
// above 1.
inline double influence_distance(double i_ab, double i_aa, double i_bb) {
    if (i_aa <= 0.0 || i_bb <= 0.0)
        throw std::runtime_error("influence distance needs positive self-influence");
    return std::max(1.0 - i_ab / std::sqrt(i_aa * i_bb), 0.0);
}

struct DistanceMatrix {
    std::vector<int> ids;
    std::vector<double> d;  // n x n row-major, symmetric

    double at(std::size_t i, std::size_t j) const { return d[i * ids.size() + j]; }

    void check_symmetric() const {
        const std::size_t n = ids.size();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (d[i * n + j] != d[j * n + i])
                    throw std::runtime_error("distance matrix is not symmetric");
    }
};

// Builds the Inf-dis matrix from a symmetric pair scorer.
inline DistanceMatrix influence_distance_matrix(
    const std::vector<int>& ids, const std::function<double(int, int)>& pair_score) {
    DistanceMatrix m;
    m.ids = ids;
    const std::size_t n = ids.size();
    m.d.assign(n * n, 0.0);
    std::vector<double> self(n);
    for (std::size_t i = 0; i < n; ++i) self[i] = pair_score(ids[i], ids[i]);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = influence_distance(pair_score(ids[i], ids[j]), self[i], self[j]);
            m.d[i * n + j] = v;
            m.d[j * n + i] = v;
        }
    }
    return m;
}

}  // namespace tdinf
