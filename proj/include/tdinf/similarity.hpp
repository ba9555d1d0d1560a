#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "tdinf/corpus.hpp"
#include "tdinf/linalg.hpp"
#include "tdinf/model.hpp"

namespace tdinf {

// ---------------------------------------------------------------------------
// TF-IDF. Terms are non-special token ids; [PAD]/[UNK]/[START]/[END] are
// excluded so that structurally unrelated sentences score 0. Weighting is
// raw term frequency times smoothed idf = ln((1+N)/(1+df)) + 1, vectors
// L2-normalized.

struct TfIdfModel {
    std::map<int, double> idf;
    long long doc_count = 0;
};

namespace detail {

inline std::map<int, int> term_counts(const Example& e) {
    std::map<int, int> tf;
    for (int t : e.token_ids)
        if (t >= kNumSpecials) ++tf[t];
    return tf;
}

}  // namespace detail

inline TfIdfModel tfidf_fit(const Dataset& train) {
    TfIdfModel m;
    m.doc_count = static_cast<long long>(train.size());
    std::map<int, long long> df;
    for (const auto& e : train.examples)
        for (const auto& [term, n] : detail::term_counts(e)) ++df[term];
    for (const auto& [term, d] : df)
        m.idf[term] = std::log((1.0 + static_cast<double>(m.doc_count)) /
                               (1.0 + static_cast<double>(d))) +
                      1.0;
    return m;
}

inline double tfidf_cosine(const TfIdfModel& m, const Example& a, const Example& b) {
    auto ta = detail::term_counts(a);
    auto tb = detail::term_counts(b);
    auto weight = [&](int term, int tf) {
        auto it = m.idf.find(term);
        // unseen terms get the maximal smoothed idf
        double idf = it != m.idf.end()
                         ? it->second
                         : std::log(1.0 + static_cast<double>(m.doc_count)) + 1.0;
        return static_cast<double>(tf) * idf;
    };
    double na = 0.0, nb = 0.0, dp = 0.0;
    for (const auto& [term, tf] : ta) {
        double w = weight(term, tf);
        na += w * w;
    }
    for (const auto& [term, tf] : tb) {
        double w = weight(term, tf);
        nb += w * w;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    for (const auto& [term, tf] : ta) {
        auto it = tb.find(term);
        if (it != tb.end()) dp += weight(term, tf) * weight(term, it->second);
    }
    return dp / (std::sqrt(na) * std::sqrt(nb));
}

inline json tfidf_to_json(const TfIdfModel& m) {
    json idf = json::object();
    for (const auto& [term, v] : m.idf) idf[std::to_string(term)] = v;
    return json{{"doc_count", m.doc_count}, {"idf", idf}};
}

inline TfIdfModel tfidf_from_json(const json& j) {
    TfIdfModel m;
    m.doc_count = j.at("doc_count").get<long long>();
    for (auto it = j.at("idf").begin(); it != j.at("idf").end(); ++it)
        m.idf[std::stoi(it.key())] = it.value().get<double>();
    return m;
}

// ---------------------------------------------------------------------------
// Synonyms: cosine similarity of embedding rows above a threshold.

struct SynConfig {
    double threshold = 0.7;
    int embedding_step = -1;  // which checkpoint's embeddings; -1 = last selected

    void check() const {
        if (threshold <= 0.0 || threshold > 1.0)
            throw ConfigError("syn threshold must be in (0, 1]");
    }
};

inline double embedding_cosine(const std::vector<double>& embedding, int embed_dim, int w1,
                               int w2) {
    const double* a = &embedding[static_cast<std::size_t>(w1) * embed_dim];
    const double* b = &embedding[static_cast<std::size_t>(w2) * embed_dim];
    double na = 0.0, nb = 0.0, dp = 0.0;
    for (int c = 0; c < embed_dim; ++c) {
        na += a[c] * a[c];
        nb += b[c] * b[c];
        dp += a[c] * b[c];
    }
    if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return dp / (std::sqrt(na) * std::sqrt(nb));
}

// syn(w, w) is true by definition; zero-norm embeddings never match.
inline bool syn(int w1, int w2, const std::vector<double>& embedding, int embed_dim,
                const SynConfig& cfg) {
    if (w1 == w2) return true;
    double c = embedding_cosine(embedding, embed_dim, w1, w2);
    if (std::isnan(c)) return false;
    return c > cfg.threshold;
}

// ---------------------------------------------------------------------------
// Exact minimum-cost assignment (Hungarian algorithm, O(k^3) shortest
// augmenting paths). Small k only; the brute-force oracle in the tests pins
// exactness.

struct Assignment {
    std::vector<int> mapping;  // row i -> column mapping[i]
    double objective = 0.0;
};

inline Assignment solve_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) throw ConfigError("assignment: empty cost matrix");
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != n)
            throw ConfigError("assignment: cost matrix must be square");
        for (double v : row)
            if (!std::isfinite(v)) throw ConfigError("assignment: cost must be finite");
    }

    const double inf = std::numeric_limits<double>::infinity();
    // 1-based potentials/matching, e-maxx formulation
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
    std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);

    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = p[static_cast<std::size_t>(j0)], j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                             u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    Assignment a;
    a.mapping.assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        a.mapping[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    for (int i = 0; i < n; ++i)
        a.objective +=
            cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(a.mapping[static_cast<std::size_t>(i)])];
    return a;
}

}  // namespace tdinf
