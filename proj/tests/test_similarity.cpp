#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tdinf/corpus.hpp"
#include "tdinf/rng.hpp"
#include "tdinf/similarity.hpp"

using namespace tdinf;
using Catch::Approx;

namespace {

Dataset docs_to_dataset(const std::vector<std::string>& texts, const Vocab& v) {
    Dataset d;
    d.num_classes = 2;
    int id = 0;
    for (const auto& t : texts) {
        Example e;
        e.id = id++;
        e.text = t;
        e.label = 0;
        e.token_ids = tokenize(t, v, 32);
        d.examples.push_back(e);
    }
    return d;
}

double brute_force_min(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            s += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

}  // namespace

TEST_CASE("tfidf cosine basics", "[similarity]") {
    std::vector<std::string> texts = {"red apple pie", "red apple pie", "green tea leaf"};
    Vocab v = build_vocab(texts, {});
    Dataset d = docs_to_dataset(texts, v);
    TfIdfModel m = tfidf_fit(d);

    CHECK(tfidf_cosine(m, d.examples[0], d.examples[1]) == Approx(1.0).epsilon(1e-12));
    CHECK(tfidf_cosine(m, d.examples[0], d.examples[2]) == 0.0);

    Example empty;
    empty.id = 99;
    empty.label = 0;
    empty.token_ids = tokenize("", v, 32);
    CHECK(tfidf_cosine(m, d.examples[0], empty) == 0.0);
}

TEST_CASE("tfidf matches a pencil and paper three document corpus", "[similarity]") {
    // docs: "a b", "a c", "a" with idf(t) = ln((1+N)/(1+df)) + 1, N = 3
    std::vector<std::string> texts = {"apple banana", "apple cherry", "apple"};
    Vocab v = build_vocab(texts, {});
    Dataset d = docs_to_dataset(texts, v);
    TfIdfModel m = tfidf_fit(d);

    const double idf_a = std::log(4.0 / 4.0) + 1.0;  // df = 3
    const double idf_b = std::log(4.0 / 2.0) + 1.0;  // df = 1
    CHECK(m.idf.at(v.id_of("apple")) == Approx(idf_a).epsilon(1e-12));
    CHECK(m.idf.at(v.id_of("banana")) == Approx(idf_b).epsilon(1e-12));

    // doc0 = (a: idf_a, b: idf_b), doc1 = (a: idf_a, c: idf_b)
    double want01 = idf_a * idf_a / (idf_a * idf_a + idf_b * idf_b);
    CHECK(tfidf_cosine(m, d.examples[0], d.examples[1]) == Approx(want01).epsilon(1e-12));
    // doc0 vs doc2 = (a) only
    double want02 = idf_a / std::sqrt(idf_a * idf_a + idf_b * idf_b);
    CHECK(tfidf_cosine(m, d.examples[0], d.examples[2]) == Approx(want02).epsilon(1e-12));

    // symmetry and range over all pairs
    for (const auto& a : d.examples)
        for (const auto& b : d.examples) {
            double s = tfidf_cosine(m, a, b);
            CHECK(s == tfidf_cosine(m, b, a));
            CHECK(s >= 0.0);
            CHECK(s <= 1.0 + 1e-12);
        }
}

TEST_CASE("tfidf json round trip", "[similarity]") {
    std::vector<std::string> texts = {"x y z", "x y", "x"};
    Vocab v = build_vocab(texts, {});
    TfIdfModel m = tfidf_fit(docs_to_dataset(texts, v));
    TfIdfModel m2 = tfidf_from_json(tfidf_to_json(m));
    CHECK(m2.doc_count == m.doc_count);
    CHECK(m2.idf == m.idf);
}

TEST_CASE("syn predicate over a small embedding table", "[similarity]") {
    const int d = 4;
    // rows: 0 zero, 1 e1, 2 e2, 3 = 0.9-correlated with e1
    std::vector<double> emb = {
        0, 0, 0, 0,
        1, 0, 0, 0,
        0, 1, 0, 0,
        0.9, std::sqrt(1 - 0.81), 0, 0,
    };
    SynConfig cfg;
    cfg.threshold = 0.7;

    CHECK(syn(1, 1, emb, d, cfg));          // identity
    CHECK(syn(0, 0, emb, d, cfg));          // identity wins even for zero norm
    CHECK_FALSE(syn(1, 2, emb, d, cfg));    // orthogonal
    CHECK(syn(1, 3, emb, d, cfg));          // cos = 0.9
    CHECK(syn(3, 1, emb, d, cfg));          // symmetric
    CHECK_FALSE(syn(0, 1, emb, d, cfg));    // zero-norm never matches

    // oracle sweep over every pair
    Rng rng(123);
    const int n = 50;
    std::vector<double> table(static_cast<std::size_t>(n) * d);
    for (auto& x : table) x = rng.uniform(-1, 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double na = 0, nb = 0, dp = 0;
            for (int c = 0; c < d; ++c) {
                na += table[static_cast<std::size_t>(i) * d + c] * table[static_cast<std::size_t>(i) * d + c];
                nb += table[static_cast<std::size_t>(j) * d + c] * table[static_cast<std::size_t>(j) * d + c];
                dp += table[static_cast<std::size_t>(i) * d + c] * table[static_cast<std::size_t>(j) * d + c];
            }
            bool want = i == j || dp / std::sqrt(na * nb) > cfg.threshold;
            CHECK(syn(i, j, table, d, cfg) == want);
        }

    SynConfig bad;
    bad.threshold = 0.0;
    CHECK_THROWS_AS(bad.check(), ConfigError);
}

TEST_CASE("assignment solver basics", "[similarity]") {
    // diagonal-dominant: identity is optimal
    std::vector<std::vector<double>> diag = {
        {-5, 0, 0}, {0, -4, 0}, {0, 0, -6}};
    Assignment a = solve_assignment(diag);
    CHECK(a.mapping == std::vector<int>{0, 1, 2});
    CHECK(a.objective == Approx(-15.0));

    Assignment single = solve_assignment({{3.5}});
    CHECK(single.mapping == std::vector<int>{0});
    CHECK(single.objective == Approx(3.5));

    CHECK_THROWS_AS(solve_assignment({{1, 2}, {3}}), ConfigError);
    CHECK_THROWS_AS(solve_assignment({}), ConfigError);
    std::vector<std::vector<double>> nan_cost = {{std::nan(""), 1}, {1, 0}};
    CHECK_THROWS_AS(solve_assignment(nan_cost), ConfigError);
}

TEST_CASE("assignment matches brute force on random matrices", "[similarity]") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        int k = 1 + static_cast<int>(rng.next_below(6));
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(k),
                                              std::vector<double>(static_cast<std::size_t>(k)));
        for (auto& row : cost)
            for (auto& x : row) x = rng.uniform(-10, 10);
        Assignment a = solve_assignment(cost);
        double want = brute_force_min(cost);
        CHECK(a.objective == Approx(want).margin(1e-9));

        // sanity bound: never worse than the identity assignment
        double ident = 0.0;
        for (int i = 0; i < k; ++i)
            ident += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
        CHECK(a.objective <= ident + 1e-12);

        // bijectivity
        std::set<int> seen(a.mapping.begin(), a.mapping.end());
        CHECK(static_cast<int>(seen.size()) == k);
    }
}
