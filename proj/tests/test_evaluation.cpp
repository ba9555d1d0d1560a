#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tdinf/corpus.hpp"
#include "tdinf/evaluation.hpp"
#include "tdinf/gradients.hpp"
#include "tdinf/influence.hpp"
#include "tdinf/model.hpp"
#include "tdinf/synth.hpp"

using namespace tdinf;
using Catch::Approx;

namespace {

struct Harness {
    Vocab vocab;
    Dataset train_set;
    Dataset test_set;
    ModelConfig cfg;
    RetrainProtocol proto;
    CheckpointSet cks;
    GradientStore store;

    Harness(std::uint64_t seed = 80, int size = 90) {
        SynthSpec spec;
        spec.size = size;
        spec.num_classes = 2;
        spec.seed = seed;
        auto corpus = synth_corpus(spec);
        std::vector<std::string> texts;
        for (const auto& r : corpus.records) texts.push_back(r.text);
        vocab = build_vocab(texts, {});
        Dataset all = encode_dataset(corpus.records, vocab, build_label_map(corpus.records), 20);
        Splits s = split(all, seed, {0.8, 0.1, 0.1});
        train_set = std::move(s.train);
        test_set = std::move(s.test);

        cfg.vocab_size = vocab.size();
        cfg.embed_dim = 12;
        cfg.conv_specs = {{5, 4}, {5, 4}, {1, 4}};
        cfg.num_classes = 2;
        cfg.seed = seed;

        proto.model_cfg = cfg;
        proto.hyper.epochs = 3;
        proto.hyper.batch_size = 8;
        proto.hyper.lr = 0.05;
        proto.base_seed = 500;
        proto.repeats = 3;
        proto.n_threads = 2;

        Model m = init_model(cfg);
        TrainResult r = train(m, train_set, proto.hyper);
        cks = std::move(r.checkpoints);
        cks.select_steps({1, 2, 3});
        Dataset both = train_set;
        for (const auto& e : test_set.examples) both.examples.push_back(e);
        store = build_store(cks, both, 0);
    }

    Ranking ranking_for(const Example& x_test) const {
        StepEtas etas = step_etas(cks);
        std::vector<std::pair<int, double>> scores;
        for (const auto& e : train_set.examples)
            scores.push_back({e.id, tracin_we(store, etas, e.id, x_test.id).score});
        return rank(scores);
    }
};

}  // namespace

TEST_CASE("auc is the grid mean with validation", "[evaluation]") {
    CHECK(auc({0.25, 0.25, 0.25}, {2, 5, 10}) == Approx(0.25));
    CHECK(auc({0.3, -0.1, 0.4}, {1, 2, 3}) == Approx((0.3 - 0.1 + 0.4) / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(auc({}, {}), ConfigError);
    CHECK_THROWS_AS(auc({0.1}, {1, 2}), ConfigError);
}

TEST_CASE("bootstrap se behaves sanely", "[evaluation]") {
    CHECK(bootstrap_se({3.0, 3.0, 3.0, 3.0}, 100, 1) == 0.0);
    double se = bootstrap_se({1.0, 2.0, 3.0, 4.0, 5.0}, 500, 1);
    CHECK(se > 0.2);
    CHECK(se < 1.5);
    // deterministic for a fixed seed
    CHECK(se == bootstrap_se({1.0, 2.0, 3.0, 4.0, 5.0}, 500, 1));
}

TEST_CASE("no overlap candidates select the least similar examples", "[evaluation]") {
    Harness h;
    TfIdfModel tfidf = tfidf_fit(h.train_set);
    const Example& x = h.test_set.examples[0];

    auto all = no_overlap_candidates(x, h.train_set, static_cast<int>(h.train_set.size()), tfidf);
    CHECK(all.size() == h.train_set.size());

    const int n = 10;
    auto picked = no_overlap_candidates(x, h.train_set, n, tfidf);
    REQUIRE(picked.size() == n);
    std::set<int> picked_set(picked.begin(), picked.end());
    double max_in = 0.0;
    for (int id : picked) max_in = std::max(max_in, tfidf_cosine(tfidf, h.train_set.by_id(id), x));
    for (const auto& e : h.train_set.examples) {
        if (picked_set.count(e.id)) continue;
        CHECK(tfidf_cosine(tfidf, e, x) >= max_in - 1e-12);
    }
}

TEST_CASE("the training order stream is shared between baseline and removal runs",
          "[evaluation]") {
    Harness h;
    std::set<int> removed = {h.train_set.examples[0].id, h.train_set.examples[5].id};

    std::uint64_t sum1 = 0, sum2 = 0;
    retrain_once(h.train_set, removed, h.cfg, h.proto.hyper, 321, &sum1);
    retrain_once(h.train_set, removed, h.cfg, h.proto.hyper, 321, &sum2);
    CHECK(sum1 == sum2);

    // independent oracle: replay the shuffle stream and filter survivors
    ModelConfig cfg = h.cfg;
    cfg.seed = 321;
    Rng rng(cfg.seed, "train-shuffle");
    std::vector<std::size_t> order(h.train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::uint64_t want = kFnvOffset;
    for (int epoch = 0; epoch < h.proto.hyper.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t idx : order) {
            int id = h.train_set.examples[idx].id;
            if (removed.count(id)) continue;
            want = fnv1a64(&id, sizeof(id), want);
        }
    }
    CHECK(sum1 == want);
}

TEST_CASE("deletion eval: k=0 vanishes, means are bit-checked, reruns identical",
          "[evaluation]") {
    Harness h;
    const Example& x = h.test_set.examples[1];
    Ranking r = h.ranking_for(x);
    std::vector<int> k_grid = {0, 2, 5};

    DeletionCurve c1 = deletion_eval(h.train_set, x, "tracin_we", r, k_grid, h.proto);
    DeletionCurve c2 = deletion_eval(h.train_set, x, "tracin_we", r, k_grid, h.proto);

    CHECK(std::abs(c1.del_plus[0]) < 1e-12);
    CHECK(std::abs(c1.del_minus[0]) < 1e-12);

    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
        CHECK(c1.del_plus[ki] == mean_of(c1.per_seed_plus[ki]));
        CHECK(c1.del_minus[ki] == mean_of(c1.per_seed_minus[ki]));
        CHECK(c1.per_seed_plus[ki].size() == static_cast<std::size_t>(h.proto.repeats));
    }
    CHECK(c1.auc_plus == auc(c1.del_plus, k_grid));

    // bitwise reproducibility including the parallel path
    CHECK(c1.del_plus == c2.del_plus);
    CHECK(c1.del_minus == c2.del_minus);
    CHECK(c1.per_seed_plus == c2.per_seed_plus);
    CHECK(c1.stderr_plus == c2.stderr_plus);

    CHECK_THROWS_AS(deletion_eval(h.train_set, x, "m", r,
                                  {static_cast<int>(h.train_set.size())}, h.proto),
                    ConfigError);
}

TEST_CASE("negating the method swaps del+ and del-", "[evaluation]") {
    Harness h;
    const Example& x = h.test_set.examples[2];
    StepEtas etas = step_etas(h.cks);
    std::vector<std::pair<int, double>> scores, negated;
    for (const auto& e : h.train_set.examples) {
        double s = tracin_we(h.store, etas, e.id, x.id).score;
        scores.push_back({e.id, s});
        negated.push_back({e.id, -s});
    }
    std::vector<int> k_grid = {2, 4};
    DeletionCurve cm = deletion_eval(h.train_set, x, "m", rank(scores), k_grid, h.proto);
    DeletionCurve cn = deletion_eval(h.train_set, x, "-m", rank(negated), k_grid, h.proto);
    CHECK(cm.per_seed_plus == cn.per_seed_minus);
    CHECK(cm.per_seed_minus == cn.per_seed_plus);
    CHECK(cm.del_plus == cn.del_minus);
    CHECK(cm.auc_plus == cn.auc_minus);
}

TEST_CASE("random removal control stays within noise", "[evaluation]") {
    Harness h(81, 120);
    const Example& x = h.test_set.examples[0];
    Rng rng(7, "control");
    std::vector<std::pair<int, double>> random_scores;
    for (const auto& e : h.train_set.examples)
        random_scores.push_back({e.id, rng.next_double()});
    RetrainProtocol proto = h.proto;
    proto.repeats = 4;
    DeletionCurve c =
        deletion_eval(h.train_set, x, "random", rank(random_scores), {3, 6}, proto);
    for (std::size_t ki = 0; ki < c.k_grid.size(); ++ki) {
        double se_p = bootstrap_se(c.per_seed_plus[ki], 300, 11);
        double se_m = bootstrap_se(c.per_seed_minus[ki], 300, 12);
        CHECK(std::abs(c.del_plus[ki]) <= 2.0 * std::max(se_p, 1e-3));
        CHECK(std::abs(c.del_minus[ki]) <= 2.0 * std::max(se_m, 1e-3));
    }
}

TEST_CASE("pad word edits touch exactly one token per sentence", "[evaluation]") {
    Harness h;
    std::vector<int> ids = {h.train_set.examples[1].id, h.train_set.examples[4].id};
    std::map<int, int> choice;
    for (int id : ids) {
        const Example& e = h.train_set.by_id(id);
        for (int t : e.token_ids)
            if (t >= kNumSpecials) {
                choice[id] = t;
                break;
            }
    }
    Dataset edited = pad_word_edit(h.train_set, ids, choice);
    int changed_sentences = 0;
    for (std::size_t i = 0; i < h.train_set.size(); ++i) {
        const auto& before = h.train_set.examples[i].token_ids;
        const auto& after = edited.examples[i].token_ids;
        int diffs = 0;
        for (std::size_t j = 0; j < before.size(); ++j)
            if (before[j] != after[j]) {
                ++diffs;
                CHECK(after[j] == kPadId);
            }
        if (diffs > 0) {
            CHECK(diffs == 1);
            ++changed_sentences;
        }
    }
    CHECK(changed_sentences == 2);
}

TEST_CASE("fix eval smoke: probabilities in range, baseline recorded, errors",
          "[evaluation]") {
    Harness h;
    const Example& x = h.test_set.examples[0];
    Ranking r = h.ranking_for(x);

    RetrainProtocol proto = h.proto;
    proto.repeats = 3;
    FixReport rep = fix_eval(h.train_set, x, "tracin_we", r, FixStrategy::RemoveExamples,
                             {2, 4}, proto);
    CHECK(rep.k_grid == std::vector<int>{2, 4});
    REQUIRE(rep.fix_prob.size() == 2);
    for (double p : rep.fix_prob) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
    CHECK(rep.baseline_flip_rate >= 0.0);
    CHECK(rep.baseline_flip_rate <= 1.0);
    CHECK(rep.strategy == "remove_examples");

    std::map<int, int> choice;
    for (int i = 0; i < 4; ++i) {
        int id = r.opponents[static_cast<std::size_t>(i)].first;
        for (int t : h.train_set.by_id(id).token_ids)
            if (t >= kNumSpecials) {
                choice[id] = t;
                break;
            }
    }
    FixReport rep2 = fix_eval(h.train_set, x, "tracin_we", r, FixStrategy::PadWord, {2, 4},
                              proto, &choice);
    CHECK(rep2.strategy == "pad_word");
    for (double p : rep2.fix_prob) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }

    Ranking empty;
    CHECK_THROWS_AS(
        fix_eval(h.train_set, x, "m", empty, FixStrategy::RemoveExamples, {2}, proto),
        ConfigError);
    CHECK_THROWS_AS(
        fix_eval(h.train_set, x, "m", r, FixStrategy::PadWord, {2}, proto, nullptr),
        ConfigError);
}

TEST_CASE("fixable precondition checks the band and the misclassification",
          "[evaluation]") {
    Harness h;
    Model m = init_model(h.cfg);
    TrainResult tr = train(m, h.train_set, h.proto.hyper);

    bool found_any = false;
    for (const auto& e : h.test_set.examples) {
        double p = predict_prob(m, e, e.label);
        bool mis = predict_class(m, e) != e.label;
        if (mis && p >= 0.2 && p <= 0.8) {
            CHECK_NOTHROW(check_fixable(m, e, 0.2, 0.8));
            found_any = true;
        } else if (!mis) {
            CHECK_THROWS_AS(check_fixable(m, e, 0.2, 0.8), ConfigError);
        }
    }
    (void)found_any;
}
