#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tdinf/corpus.hpp"
#include "tdinf/diagnostics.hpp"
#include "tdinf/model.hpp"
#include "tdinf/rng.hpp"
#include "tdinf/synth.hpp"

using namespace tdinf;
using Catch::Approx;

namespace {

struct Fixture {
    Vocab vocab;
    Dataset data;
    ModelConfig cfg;

    Fixture(std::uint64_t seed = 70, int size = 40, int classes = 2, bool frozen = false) {
        SynthSpec spec;
        spec.size = size;
        spec.num_classes = classes;
        spec.seed = seed;
        auto corpus = synth_corpus(spec);
        std::vector<std::string> texts;
        for (const auto& r : corpus.records) texts.push_back(r.text);
        vocab = build_vocab(texts, {});
        data = encode_dataset(corpus.records, vocab, build_label_map(corpus.records), 20);
        cfg.vocab_size = vocab.size();
        cfg.embed_dim = 16;
        cfg.conv_specs = {{5, 6}, {5, 6}, {1, 6}};
        cfg.num_classes = classes;
        cfg.seed = seed;
        cfg.freeze_embeddings = frozen;
    }
};

}  // namespace

TEST_CASE("weight delta basics and the frozen embedding case", "[diagnostics]") {
    Fixture f(70, 40, 2, true);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 3;
    h.batch_size = 8;
    h.lr = 0.05;
    TrainResult r = train(m, f.data, h);

    auto d_emb = weight_delta(r.checkpoints, "embedding");
    REQUIRE(d_emb.size() == 3);
    for (double v : d_emb) CHECK(v == 0.0);

    // independent flatten-and-norm oracle for a weight group
    auto d_fc = weight_delta(r.checkpoints, "fc_w");
    for (std::size_t c = 0; c + 1 < r.checkpoints.checkpoints.size(); ++c) {
        const auto& a = r.checkpoints.checkpoints[c].theta.fc_w;
        const auto& b = r.checkpoints.checkpoints[c + 1].theta.fc_w;
        double sq = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sq += (b[i] - a[i]) * (b[i] - a[i]);
        CHECK(d_fc[c] == Approx(std::sqrt(sq)).epsilon(1e-12));
    }

    CHECK_THROWS_AS(weight_delta(r.checkpoints, "nope"), ConfigError);
}

TEST_CASE("single step without momentum gives delta = eta grad norm and C = 1",
          "[diagnostics]") {
    Fixture f(71);
    Model m = init_model(f.cfg);
    Dataset one;
    one.num_classes = f.data.num_classes;
    one.examples = {f.data.examples[3]};

    TrainHyper h;
    h.epochs = 1;
    h.batch_size = 1;
    h.lr = 0.07;
    h.momentum = 0.0;
    Model trained = m;
    TrainResult r = train(trained, one, h);

    ModelGrads g = backward(m, one.examples[0].token_ids, one.examples[0].label);
    for (const std::string& group : {"conv1_w", "fc_w", "all_weight", "all_bias"}) {
        auto deltas = weight_delta(r.checkpoints, group);
        REQUIRE(deltas.size() == 1);
        CHECK(deltas[0] == Approx(h.lr * group_grad_norm(g, f.cfg, group)).epsilon(1e-12));

        CancellationReport rep = cancellation_ratio(r.checkpoints, one, group);
        REQUIRE(rep.defined);
        CHECK(rep.ratio == Approx(1.0).epsilon(1e-9));
    }

    // frozen group reports undefined
    Fixture fz(71, 40, 2, true);
    Model mz = init_model(fz.cfg);
    TrainResult rz = train(mz, fz.data, h);
    CancellationReport frozen = cancellation_ratio(rz.checkpoints, fz.data, "embedding");
    CHECK_FALSE(frozen.defined);
}

TEST_CASE("grad norm sums scale with eta and vanish for saturated models",
          "[diagnostics]") {
    Fixture f(72);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    h.lr = 0.05;
    TrainResult r = train(m, f.data, h);

    auto g1 = grad_norm_sum(r.checkpoints, f.data, "fc_w");
    CheckpointSet doubled = r.checkpoints;
    for (auto& ck : doubled.checkpoints) ck.eta *= 2.0;
    auto g2 = grad_norm_sum(doubled, f.data, "fc_w");
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == Approx(2.0 * g1[i]).epsilon(1e-12));

    // saturated softmax: gradients are exactly zero
    Dataset all_zero = f.data;
    for (auto& e : all_zero.examples) e.label = 0;
    CheckpointSet sat;
    sat.cfg = f.cfg;
    Model conf = init_model(f.cfg);
    conf.p.fc_b[0] += 500.0;
    sat.checkpoints.push_back({0, 0.05, conf.p});
    sat.checkpoints.push_back({1, 0.05, conf.p});
    sat.selection = {0};
    auto gz = grad_norm_sum(sat, all_zero, "fc_w");
    REQUIRE(gz.size() == 1);
    CHECK(gz[0] == 0.0);
}

TEST_CASE("parallel grad norm sums match the serial path", "[diagnostics]") {
    Fixture f(73);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    h.lr = 0.05;
    TrainResult r = train(m, f.data, h);
    auto serial = grad_norm_sum(r.checkpoints, f.data, "all_weight", 1);
    auto parallel = grad_norm_sum(r.checkpoints, f.data, "all_weight", 4);
    CHECK(serial == parallel);
}

TEST_CASE("group norms decompose over disjoint blocks", "[diagnostics]") {
    Fixture f(74);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    h.lr = 0.05;
    TrainResult r = train(m, f.data, h);

    auto d_all = weight_delta(r.checkpoints, "all_weight");
    auto d1 = weight_delta(r.checkpoints, "conv1_w");
    auto d2 = weight_delta(r.checkpoints, "conv2_w");
    auto d3 = weight_delta(r.checkpoints, "conv3_w");
    auto dfc = weight_delta(r.checkpoints, "fc_w");
    for (std::size_t c = 0; c < d_all.size(); ++c) {
        double want = std::sqrt(d1[c] * d1[c] + d2[c] * d2[c] + d3[c] * d3[c] + dfc[c] * dfc[c]);
        CHECK(d_all[c] == Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("example 3.1 style one hot regression: bias cancels, weights do not",
          "[diagnostics]") {
    // f(x) = w.x + b on one-hot inputs, squared loss, balanced labels. The
    // bias gradient sums to ~0 across the data while per-example bias
    // gradients stay large, so C(bias) >> C(weight).
    const int n = 32;
    std::vector<double> w(n, 0.0);
    double b = 0.0;
    std::vector<double> y(n);
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i % 2 == 0 ? 1.0 : -1.0;

    const double lr = 0.05;
    const int batch = 16;  // minibatches keep the bias jiggling slightly
    const int epochs = 12;
    std::vector<double> delta_w, delta_b, g_w, g_b;
    Rng order_rng(99);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int ep = 0; ep < epochs; ++ep) {
        // G at the epoch-opening parameters
        double gw_sum = 0.0, gb_sum = 0.0;
        for (int i = 0; i < n; ++i) {
            double resid = w[static_cast<std::size_t>(i)] + b - y[static_cast<std::size_t>(i)];
            gw_sum += lr * std::abs(resid);  // grad w_i = resid on its own coordinate
            gb_sum += lr * std::abs(resid);
        }
        g_w.push_back(gw_sum);
        g_b.push_back(gb_sum);

        std::vector<double> w0 = w;
        double b0 = b;
        order_rng.shuffle(order);
        for (int start = 0; start < n; start += batch) {
            int end = std::min(start + batch, n);
            std::vector<double> gw(static_cast<std::size_t>(n), 0.0);
            double gb = 0.0;
            for (int k = start; k < end; ++k) {
                int i = order[static_cast<std::size_t>(k)];
                double resid = w[static_cast<std::size_t>(i)] + b - y[static_cast<std::size_t>(i)];
                gw[static_cast<std::size_t>(i)] += resid / (end - start);
                gb += resid / (end - start);
            }
            for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] -= lr * gw[static_cast<std::size_t>(i)];
            b -= lr * gb;
        }

        double dw = 0.0;
        for (int i = 0; i < n; ++i)
            dw += (w[static_cast<std::size_t>(i)] - w0[static_cast<std::size_t>(i)]) *
                  (w[static_cast<std::size_t>(i)] - w0[static_cast<std::size_t>(i)]);
        delta_w.push_back(std::sqrt(dw));
        delta_b.push_back(std::abs(b - b0));
    }

    CancellationReport cw = cancellation_from_series("weight", delta_w, g_w);
    CancellationReport cb = cancellation_from_series("bias", delta_b, g_b);
    REQUIRE(cw.defined);
    REQUIRE(cb.defined);
    CHECK(cb.ratio > 10.0 * cw.ratio);
}

TEST_CASE("layer cosine is one for identical examples and matches a pair oracle",
          "[diagnostics]") {
    Fixture f(75);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    h.lr = 0.05;
    train(m, f.data, h);

    // a dataset of copies: every sampled pair is identical
    Dataset clones;
    clones.num_classes = f.data.num_classes;
    for (int i = 0; i < 6; ++i) {
        Example e = f.data.examples[4];
        e.id = 100 + i;
        clones.examples.push_back(e);
    }
    auto means = layer_grad_cosine_means(m, clones, 20, 5);
    for (const auto& [layer, v] : means) CHECK(v == Approx(1.0).epsilon(1e-9));

    // oracle on 10 sampled pairs, same sampling stream
    auto per = layer_grad_cosines(m, f.data, 10, 77);
    Rng rng(77, "cosine-pairs");
    for (int p = 0; p < 10; ++p) {
        int i = static_cast<int>(rng.next_below(f.data.size()));
        int j = static_cast<int>(rng.next_below(f.data.size() - 1));
        if (j >= i) ++j;
        ModelGrads ga = backward(m, f.data.examples[static_cast<std::size_t>(i)].token_ids,
                                 f.data.examples[static_cast<std::size_t>(i)].label);
        ModelGrads gb = backward(m, f.data.examples[static_cast<std::size_t>(j)].token_ids,
                                 f.data.examples[static_cast<std::size_t>(j)].label);
        CHECK(per.at("fc_w")[static_cast<std::size_t>(p)] ==
              Approx(cosine(ga.fc_w, gb.fc_w)).margin(1e-12));
        CHECK(per.at("conv2_w")[static_cast<std::size_t>(p)] ==
              Approx(cosine(ga.convs[1].w, gb.convs[1].w)).margin(1e-12));
    }
}
