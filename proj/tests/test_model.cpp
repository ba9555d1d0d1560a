#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tdinf/corpus.hpp"
#include "tdinf/gradients.hpp"
#include "tdinf/model.hpp"
#include "tdinf/synth.hpp"

using namespace tdinf;
using Catch::Approx;

namespace {

struct Fixture {
    Vocab vocab;
    Dataset data;
    ModelConfig cfg;
};

// Small corpus + model sized for finite differences.
Fixture small_fixture(std::uint64_t seed = 42, int num_classes = 3, int size = 40,
                      int embed_dim = 16) {
    SynthSpec spec;
    spec.size = size;
    spec.num_classes = num_classes;
    spec.seed = seed;
    auto corpus = synth_corpus(spec);
    std::vector<std::string> texts;
    for (const auto& r : corpus.records) texts.push_back(r.text);
    Fixture f;
    f.vocab = build_vocab(texts, {});
    LabelMap lm = build_label_map(corpus.records);
    f.data = encode_dataset(corpus.records, f.vocab, lm, 20);
    f.cfg.vocab_size = f.vocab.size();
    f.cfg.embed_dim = embed_dim;
    f.cfg.conv_specs = {{5, 6}, {5, 6}, {1, 6}};
    f.cfg.num_classes = num_classes;
    f.cfg.seed = seed;
    return f;
}

double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
    REQUIRE(got.size() == want.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num += (got[i] - want[i]) * (got[i] - want[i]);
        den += want[i] * want[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// Central finite differences of the loss w.r.t. one parameter vector.
std::vector<double> finite_diff(Model& m, const Example& e, std::vector<double>& theta,
                                double h = 1e-4) {
    std::vector<double> fd(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        double keep = theta[i];
        theta[i] = keep + h;
        double up = loss(m, e);
        theta[i] = keep - h;
        double down = loss(m, e);
        theta[i] = keep;
        fd[i] = (up - down) / (2.0 * h);
    }
    return fd;
}

}  // namespace

TEST_CASE("init is deterministic with zero biases", "[model]") {
    Fixture f = small_fixture();
    Model a = init_model(f.cfg);
    Model b = init_model(f.cfg);
    CHECK(a.p.embedding == b.p.embedding);
    CHECK(a.p.fc_w == b.p.fc_w);
    for (std::size_t li = 0; li < a.p.convs.size(); ++li) {
        CHECK(a.p.convs[li].w == b.p.convs[li].w);
        for (double x : a.p.convs[li].b) CHECK(x == 0.0);
    }
    for (double x : a.p.fc_b) CHECK(x == 0.0);

    ModelConfig other = f.cfg;
    other.seed += 1;
    Model c = init_model(other);
    CHECK(c.p.embedding != a.p.embedding);
}

TEST_CASE("parameter counting matches the layer formulas", "[model]") {
    ModelConfig cfg;
    cfg.vocab_size = 100;
    cfg.embed_dim = 128;
    cfg.conv_specs = {{5, 10}, {5, 10}, {1, 10}};
    cfg.num_classes = 4;
    ParamCount pc = count_params(cfg);
    // embed 100*128; conv1 5*128*10 + 10; conv2 5*10*10 + 10; conv3 1*10*10 + 10;
    // fc 10*4 + 4
    CHECK(pc.per_layer[0].second.first == 12800);
    CHECK(pc.per_layer[1].second == std::pair<long long, long long>{6400, 10});
    CHECK(pc.per_layer[2].second == std::pair<long long, long long>{500, 10});
    CHECK(pc.per_layer[3].second == std::pair<long long, long long>{100, 10});
    CHECK(pc.per_layer[4].second == std::pair<long long, long long>{40, 4});
    CHECK(pc.non_embedding == 6400 + 500 + 100 + 40 + 34);
    CHECK(pc.total == pc.non_embedding + 12800);
    CHECK(pc.total_bias == 34);
}

TEST_CASE("forward handles minimal and padded inputs", "[model]") {
    Fixture f = small_fixture();
    Model m = init_model(f.cfg);

    std::vector<int> pads(20, kPadId);
    pads[0] = kStartId;
    pads[1] = kEndId;
    ForwardTrace t = forward(m, pads);
    REQUIRE(t.n == 2);
    for (double l : t.logits) CHECK(std::isfinite(l));

    double sum = 0.0;
    for (double p : t.probs) sum += p;
    CHECK(sum == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("loss matches a standalone cross entropy and the uniform case", "[model]") {
    Fixture f = small_fixture(7, 4);
    ModelConfig cfg = f.cfg;
    cfg.num_classes = 4;
    Model zero = init_model(cfg);
    for (auto& x : zero.p.embedding) x = 0.0;
    for (auto& c : zero.p.convs)
        for (auto& x : c.w) x = 0.0;
    for (auto& x : zero.p.fc_w) x = 0.0;
    // all logits equal -> ln C
    CHECK(loss(zero, f.data.examples[0]) == Approx(std::log(4.0)).epsilon(1e-12));

    Model m = init_model(cfg);
    for (const auto& e : {f.data.examples[1], f.data.examples[2]}) {
        ForwardTrace t = forward(m, e.token_ids);
        // independent scalar recomputation
        double mx = *std::max_element(t.logits.begin(), t.logits.end());
        double z = 0.0;
        for (double l : t.logits) z += std::exp(l - mx);
        double want = -std::log(std::exp(t.logits[static_cast<std::size_t>(e.label)] - mx) / z);
        CHECK(loss(m, e) == Approx(want).epsilon(1e-12));
    }

    // pushing the correct-class logit up drives the loss to zero
    Model push = init_model(cfg);
    const Example& e = f.data.examples[3];
    ForwardTrace t0 = forward(push, e.token_ids);
    for (int j = 0; j < cfg.act_dim(); ++j)
        push.p.fc_w[static_cast<std::size_t>(e.label) * cfg.act_dim() + j] +=
            50.0 * (t0.pooled[static_cast<std::size_t>(j)] >= 0 ? 1.0 : -1.0);
    push.p.fc_b[static_cast<std::size_t>(e.label)] += 50.0;
    CHECK(loss(push, e) < 1e-6);
}

TEST_CASE("predict_prob is a softmax: normalized and shift invariant", "[model]") {
    Fixture f = small_fixture();
    Model m = init_model(f.cfg);
    const Example& e = f.data.examples[0];
    double sum = 0.0;
    for (int c = 0; c < f.cfg.num_classes; ++c) sum += predict_prob(m, e, c);
    CHECK(sum == Approx(1.0).epsilon(1e-12));

    double before = predict_prob(m, e, e.label);
    for (auto& b : m.p.fc_b) b += 3.25;  // constant shift of all logits
    CHECK(predict_prob(m, e, e.label) == Approx(before).epsilon(1e-9));

    CHECK_THROWS(predict_prob(m, e, f.cfg.num_classes));
}

TEST_CASE("analytic gradients match central finite differences", "[model]") {
    for (std::uint64_t draw = 0; draw < 3; ++draw) {
        Fixture f = small_fixture(100 + draw);
        Model m = init_model(f.cfg);
        // a couple of epochs move the biases off zero, away from the exact
        // ReLU/max-pool ties of the freshly initialized model
        TrainHyper pre;
        pre.epochs = 2;
        pre.batch_size = 8;
        pre.lr = 0.05;
        train(m, f.data, pre);
        const Example& e = f.data.examples[static_cast<std::size_t>(3 + 5 * draw)];
        ModelGrads g = backward(m, e.token_ids, e.label);

        // embedding rows of present words
        std::map<int, std::vector<double>> rows;
        for (const auto& pg : g.embed_positions) {
            auto [it, fresh] = rows.try_emplace(pg.word_id);
            if (fresh) it->second.assign(pg.g.size(), 0.0);
            for (std::size_t c = 0; c < pg.g.size(); ++c) it->second[c] += pg.g[c];
        }
        for (auto& [w, grad] : rows) {
            std::vector<double> row(m.p.embedding.begin() + w * f.cfg.embed_dim,
                                    m.p.embedding.begin() + (w + 1) * f.cfg.embed_dim);
            // perturb in place through a span into the real parameter vector
            std::vector<double> fd(grad.size());
            for (int c = 0; c < f.cfg.embed_dim; ++c) {
                double& slot = m.p.embedding[static_cast<std::size_t>(w) * f.cfg.embed_dim + c];
                double keep = slot;
                slot = keep + 1e-4;
                double up = loss(m, e);
                slot = keep - 1e-4;
                double down = loss(m, e);
                slot = keep;
                fd[static_cast<std::size_t>(c)] = (up - down) / 2e-4;
            }
            CHECK(rel_err(grad, fd) < 1e-4);
        }

        for (std::size_t li = 0; li < m.p.convs.size(); ++li) {
            CHECK(rel_err(g.convs[li].w, finite_diff(m, e, m.p.convs[li].w)) < 1e-4);
            CHECK(rel_err(g.convs[li].b, finite_diff(m, e, m.p.convs[li].b)) < 1e-4);
        }
        CHECK(rel_err(g.fc_w, finite_diff(m, e, m.p.fc_w)) < 1e-4);
        CHECK(rel_err(g.fc_b, finite_diff(m, e, m.p.fc_b)) < 1e-4);
    }
}

TEST_CASE("l2 gradients add exactly lambda theta", "[model]") {
    Fixture f = small_fixture(11);
    const Example& e = f.data.examples[5];

    ModelConfig with = f.cfg;
    with.l2_lambda = 0.01;
    Model m0 = init_model(f.cfg);
    Model m1 = init_model(with);
    REQUIRE(m0.p.fc_w == m1.p.fc_w);  // same seed, same init

    LayerSelector all = LayerSelector::all(f.cfg, true);
    auto g0 = param_grads(m0, e, all);
    auto g1 = param_grads(m1, e, all);

    // flatten theta in the same order to compare
    LayerSelector sel_emb = LayerSelector::only("embedding");
    std::vector<double> theta;
    theta.insert(theta.end(), m0.p.embedding.begin(), m0.p.embedding.end());
    for (const auto& c : m0.p.convs) {
        theta.insert(theta.end(), c.w.begin(), c.w.end());
        theta.insert(theta.end(), c.b.begin(), c.b.end());
    }
    theta.insert(theta.end(), m0.p.fc_w.begin(), m0.p.fc_w.end());
    theta.insert(theta.end(), m0.p.fc_b.begin(), m0.p.fc_b.end());

    REQUIRE(g0.size() == theta.size());
    for (std::size_t i = 0; i < g0.size(); ++i)
        CHECK(g1[i] - g0[i] == Approx(0.01 * theta[i]).margin(1e-12));
}

TEST_CASE("momentum sgd reproduces a hand stepped quadratic", "[model]") {
    // f(x, y) = x^2 + 0.25 y^2, gradient (2x, 0.5y)
    std::vector<double> theta = {1.0, -2.0}, vel = {0.0, 0.0};
    double hx = 1.0, hy = -2.0, vx = 0.0, vy = 0.0;
    const double lr = 0.1, mu = 0.9;
    for (int step = 0; step < 25; ++step) {
        momentum_sgd_step(theta, {2.0 * theta[0], 0.5 * theta[1]}, vel, lr, mu);
        vx = mu * vx + 2.0 * hx;
        vy = mu * vy + 0.5 * hy;
        hx -= lr * vx;
        hy -= lr * vy;
    }
    CHECK(theta[0] == Approx(hx).margin(1e-10));
    CHECK(theta[1] == Approx(hy).margin(1e-10));
}

TEST_CASE("one plain sgd step equals theta minus lr grad", "[model]") {
    Fixture f = small_fixture(13);
    Model m = init_model(f.cfg);
    Params theta0 = m.p;
    const Example& e = f.data.examples[2];
    ModelGrads g = backward(m, e.token_ids, e.label);

    Dataset one;
    one.num_classes = f.cfg.num_classes;
    one.examples = {e};
    TrainHyper h;
    h.epochs = 1;
    h.batch_size = 1;
    h.lr = 0.05;
    h.momentum = 0.0;
    train(m, one, h);

    for (std::size_t li = 0; li < m.p.convs.size(); ++li)
        for (std::size_t i = 0; i < m.p.convs[li].w.size(); ++i)
            CHECK(m.p.convs[li].w[i] == theta0.convs[li].w[i] - 0.05 * g.convs[li].w[i]);
    for (std::size_t i = 0; i < m.p.fc_w.size(); ++i)
        CHECK(m.p.fc_w[i] == theta0.fc_w[i] - 0.05 * g.fc_w[i]);

    std::map<int, std::vector<double>> rows;
    for (const auto& pg : g.embed_positions) {
        auto [it, fresh] = rows.try_emplace(pg.word_id);
        if (fresh) it->second.assign(pg.g.size(), 0.0);
        for (std::size_t c = 0; c < pg.g.size(); ++c) it->second[c] += pg.g[c];
    }
    for (const auto& [w, grad] : rows)
        for (int c = 0; c < f.cfg.embed_dim; ++c)
            CHECK(m.p.embedding[static_cast<std::size_t>(w) * f.cfg.embed_dim + c] ==
                  theta0.embedding[static_cast<std::size_t>(w) * f.cfg.embed_dim + c] -
                      0.05 * grad[static_cast<std::size_t>(c)]);
}

TEST_CASE("training learns a separable toy corpus and is reproducible", "[model]") {
    SynthSpec spec;
    spec.size = 60;
    spec.num_classes = 2;
    spec.ambiguity = 0.0;
    spec.seed = 21;
    auto corpus = synth_corpus(spec);
    std::vector<std::string> texts;
    for (const auto& r : corpus.records) texts.push_back(r.text);
    Vocab v = build_vocab(texts, {});
    Dataset d = encode_dataset(corpus.records, v, build_label_map(corpus.records), 24);

    ModelConfig cfg;
    cfg.vocab_size = v.size();
    cfg.embed_dim = 24;
    cfg.conv_specs = {{5, 8}, {5, 8}, {1, 8}};
    cfg.num_classes = 2;
    cfg.seed = 5;

    TrainHyper h;
    h.epochs = 50;
    h.batch_size = 8;
    h.lr = 0.05;
    Model m = init_model(cfg);
    TrainResult r1 = train(m, d, h);
    CHECK(accuracy(m, d) == 1.0);

    Model m2 = init_model(cfg);
    TrainResult r2 = train(m2, d, h);
    CHECK(m.p.embedding == m2.p.embedding);
    CHECK(m.p.fc_w == m2.p.fc_w);
    CHECK(r1.order_checksum == r2.order_checksum);
}

TEST_CASE("frozen embeddings stay bit identical across checkpoints", "[model]") {
    Fixture f = small_fixture(31);
    ModelConfig cfg = f.cfg;
    cfg.freeze_embeddings = true;
    Model m = init_model(cfg);
    std::vector<double> emb0 = m.p.embedding;
    TrainHyper h;
    h.epochs = 4;
    h.batch_size = 8;
    h.lr = 0.1;
    TrainResult r = train(m, f.data, h);
    for (const auto& ck : r.checkpoints.checkpoints) CHECK(ck.theta.embedding == emb0);
}

TEST_CASE("diverging training aborts with a diagnostic", "[model]") {
    Fixture f = small_fixture(33, 2, 60);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 30;
    h.batch_size = 4;
    h.lr = 1000.0;
    CHECK_THROWS_WITH(train(m, f.data, h), Catch::Matchers::ContainsSubstring("diverged"));
}

TEST_CASE("swapping two buffered windows preserves the logits", "[model]") {
    Fixture f = small_fixture(17);
    Model m = init_model(f.cfg);

    // receptive radius of the conv stack (5,5,1) is 4, so every position able
    // to see a block must see only that block plus buffer tokens: buffers of
    // width 8 around each block guarantee it
    int buf = f.vocab.id_of("the");
    int a1 = kNumSpecials + 1, a2 = kNumSpecials + 2, b1 = kNumSpecials + 3,
        b2 = kNumSpecials + 4;
    auto sentence = [&](std::vector<int> first, std::vector<int> second) {
        std::vector<int> ids = {kStartId};
        for (int i = 0; i < 8; ++i) ids.push_back(buf);
        ids.insert(ids.end(), first.begin(), first.end());
        for (int i = 0; i < 8; ++i) ids.push_back(buf);
        ids.insert(ids.end(), second.begin(), second.end());
        for (int i = 0; i < 8; ++i) ids.push_back(buf);
        ids.push_back(kEndId);
        return ids;
    };
    ForwardTrace ta = forward(m, sentence({a1, a2}, {b1, b2}));
    ForwardTrace tb = forward(m, sentence({b1, b2}, {a1, a2}));
    for (std::size_t c = 0; c < ta.logits.size(); ++c)
        CHECK(ta.logits[c] == Approx(tb.logits[c]).margin(1e-12));
}

TEST_CASE("doubling the embedding doubles conv1 preactivations minus bias", "[model]") {
    Fixture f = small_fixture(19);
    Model m = init_model(f.cfg);
    const Example& e = f.data.examples[4];
    ForwardTrace t1 = forward(m, e.token_ids);
    Model m2 = m;
    for (auto& x : m2.p.embedding) x *= 2.0;
    ForwardTrace t2 = forward(m2, e.token_ids);
    const int fcount = f.cfg.conv_specs[0].filters;
    for (int i = 0; i < t1.n; ++i)
        for (int fi = 0; fi < fcount; ++fi) {
            double b = m.p.convs[0].b[static_cast<std::size_t>(fi)];
            double p1 = t1.conv_pre[0][static_cast<std::size_t>(i) * fcount + fi];
            double p2 = t2.conv_pre[0][static_cast<std::size_t>(i) * fcount + fi];
            CHECK(p2 - b == Approx(2.0 * (p1 - b)).margin(1e-9));
        }
}

TEST_CASE("checkpoint save and load round trips bit exactly", "[model]") {
    Fixture f = small_fixture(23);
    Model m = init_model(f.cfg);
    TrainHyper h;
    h.epochs = 2;
    h.batch_size = 8;
    h.lr = 0.1;
    TrainResult r = train(m, f.data, h);

    fs::path dir = fs::temp_directory_path() / "tdinf_ckpt_test";
    fs::remove_all(dir);
    const Checkpoint& ck = r.checkpoints.checkpoints.back();
    save_checkpoint(ck, f.cfg, dir);
    Checkpoint back = load_checkpoint(dir, f.cfg);
    CHECK(back.step == ck.step);
    CHECK(back.eta == ck.eta);
    CHECK(back.theta.embedding == ck.theta.embedding);
    CHECK(back.theta.fc_w == ck.theta.fc_w);
    for (std::size_t li = 0; li < ck.theta.convs.size(); ++li) {
        CHECK(back.theta.convs[li].w == ck.theta.convs[li].w);
        CHECK(back.theta.convs[li].b == ck.theta.convs[li].b);
    }

    ModelConfig other = f.cfg;
    other.embed_dim *= 2;
    CHECK_THROWS(load_checkpoint(dir, other));
}
