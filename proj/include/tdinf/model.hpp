#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdinf/corpus.hpp"
#include "tdinf/io.hpp"
#include "tdinf/rng.hpp"

namespace tdinf {

struct ConvSpec {
    int kernel = 5;
    int filters = 10;
};

struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 128;
    std::vector<ConvSpec> conv_specs = {{5, 10}, {5, 10}, {1, 10}};
    int num_classes = 2;
    double l2_lambda = 0.0;
    bool freeze_embeddings = false;
    std::uint64_t seed = 0;

    int act_dim() const { return conv_specs.back().filters; }

    void check() const {
        if (vocab_size < kNumSpecials) throw ConfigError("vocab_size too small");
        if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (l2_lambda < 0) throw ConfigError("l2_lambda must be >= 0");
        if (conv_specs.empty()) throw ConfigError("need at least one conv layer");
        for (const auto& c : conv_specs) {
            if (c.kernel < 1 || c.kernel % 2 == 0) throw ConfigError("conv kernels must be odd");
            if (c.filters < 1) throw ConfigError("conv filters must be >= 1");
        }
    }

    // Canonical layer names: embedding, conv1..convN, fc.
    std::vector<std::string> layer_names() const {
        std::vector<std::string> names = {"embedding"};
        for (std::size_t i = 0; i < conv_specs.size(); ++i)
            names.push_back("conv" + std::to_string(i + 1));
        names.push_back("fc");
        return names;
    }
};

inline json model_config_to_json(const ModelConfig& c) {
    json convs = json::array();
    for (const auto& s : c.conv_specs) convs.push_back({{"kernel", s.kernel}, {"filters", s.filters}});
    return json{{"vocab_size", c.vocab_size},
                {"embed_dim", c.embed_dim},
                {"conv_specs", convs},
                {"num_classes", c.num_classes},
                {"l2_lambda", c.l2_lambda},
                {"freeze_embeddings", c.freeze_embeddings},
                {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.conv_specs.clear();
    for (const auto& s : j.at("conv_specs"))
        c.conv_specs.push_back({s.at("kernel").get<int>(), s.at("filters").get<int>()});
    c.num_classes = j.at("num_classes").get<int>();
    c.l2_lambda = j.at("l2_lambda").get<double>();
    c.freeze_embeddings = j.at("freeze_embeddings").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

inline std::string model_config_hash(const ModelConfig& c) {
    return hex64(fnv1a64(model_config_to_json(c).dump()));
}

struct ConvParams {
    std::vector<double> w;  // [filters][kernel][in_ch], contiguous in in_ch
    std::vector<double> b;  // [filters]
};

struct Params {
    std::vector<double> embedding;  // [vocab][embed_dim] row-major
    std::vector<ConvParams> convs;
    std::vector<double> fc_w;  // [num_classes][act_dim] row-major
    std::vector<double> fc_b;  // [num_classes]
};

struct Model {
    ModelConfig cfg;
    Params p;
};

// Parameter counts per layer (weights, biases). The embedding layer has no
// bias; its count is vocab_size * embed_dim.
struct ParamCount {
    std::vector<std::pair<std::string, std::pair<long long, long long>>> per_layer;
    long long total = 0, total_weights = 0, total_bias = 0;
    long long non_embedding = 0;
};

inline ParamCount count_params(const ModelConfig& cfg) {
    ParamCount pc;
    auto add = [&](const std::string& name, long long w, long long b) {
        pc.per_layer.push_back({name, {w, b}});
        pc.total += w + b;
        pc.total_weights += w;
        pc.total_bias += b;
        if (name != "embedding") pc.non_embedding += w + b;
    };
    add("embedding", static_cast<long long>(cfg.vocab_size) * cfg.embed_dim, 0);
    int in_ch = cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) {
        const auto& s = cfg.conv_specs[i];
        add("conv" + std::to_string(i + 1),
            static_cast<long long>(s.filters) * s.kernel * in_ch, s.filters);
        in_ch = s.filters;
    }
    add("fc", static_cast<long long>(cfg.num_classes) * cfg.act_dim(), cfg.num_classes);
    return pc;
}

// Glorot-uniform weights, zero biases, deterministic for a fixed seed.
inline Model init_model(const ModelConfig& cfg) {
    cfg.check();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.seed, "init");
    auto fill_uniform = [&](std::vector<double>& v, std::size_t n, int fan_in, int fan_out) {
        double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        v.resize(n);
        for (auto& x : v) x = rng.uniform(-a, a);
    };
    fill_uniform(m.p.embedding, static_cast<std::size_t>(cfg.vocab_size) * cfg.embed_dim,
                 cfg.vocab_size, cfg.embed_dim);
    int in_ch = cfg.embed_dim;
    for (const auto& s : cfg.conv_specs) {
        ConvParams c;
        fill_uniform(c.w, static_cast<std::size_t>(s.filters) * s.kernel * in_ch,
                     s.kernel * in_ch, s.filters);
        c.b.assign(static_cast<std::size_t>(s.filters), 0.0);
        m.p.convs.push_back(std::move(c));
        in_ch = s.filters;
    }
    fill_uniform(m.p.fc_w, static_cast<std::size_t>(cfg.num_classes) * cfg.act_dim(),
                 cfg.act_dim(), cfg.num_classes);
    m.p.fc_b.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass. [PAD] positions are zero-masked: their embedding vectors are
// replaced by zeros before the convolutions, and they are excluded from the
// global max pool. The [PAD] row therefore never receives gradient.

struct ForwardTrace {
    int n = 0;                                 // effective length (through last non-pad)
    std::vector<char> mask;                    // n, 1 where token != [PAD]
    std::vector<int> token_at;                 // n
    std::vector<double> x;                     // n x embed_dim, masked embeddings
    std::vector<std::vector<double>> conv_pre; // per conv: n x filters
    std::vector<std::vector<double>> conv_out; // per conv: n x filters (ReLU)
    std::vector<int> pool_argmax;              // act_dim
    std::vector<double> pooled;                // act_dim
    std::vector<double> logits;                // num_classes
    std::vector<double> probs;                 // num_classes
};

namespace detail {

inline void conv1d_forward(const std::vector<double>& in, int n, int in_ch,
                           const ConvSpec& spec, const ConvParams& p,
                           std::vector<double>& pre, std::vector<double>& out) {
    const int f = spec.filters, k = spec.kernel, half = k / 2;
    pre.assign(static_cast<std::size_t>(n) * f, 0.0);
    out.assign(static_cast<std::size_t>(n) * f, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int fi = 0; fi < f; ++fi) {
            double acc = p.b[static_cast<std::size_t>(fi)];
            const double* wf = &p.w[static_cast<std::size_t>(fi) * k * in_ch];
            for (int t = 0; t < k; ++t) {
                int j = i + t - half;
                if (j < 0 || j >= n) continue;
                const double* xr = &in[static_cast<std::size_t>(j) * in_ch];
                const double* wr = wf + static_cast<std::size_t>(t) * in_ch;
                double s = 0.0;
                for (int c = 0; c < in_ch; ++c) s += wr[c] * xr[c];
                acc += s;
            }
            pre[static_cast<std::size_t>(i) * f + fi] = acc;
            out[static_cast<std::size_t>(i) * f + fi] = acc > 0.0 ? acc : 0.0;
        }
    }
}

inline void softmax_inplace(std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    for (auto& x : v) {
        x = std::exp(x - mx);
        z += x;
    }
    for (auto& x : v) x /= z;
}

}  // namespace detail

inline ForwardTrace forward(const Model& m, const std::vector<int>& token_ids) {
    const auto& cfg = m.cfg;
    const int d = cfg.embed_dim;

    int n = 0;
    for (int i = 0; i < static_cast<int>(token_ids.size()); ++i)
        if (token_ids[static_cast<std::size_t>(i)] != kPadId) n = i + 1;
    if (n == 0) throw std::runtime_error("cannot run forward on an all-pad input");

    ForwardTrace t;
    t.n = n;
    t.mask.resize(static_cast<std::size_t>(n));
    t.token_at.resize(static_cast<std::size_t>(n));
    t.x.assign(static_cast<std::size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        int tok = token_ids[static_cast<std::size_t>(i)];
        if (tok < 0 || tok >= cfg.vocab_size) throw std::runtime_error("token id out of range");
        t.token_at[static_cast<std::size_t>(i)] = tok;
        t.mask[static_cast<std::size_t>(i)] = tok != kPadId;
        if (tok != kPadId) {
            const double* row = &m.p.embedding[static_cast<std::size_t>(tok) * d];
            std::copy(row, row + d, &t.x[static_cast<std::size_t>(i) * d]);
        }
    }

    const std::vector<double>* in = &t.x;
    int in_ch = d;
    t.conv_pre.resize(cfg.conv_specs.size());
    t.conv_out.resize(cfg.conv_specs.size());
    for (std::size_t li = 0; li < cfg.conv_specs.size(); ++li) {
        detail::conv1d_forward(*in, n, in_ch, cfg.conv_specs[li], m.p.convs[li],
                               t.conv_pre[li], t.conv_out[li]);
        in = &t.conv_out[li];
        in_ch = cfg.conv_specs[li].filters;
    }

    // Global max pool over non-pad positions; ties go to the lowest index.
    const int act = cfg.act_dim();
    const auto& last = t.conv_out.back();
    t.pool_argmax.assign(static_cast<std::size_t>(act), -1);
    t.pooled.assign(static_cast<std::size_t>(act), 0.0);
    for (int fi = 0; fi < act; ++fi) {
        double best = -std::numeric_limits<double>::infinity();
        int best_i = -1;
        for (int i = 0; i < n; ++i) {
            if (!t.mask[static_cast<std::size_t>(i)]) continue;
            double v = last[static_cast<std::size_t>(i) * act + fi];
            if (v > best) {
                best = v;
                best_i = i;
            }
        }
        t.pool_argmax[static_cast<std::size_t>(fi)] = best_i;
        t.pooled[static_cast<std::size_t>(fi)] = best;
    }

    t.logits.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
    for (int c = 0; c < cfg.num_classes; ++c) {
        double acc = m.p.fc_b[static_cast<std::size_t>(c)];
        const double* wr = &m.p.fc_w[static_cast<std::size_t>(c) * act];
        for (int j = 0; j < act; ++j) acc += wr[j] * t.pooled[static_cast<std::size_t>(j)];
        t.logits[static_cast<std::size_t>(c)] = acc;
    }
    t.probs = t.logits;
    detail::softmax_inplace(t.probs);
    return t;
}

inline double l2_penalty(const Model& m) {
    if (m.cfg.l2_lambda == 0.0) return 0.0;
    double s = 0.0;
    for (double v : m.p.embedding) s += v * v;
    for (const auto& c : m.p.convs) {
        for (double v : c.w) s += v * v;
        for (double v : c.b) s += v * v;
    }
    for (double v : m.p.fc_w) s += v * v;
    for (double v : m.p.fc_b) s += v * v;
    return 0.5 * m.cfg.l2_lambda * s;
}

inline double loss_from_trace(const Model& m, const ForwardTrace& t, int label) {
    if (label < 0 || label >= m.cfg.num_classes) throw std::runtime_error("label out of range");
    double mx = t.logits[0];
    for (double x : t.logits) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : t.logits) z += std::exp(x - mx);
    double ce = std::log(z) + mx - t.logits[static_cast<std::size_t>(label)];
    return ce + l2_penalty(m);
}

inline double loss(const Model& m, const Example& e) {
    ForwardTrace t = forward(m, e.token_ids);
    return loss_from_trace(m, t, e.label);
}

inline double predict_prob(const Model& m, const Example& e, int class_id) {
    if (class_id < 0 || class_id >= m.cfg.num_classes)
        throw std::runtime_error("class id out of range");
    ForwardTrace t = forward(m, e.token_ids);
    return t.probs[static_cast<std::size_t>(class_id)];
}

// ---------------------------------------------------------------------------
// Backward pass.

struct PositionGrad {
    int position = 0;
    int word_id = 0;
    std::vector<double> g;  // embed_dim, d(loss)/d(embedding input at position)
};

struct ModelGrads {
    std::vector<PositionGrad> embed_positions;  // non-pad positions, ascending
    std::vector<ConvParams> convs;              // same shapes as Model
    std::vector<double> fc_w, fc_b;
    std::vector<double> saliency;    // dloss/dlogits = softmax - onehot
    std::vector<double> activation;  // pooled a(x)
};

// Cross-entropy gradients for one example. The l2 term is not included here;
// add_l2_to_grads applies lambda*theta to dense layers and to named embedding
// rows (absent rows are never materialized).
inline ModelGrads backward_from_trace(const Model& m, const ForwardTrace& t, int label) {
    const auto& cfg = m.cfg;
    const int n = t.n, d = cfg.embed_dim, act = cfg.act_dim();

    ModelGrads g;
    g.saliency = t.probs;
    g.saliency[static_cast<std::size_t>(label)] -= 1.0;
    g.activation = t.pooled;

    g.fc_w.assign(static_cast<std::size_t>(cfg.num_classes) * act, 0.0);
    g.fc_b = g.saliency;
    std::vector<double> da(static_cast<std::size_t>(act), 0.0);
    for (int c = 0; c < cfg.num_classes; ++c) {
        double s = g.saliency[static_cast<std::size_t>(c)];
        const double* wr = &m.p.fc_w[static_cast<std::size_t>(c) * act];
        double* gw = &g.fc_w[static_cast<std::size_t>(c) * act];
        for (int j = 0; j < act; ++j) {
            gw[j] = s * t.pooled[static_cast<std::size_t>(j)];
            da[static_cast<std::size_t>(j)] += s * wr[j];
        }
    }

    // Unpool into the last conv output.
    std::vector<double> dout(static_cast<std::size_t>(n) * act, 0.0);
    for (int fi = 0; fi < act; ++fi) {
        int i = t.pool_argmax[static_cast<std::size_t>(fi)];
        dout[static_cast<std::size_t>(i) * act + fi] = da[static_cast<std::size_t>(fi)];
    }

    g.convs.resize(cfg.conv_specs.size());
    for (int li = static_cast<int>(cfg.conv_specs.size()) - 1; li >= 0; --li) {
        const auto& spec = cfg.conv_specs[static_cast<std::size_t>(li)];
        const auto& cp = m.p.convs[static_cast<std::size_t>(li)];
        const int f = spec.filters, k = spec.kernel, half = k / 2;
        const int in_ch = li == 0 ? d : cfg.conv_specs[static_cast<std::size_t>(li - 1)].filters;
        const std::vector<double>& in =
            li == 0 ? t.x : t.conv_out[static_cast<std::size_t>(li - 1)];

        auto& gc = g.convs[static_cast<std::size_t>(li)];
        gc.w.assign(cp.w.size(), 0.0);
        gc.b.assign(cp.b.size(), 0.0);
        std::vector<double> din(static_cast<std::size_t>(n) * in_ch, 0.0);

        const auto& pre = t.conv_pre[static_cast<std::size_t>(li)];
        for (int i = 0; i < n; ++i) {
            for (int fi = 0; fi < f; ++fi) {
                double dp = dout[static_cast<std::size_t>(i) * f + fi];
                if (dp == 0.0 || pre[static_cast<std::size_t>(i) * f + fi] <= 0.0) continue;
                gc.b[static_cast<std::size_t>(fi)] += dp;
                double* gwf = &gc.w[static_cast<std::size_t>(fi) * k * in_ch];
                const double* wf = &cp.w[static_cast<std::size_t>(fi) * k * in_ch];
                for (int tt = 0; tt < k; ++tt) {
                    int j = i + tt - half;
                    if (j < 0 || j >= n) continue;
                    const double* xr = &in[static_cast<std::size_t>(j) * in_ch];
                    double* dr = &din[static_cast<std::size_t>(j) * in_ch];
                    double* gw = gwf + static_cast<std::size_t>(tt) * in_ch;
                    const double* wr = wf + static_cast<std::size_t>(tt) * in_ch;
                    for (int c = 0; c < in_ch; ++c) {
                        gw[c] += dp * xr[c];
                        dr[c] += dp * wr[c];
                    }
                }
            }
        }
        dout = std::move(din);
    }

    for (int i = 0; i < n; ++i) {
        if (!t.mask[static_cast<std::size_t>(i)]) continue;
        PositionGrad pg;
        pg.position = i;
        pg.word_id = t.token_at[static_cast<std::size_t>(i)];
        pg.g.assign(&dout[static_cast<std::size_t>(i) * d],
                    &dout[static_cast<std::size_t>(i) * d] + d);
        g.embed_positions.push_back(std::move(pg));
    }

    return g;
}

inline ModelGrads backward(const Model& m, const std::vector<int>& token_ids, int label) {
    ForwardTrace t = forward(m, token_ids);
    return backward_from_trace(m, t, label);
}

// lambda*theta for the dense layers plus the embedding rows named in grads.
inline void add_l2_to_grads(const Model& m, ModelGrads& g,
                            std::map<int, std::vector<double>>* embed_rows = nullptr) {
    const double lam = m.cfg.l2_lambda;
    if (lam == 0.0) return;
    for (std::size_t li = 0; li < g.convs.size(); ++li) {
        for (std::size_t i = 0; i < g.convs[li].w.size(); ++i)
            g.convs[li].w[i] += lam * m.p.convs[li].w[i];
        for (std::size_t i = 0; i < g.convs[li].b.size(); ++i)
            g.convs[li].b[i] += lam * m.p.convs[li].b[i];
    }
    for (std::size_t i = 0; i < g.fc_w.size(); ++i) g.fc_w[i] += lam * m.p.fc_w[i];
    for (std::size_t i = 0; i < g.fc_b.size(); ++i) g.fc_b[i] += lam * m.p.fc_b[i];
    if (embed_rows) {
        const int d = m.cfg.embed_dim;
        for (auto& [w, row] : *embed_rows)
            for (int c = 0; c < d; ++c)
                row[static_cast<std::size_t>(c)] +=
                    lam * m.p.embedding[static_cast<std::size_t>(w) * d + c];
    }
}

// ---------------------------------------------------------------------------
// Training.

struct Checkpoint {
    int step = 0;  // epoch index; 0 is the initial state
    double eta = 0.0;
    Params theta;
};

struct CheckpointSet {
    ModelConfig cfg;
    std::vector<Checkpoint> checkpoints;
    std::vector<int> selection;

    const Checkpoint& by_step(int step) const {
        for (const auto& c : checkpoints)
            if (c.step == step) return c;
        throw std::runtime_error("no checkpoint at step " + std::to_string(step));
    }

    std::vector<const Checkpoint*> selected() const {
        std::vector<const Checkpoint*> out;
        for (int idx : selection) out.push_back(&checkpoints.at(static_cast<std::size_t>(idx)));
        return out;
    }

    void select_steps(const std::vector<int>& steps) {
        selection.clear();
        for (int s : steps)
            for (std::size_t i = 0; i < checkpoints.size(); ++i)
                if (checkpoints[i].step == s) selection.push_back(static_cast<int>(i));
        if (selection.empty()) throw ConfigError("checkpoint selection is empty");
    }
};

struct TrainHyper {
    int epochs = 10;
    int batch_size = 32;
    double lr = 0.1;
    double momentum = 0.9;
    int checkpoint_every = 1;  // in epochs
};

// v <- mu*v + g ; theta <- theta - lr*v. With mu = 0 this is plain SGD.
inline void momentum_sgd_step(std::vector<double>& theta, const std::vector<double>& grad,
                              std::vector<double>& velocity, double lr, double mu) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
        velocity[i] = mu * velocity[i] + grad[i];
        theta[i] -= lr * velocity[i];
    }
}

struct TrainResult {
    CheckpointSet checkpoints;
    std::vector<double> epoch_loss;  // mean train loss per epoch
    std::uint64_t order_checksum = 0;
};

// Minibatch SGD with momentum. The shuffle stream is drawn over the full
// example list; `removed_ids` are filtered out afterwards, so two runs with
// the same seed visit the surviving examples in the same relative order.
// epoch_end (optional) runs after each epoch; returning true stops training.
inline TrainResult train(Model& m, const Dataset& data, const TrainHyper& h,
                         const std::set<int>& removed_ids = {},
                         const std::function<bool(int, const Model&)>& epoch_end = {}) {
    if (data.examples.empty()) throw ConfigError("training set is empty");
    if (h.epochs < 1 || h.batch_size < 1 || h.lr <= 0)
        throw ConfigError("bad training hyperparameters");

    const auto& cfg = m.cfg;
    const int d = cfg.embed_dim;

    Params vel;
    vel.embedding.assign(m.p.embedding.size(), 0.0);
    vel.convs.resize(m.p.convs.size());
    for (std::size_t i = 0; i < m.p.convs.size(); ++i) {
        vel.convs[i].w.assign(m.p.convs[i].w.size(), 0.0);
        vel.convs[i].b.assign(m.p.convs[i].b.size(), 0.0);
    }
    vel.fc_w.assign(m.p.fc_w.size(), 0.0);
    vel.fc_b.assign(m.p.fc_b.size(), 0.0);

    TrainResult res;
    res.checkpoints.cfg = cfg;
    res.checkpoints.checkpoints.push_back({0, h.lr, m.p});
    res.order_checksum = kFnvOffset;

    Rng shuffle_rng(cfg.seed, "train-shuffle");
    std::vector<std::size_t> order(data.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= h.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        std::vector<std::size_t> survivors;
        survivors.reserve(order.size());
        for (std::size_t idx : order) {
            int id = data.examples[idx].id;
            if (removed_ids.count(id)) continue;
            survivors.push_back(idx);
            res.order_checksum = fnv1a64(&id, sizeof(id), res.order_checksum);
        }
        if (survivors.empty()) throw ConfigError("all training examples removed");

        double loss_sum = 0.0;
        std::size_t bpos = 0;
        while (bpos < survivors.size()) {
            std::size_t bend = std::min(bpos + static_cast<std::size_t>(h.batch_size),
                                        survivors.size());
            const double inv_b = 1.0 / static_cast<double>(bend - bpos);

            // batch accumulators
            std::map<int, std::vector<double>> emb_grad;  // word id -> row grad
            std::vector<ConvParams> conv_grad(m.p.convs.size());
            for (std::size_t i = 0; i < conv_grad.size(); ++i) {
                conv_grad[i].w.assign(m.p.convs[i].w.size(), 0.0);
                conv_grad[i].b.assign(m.p.convs[i].b.size(), 0.0);
            }
            std::vector<double> fcw_grad(m.p.fc_w.size(), 0.0), fcb_grad(m.p.fc_b.size(), 0.0);

            for (std::size_t bi = bpos; bi < bend; ++bi) {
                const Example& ex = data.examples[survivors[bi]];
                ForwardTrace t = forward(m, ex.token_ids);
                loss_sum += loss_from_trace(m, t, ex.label);
                ModelGrads g = backward_from_trace(m, t, ex.label);
                for (const auto& pg : g.embed_positions) {
                    auto [it, fresh] = emb_grad.try_emplace(pg.word_id);
                    if (fresh) it->second.assign(static_cast<std::size_t>(d), 0.0);
                    for (int c = 0; c < d; ++c) it->second[static_cast<std::size_t>(c)] +=
                        inv_b * pg.g[static_cast<std::size_t>(c)];
                }
                for (std::size_t li = 0; li < conv_grad.size(); ++li) {
                    for (std::size_t i = 0; i < conv_grad[li].w.size(); ++i)
                        conv_grad[li].w[i] += inv_b * g.convs[li].w[i];
                    for (std::size_t i = 0; i < conv_grad[li].b.size(); ++i)
                        conv_grad[li].b[i] += inv_b * g.convs[li].b[i];
                }
                for (std::size_t i = 0; i < fcw_grad.size(); ++i) fcw_grad[i] += inv_b * g.fc_w[i];
                for (std::size_t i = 0; i < fcb_grad.size(); ++i) fcb_grad[i] += inv_b * g.fc_b[i];
            }

            const double lam = cfg.l2_lambda;
            if (!cfg.freeze_embeddings) {
                // dense momentum over the embedding: decay everywhere, then
                // add this batch's sparse gradient and the l2 term
                for (std::size_t i = 0; i < vel.embedding.size(); ++i) {
                    vel.embedding[i] = h.momentum * vel.embedding[i] +
                                       (lam != 0.0 ? lam * m.p.embedding[i] : 0.0);
                }
                for (const auto& [w, row] : emb_grad) {
                    double* vr = &vel.embedding[static_cast<std::size_t>(w) * d];
                    for (int c = 0; c < d; ++c) vr[c] += row[static_cast<std::size_t>(c)];
                }
                for (std::size_t i = 0; i < m.p.embedding.size(); ++i)
                    m.p.embedding[i] -= h.lr * vel.embedding[i];
            }
            for (std::size_t li = 0; li < conv_grad.size(); ++li) {
                if (lam != 0.0) {
                    for (std::size_t i = 0; i < conv_grad[li].w.size(); ++i)
                        conv_grad[li].w[i] += lam * m.p.convs[li].w[i];
                    for (std::size_t i = 0; i < conv_grad[li].b.size(); ++i)
                        conv_grad[li].b[i] += lam * m.p.convs[li].b[i];
                }
                momentum_sgd_step(m.p.convs[li].w, conv_grad[li].w, vel.convs[li].w, h.lr,
                                  h.momentum);
                momentum_sgd_step(m.p.convs[li].b, conv_grad[li].b, vel.convs[li].b, h.lr,
                                  h.momentum);
            }
            if (lam != 0.0) {
                for (std::size_t i = 0; i < fcw_grad.size(); ++i) fcw_grad[i] += lam * m.p.fc_w[i];
                for (std::size_t i = 0; i < fcb_grad.size(); ++i) fcb_grad[i] += lam * m.p.fc_b[i];
            }
            momentum_sgd_step(m.p.fc_w, fcw_grad, vel.fc_w, h.lr, h.momentum);
            momentum_sgd_step(m.p.fc_b, fcb_grad, vel.fc_b, h.lr, h.momentum);

            bpos = bend;
        }

        double mean_loss = loss_sum / static_cast<double>(survivors.size());
        bool finite = std::isfinite(mean_loss);
        for (const auto& c : m.p.convs) {
            for (double x : c.w) finite = finite && std::isfinite(x);
            for (double x : c.b) finite = finite && std::isfinite(x);
        }
        for (double x : m.p.fc_w) finite = finite && std::isfinite(x);
        for (double x : m.p.fc_b) finite = finite && std::isfinite(x);
        if (!finite)
            throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                                     " (loss not finite); lower the learning rate");
        res.epoch_loss.push_back(mean_loss);
        if (epoch % h.checkpoint_every == 0 || epoch == h.epochs)
            res.checkpoints.checkpoints.push_back({epoch, h.lr, m.p});
        if (epoch_end && epoch_end(epoch, m)) break;
    }

    // default selection: pre-saturation epochs {1,2,3} when available
    std::vector<int> want;
    for (int s : {1, 2, 3})
        if (s <= h.epochs) want.push_back(s);
    std::vector<int> have;
    for (const auto& c : res.checkpoints.checkpoints)
        for (int s : want)
            if (c.step == s) have.push_back(s);
    if (have.empty()) have.push_back(res.checkpoints.checkpoints.back().step);
    res.checkpoints.select_steps(have);
    return res;
}

inline int predict_class(const Model& m, const Example& e) {
    ForwardTrace t = forward(m, e.token_ids);
    int best = 0;
    for (int c = 1; c < m.cfg.num_classes; ++c)
        if (t.probs[static_cast<std::size_t>(c)] > t.probs[static_cast<std::size_t>(best)]) best = c;
    return best;
}

inline double accuracy(const Model& m, const Dataset& d) {
    if (d.examples.empty()) return 0.0;
    int ok = 0;
    for (const auto& e : d.examples)
        if (predict_class(m, e) == e.label) ++ok;
    return static_cast<double>(ok) / static_cast<double>(d.size());
}

inline double mean_loss(const Model& m, const Dataset& d) {
    double s = 0.0;
    for (const auto& e : d.examples) s += loss(m, e);
    return s / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Checkpoint persistence: one .bin per named tensor (little-endian f64) plus
// a JSON manifest with shapes, step, eta and the config hash.

inline void save_checkpoint(const Checkpoint& ck, const ModelConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["step"] = ck.step;
    manifest["eta"] = ck.eta;
    manifest["config_hash"] = model_config_hash(cfg);
    manifest["config"] = model_config_to_json(cfg);
    json tensors = json::array();

    auto dump = [&](const std::string& name, const std::vector<double>& v,
                    std::vector<long long> shape) {
        fs::path f = dir / (name + ".bin");
        BinWriter w(f);
        w.put_array(v.data(), v.size());
        w.close();
        tensors.push_back({{"name", name},
                           {"shape", shape},
                           {"file", name + ".bin"},
                           {"checksum", hex64(file_checksum(f))}});
    };

    dump("embedding", ck.theta.embedding, {cfg.vocab_size, cfg.embed_dim});
    int in_ch = cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) {
        const auto& s = cfg.conv_specs[i];
        std::string base = "conv" + std::to_string(i + 1);
        dump(base + "_w", ck.theta.convs[i].w, {s.filters, s.kernel, in_ch});
        dump(base + "_b", ck.theta.convs[i].b, {s.filters});
        in_ch = s.filters;
    }
    dump("fc_w", ck.theta.fc_w, {cfg.num_classes, cfg.act_dim()});
    dump("fc_b", ck.theta.fc_b, {cfg.num_classes});
    manifest["tensors"] = tensors;
    write_text_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const fs::path& dir, const ModelConfig& cfg) {
    json manifest = json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.at("config_hash").get<std::string>() != model_config_hash(cfg))
        throw std::runtime_error("checkpoint config hash mismatch: " + dir.string());
    Checkpoint ck;
    ck.step = manifest.at("step").get<int>();
    ck.eta = manifest.at("eta").get<double>();

    std::map<std::string, fs::path> files;
    for (const auto& t : manifest.at("tensors")) {
        fs::path f = dir / t.at("file").get<std::string>();
        if (hex64(file_checksum(f)) != t.at("checksum").get<std::string>())
            throw std::runtime_error("checkpoint tensor checksum mismatch: " + f.string());
        files[t.at("name").get<std::string>()] = f;
    }
    auto slurp = [&](const std::string& name, std::size_t n) {
        std::vector<double> v(n);
        BinReader r(files.at(name));
        r.get_array(v.data(), n);
        return v;
    };
    ck.theta.embedding = slurp("embedding", static_cast<std::size_t>(cfg.vocab_size) * cfg.embed_dim);
    int in_ch = cfg.embed_dim;
    for (std::size_t i = 0; i < cfg.conv_specs.size(); ++i) {
        const auto& s = cfg.conv_specs[i];
        std::string base = "conv" + std::to_string(i + 1);
        ConvParams cp;
        cp.w = slurp(base + "_w", static_cast<std::size_t>(s.filters) * s.kernel * in_ch);
        cp.b = slurp(base + "_b", static_cast<std::size_t>(s.filters));
        ck.theta.convs.push_back(std::move(cp));
        in_ch = s.filters;
    }
    ck.theta.fc_w = slurp("fc_w", static_cast<std::size_t>(cfg.num_classes) * cfg.act_dim());
    ck.theta.fc_b = slurp("fc_b", static_cast<std::size_t>(cfg.num_classes));
    return ck;
}

}  // namespace tdinf
