#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "tdinf/io.hpp"
#include "tdinf/jobs.hpp"
#include "tdinf/model.hpp"

namespace tdinf {

struct LayerSelector {
    std::vector<std::string> layers;  // subset of ModelConfig::layer_names()
    bool include_bias = false;

    static LayerSelector all(const ModelConfig& cfg, bool bias = false) {
        return {cfg.layer_names(), bias};
    }
    static LayerSelector only(std::string layer, bool bias = false) {
        return {{std::move(layer)}, bias};
    }

    bool has(const std::string& name) const {
        return std::find(layers.begin(), layers.end(), name) != layers.end();
    }

    void check(const ModelConfig& cfg) const {
        if (layers.empty()) throw ConfigError("layer selector is empty");
        auto names = cfg.layer_names();
        for (const auto& l : layers)
            if (std::find(names.begin(), names.end(), l) == names.end())
                throw ConfigError("unknown layer in selector: " + l);
    }
};

// d(loss)/d(embedding row) per word, summed over the positions holding the
// word. Keys are ids present in the example (minus [PAD], which is masked).
struct SparseWordGrad {
    int checkpoint_step = 0;
    std::map<int, std::vector<double>> entries;
};

struct ExampleGradientRecord {
    int example_id = -1;
    int checkpoint_step = 0;
    SparseWordGrad words;
    std::vector<double> loss_saliency;     // softmax - onehot
    std::vector<double> last_layer_grad;   // fc weights (+ bias when configured)
    std::vector<double> final_activation;  // pooled a(x)
    std::vector<std::pair<std::string, double>> layer_grad_norms;
};

namespace detail {

inline double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Positions surviving the top-k cut, ranked by L2 norm of the position
// gradient; ties keep the earlier position. k <= 0 means "no cut".
inline std::vector<int> topk_positions(const std::vector<PositionGrad>& pos, int k) {
    std::vector<int> idx(pos.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (k <= 0 || static_cast<int>(pos.size()) <= k) return idx;
    std::vector<double> norms(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) norms[i] = vec_norm(pos[i].g);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());  // accumulate in position order
    return idx;
}

inline SparseWordGrad accumulate_words(const std::vector<PositionGrad>& pos,
                                       const std::vector<int>& chosen, int embed_dim, int step) {
    SparseWordGrad sg;
    sg.checkpoint_step = step;
    for (int i : chosen) {
        const auto& pg = pos[static_cast<std::size_t>(i)];
        auto [it, fresh] = sg.entries.try_emplace(pg.word_id);
        if (fresh) it->second.assign(static_cast<std::size_t>(embed_dim), 0.0);
        for (int c = 0; c < embed_dim; ++c)
            it->second[static_cast<std::size_t>(c)] += pg.g[static_cast<std::size_t>(c)];
    }
    return sg;
}

}  // namespace detail

inline SparseWordGrad word_embedding_grads(const Model& m, const Example& e, int step = 0) {
    ModelGrads g = backward(m, e.token_ids, e.label);
    std::vector<int> all(g.embed_positions.size());
    std::iota(all.begin(), all.end(), 0);
    SparseWordGrad sg = detail::accumulate_words(g.embed_positions, all, m.cfg.embed_dim, step);
    if (m.cfg.l2_lambda > 0.0) {
        const int d = m.cfg.embed_dim;
        for (auto& [w, row] : sg.entries)
            for (int c = 0; c < d; ++c)
                row[static_cast<std::size_t>(c)] +=
                    m.cfg.l2_lambda * m.p.embedding[static_cast<std::size_t>(w) * d + c];
    }
    return sg;
}

inline SparseWordGrad topk_word_grads(const Model& m, const Example& e, int k, int step = 0) {
    if (k < 1) throw ConfigError("top-k must be >= 1");
    ModelGrads g = backward(m, e.token_ids, e.label);
    auto chosen = detail::topk_positions(g.embed_positions, k);
    return detail::accumulate_words(g.embed_positions, chosen, m.cfg.embed_dim, step);
}

inline std::vector<double> loss_saliency(const Model& m, const Example& e) {
    ForwardTrace t = forward(m, e.token_ids);
    std::vector<double> s = t.probs;
    s[static_cast<std::size_t>(e.label)] -= 1.0;
    return s;
}

// Flat gradient over the selected layers, canonical order (embedding,
// conv1..convN, fc); each layer contributes weights then bias (when
// include_bias). The embedding block is the dense vocab x dim gradient.
inline std::vector<double> param_grads(const Model& m, const Example& e,
                                       const LayerSelector& sel) {
    sel.check(m.cfg);
    ModelGrads g = backward(m, e.token_ids, e.label);
    if (m.cfg.l2_lambda > 0.0) add_l2_to_grads(m, g, nullptr);

    std::vector<double> flat;
    if (sel.has("embedding")) {
        const int d = m.cfg.embed_dim;
        std::vector<double> dense(static_cast<std::size_t>(m.cfg.vocab_size) * d, 0.0);
        for (const auto& pg : g.embed_positions) {
            double* row = &dense[static_cast<std::size_t>(pg.word_id) * d];
            for (int c = 0; c < d; ++c) row[c] += pg.g[static_cast<std::size_t>(c)];
        }
        if (m.cfg.l2_lambda > 0.0)
            for (std::size_t i = 0; i < dense.size(); ++i)
                dense[i] += m.cfg.l2_lambda * m.p.embedding[i];
        flat.insert(flat.end(), dense.begin(), dense.end());
    }
    for (std::size_t li = 0; li < m.cfg.conv_specs.size(); ++li) {
        if (!sel.has("conv" + std::to_string(li + 1))) continue;
        flat.insert(flat.end(), g.convs[li].w.begin(), g.convs[li].w.end());
        if (sel.include_bias) flat.insert(flat.end(), g.convs[li].b.begin(), g.convs[li].b.end());
    }
    if (sel.has("fc")) {
        flat.insert(flat.end(), g.fc_w.begin(), g.fc_w.end());
        if (sel.include_bias) flat.insert(flat.end(), g.fc_b.begin(), g.fc_b.end());
    }
    return flat;
}

// One backward pass worth of influence inputs for (example, checkpoint).
inline ExampleGradientRecord extract_record(const Model& m, const Example& e, int step, int topk,
                                            bool fc_include_bias = false) {
    ModelGrads g = backward(m, e.token_ids, e.label);

    ExampleGradientRecord rec;
    rec.example_id = e.id;
    rec.checkpoint_step = step;
    auto chosen = detail::topk_positions(g.embed_positions, topk);
    rec.words = detail::accumulate_words(g.embed_positions, chosen, m.cfg.embed_dim, step);
    rec.loss_saliency = g.saliency;
    rec.final_activation = g.activation;
    rec.last_layer_grad = g.fc_w;
    if (fc_include_bias)
        rec.last_layer_grad.insert(rec.last_layer_grad.end(), g.fc_b.begin(), g.fc_b.end());

    // per-layer weight-gradient norms (embedding norm over word-summed rows)
    {
        std::vector<int> all(g.embed_positions.size());
        std::iota(all.begin(), all.end(), 0);
        SparseWordGrad exact =
            detail::accumulate_words(g.embed_positions, all, m.cfg.embed_dim, step);
        double s = 0.0;
        for (const auto& [w, row] : exact.entries)
            for (double x : row) s += x * x;
        rec.layer_grad_norms.push_back({"embedding", std::sqrt(s)});
    }
    for (std::size_t li = 0; li < g.convs.size(); ++li) {
        double s = 0.0;
        for (double x : g.convs[li].w) s += x * x;
        rec.layer_grad_norms.push_back({"conv" + std::to_string(li + 1), std::sqrt(s)});
    }
    {
        double s = 0.0;
        for (double x : g.fc_w) s += x * x;
        rec.layer_grad_norms.push_back({"fc", std::sqrt(s)});
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Gradient store. Disk layout:
//   <dir>/ckpt_<step>/records.bin   length-prefixed records, little-endian
//   <dir>/manifest.json             k, selector, config hash, checksums
// Record payload:
//   u32 example_id, u32 checkpoint_step, u16 n_words,
//   n_words x { u32 word_id, f32 x embed_dim },
//   u8 n_classes, f32 x n_classes saliency,
//   u32 fc_len, f32 x fc_len, u16 act_len, f32 x act_len
// Gradient payloads are f32 on disk; in-memory records stay f64.

struct StoreMeta {
    int topk = 0;  // 0 = exact
    bool fc_include_bias = false;
    std::string config_hash;
    int embed_dim = 0;
    int num_classes = 0;
    std::vector<int> steps;
};

namespace detail {

inline void write_record(BinWriter& w, const ExampleGradientRecord& rec, int embed_dim) {
    std::vector<char> buf;
    auto push = [&](const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    };
    auto push_u32 = [&](std::uint32_t v) { push(&v, 4); };
    auto push_u16 = [&](std::uint16_t v) { push(&v, 2); };
    auto push_f32s = [&](const std::vector<double>& v) {
        for (double x : v) {
            float f = static_cast<float>(x);
            push(&f, 4);
        }
    };

    push_u32(static_cast<std::uint32_t>(rec.example_id));
    push_u32(static_cast<std::uint32_t>(rec.checkpoint_step));
    push_u16(static_cast<std::uint16_t>(rec.words.entries.size()));
    for (const auto& [word, row] : rec.words.entries) {
        push_u32(static_cast<std::uint32_t>(word));
        (void)embed_dim;
        push_f32s(row);
    }
    std::uint8_t nc = static_cast<std::uint8_t>(rec.loss_saliency.size());
    push(&nc, 1);
    push_f32s(rec.loss_saliency);
    push_u32(static_cast<std::uint32_t>(rec.last_layer_grad.size()));
    push_f32s(rec.last_layer_grad);
    push_u16(static_cast<std::uint16_t>(rec.final_activation.size()));
    push_f32s(rec.final_activation);

    w.put<std::uint32_t>(static_cast<std::uint32_t>(buf.size()));
    w.put_array(buf.data(), buf.size());
}

inline ExampleGradientRecord read_record(BinReader& r, int embed_dim) {
    const std::uint32_t len = r.get<std::uint32_t>();
    (void)len;
    ExampleGradientRecord rec;
    rec.example_id = static_cast<int>(r.get<std::uint32_t>());
    rec.checkpoint_step = static_cast<int>(r.get<std::uint32_t>());
    rec.words.checkpoint_step = rec.checkpoint_step;
    const int n_words = r.get<std::uint16_t>();
    std::vector<float> row(static_cast<std::size_t>(embed_dim));
    for (int i = 0; i < n_words; ++i) {
        int word = static_cast<int>(r.get<std::uint32_t>());
        r.get_array(row.data(), row.size());
        std::vector<double> drow(row.begin(), row.end());
        rec.words.entries.emplace(word, std::move(drow));
    }
    std::uint8_t nc;
    r.get_array(&nc, 1);
    std::vector<float> sal(nc);
    r.get_array(sal.data(), sal.size());
    rec.loss_saliency.assign(sal.begin(), sal.end());
    const std::uint32_t fc_len = r.get<std::uint32_t>();
    std::vector<float> fc(fc_len);
    r.get_array(fc.data(), fc.size());
    rec.last_layer_grad.assign(fc.begin(), fc.end());
    const std::uint16_t act_len = r.get<std::uint16_t>();
    std::vector<float> act(act_len);
    r.get_array(act.data(), act.size());
    rec.final_activation.assign(act.begin(), act.end());
    return rec;
}

}  // namespace detail

class GradientStore {
public:
    StoreMeta meta;

    const std::vector<ExampleGradientRecord>& at_step(int step) const {
        auto it = by_step_.find(step);
        if (it == by_step_.end())
            throw std::runtime_error("gradient store has no checkpoint " + std::to_string(step));
        return it->second;
    }

    const ExampleGradientRecord& find(int example_id, int step) const {
        const auto& recs = at_step(step);
        auto it = index_.at(step).find(example_id);
        if (it == index_.at(step).end())
            throw std::runtime_error("no gradient record for example " +
                                     std::to_string(example_id) + " at checkpoint " +
                                     std::to_string(step));
        return recs[it->second];
    }

    bool contains(int example_id, int step) const {
        auto s = index_.find(step);
        return s != index_.end() && s->second.count(example_id) > 0;
    }

    void insert(ExampleGradientRecord rec) {
        auto& v = by_step_[rec.checkpoint_step];
        index_[rec.checkpoint_step][rec.example_id] = v.size();
        v.push_back(std::move(rec));
    }

    static GradientStore load(const fs::path& dir) {
        json manifest = json::parse(read_text_file(dir / "manifest.json"));
        GradientStore st;
        st.meta.topk = manifest.at("topk").get<int>();
        st.meta.fc_include_bias = manifest.at("fc_include_bias").get<bool>();
        st.meta.config_hash = manifest.at("config_hash").get<std::string>();
        st.meta.embed_dim = manifest.at("embed_dim").get<int>();
        st.meta.num_classes = manifest.at("num_classes").get<int>();
        for (const auto& f : manifest.at("files")) {
            fs::path path = dir / f.at("path").get<std::string>();
            if (hex64(file_checksum(path)) != f.at("checksum").get<std::string>())
                throw std::runtime_error("gradient store checksum mismatch (partial write?): " +
                                         path.string());
            int step = f.at("step").get<int>();
            st.meta.steps.push_back(step);
            BinReader r(path);
            while (!r.at_eof()) st.insert(detail::read_record(r, st.meta.embed_dim));
        }
        return st;
    }

    std::map<int, std::vector<ExampleGradientRecord>> by_step_;
    std::map<int, std::map<int, std::size_t>> index_;
};

class GradientStoreWriter {
public:
    GradientStoreWriter(fs::path dir, StoreMeta meta) : dir_(std::move(dir)), meta_(std::move(meta)) {
        fs::create_directories(dir_);
    }

    // Records must arrive grouped by checkpoint, ids ascending within one.
    void append(const ExampleGradientRecord& rec) {
        if (!writer_ || current_step_ != rec.checkpoint_step) {
            close_current();
            current_step_ = rec.checkpoint_step;
            fs::path sub = dir_ / ("ckpt_" + std::to_string(current_step_));
            fs::create_directories(sub);
            current_file_ = sub / "records.bin";
            writer_ = std::make_unique<BinWriter>(current_file_);
            files_.push_back({current_step_, current_file_});
        }
        detail::write_record(*writer_, rec, meta_.embed_dim);
    }

    void finalize() {
        close_current();
        json manifest;
        manifest["topk"] = meta_.topk;
        manifest["fc_include_bias"] = meta_.fc_include_bias;
        manifest["config_hash"] = meta_.config_hash;
        manifest["embed_dim"] = meta_.embed_dim;
        manifest["num_classes"] = meta_.num_classes;
        json files = json::array();
        for (const auto& [step, path] : files_) {
            files.push_back({{"step", step},
                             {"path", fs::relative(path, dir_).generic_string()},
                             {"checksum", hex64(file_checksum(path))}});
        }
        manifest["files"] = files;
        // the manifest rename is the commit point: a crash before this leaves
        // no manifest, and readers treat the store as invalid
        write_text_file_atomic(dir_ / "manifest.json", manifest.dump(2) + "\n");
    }

private:
    void close_current() {
        if (writer_) {
            writer_->close();
            writer_.reset();
        }
    }

    fs::path dir_;
    StoreMeta meta_;
    int current_step_ = -1;
    fs::path current_file_;
    std::unique_ptr<BinWriter> writer_;
    std::vector<std::pair<int, fs::path>> files_;
};

// One record per (example, selected checkpoint), computed in parallel and
// kept in id order.
inline GradientStore build_store(const CheckpointSet& cks, const Dataset& data, int topk,
                                 bool fc_include_bias = false, int n_threads = 1) {
    GradientStore st;
    st.meta.topk = topk;
    st.meta.fc_include_bias = fc_include_bias;
    st.meta.config_hash = model_config_hash(cks.cfg);
    st.meta.embed_dim = cks.cfg.embed_dim;
    st.meta.num_classes = cks.cfg.num_classes;
    for (const Checkpoint* ck : cks.selected()) {
        st.meta.steps.push_back(ck->step);
        Model m{cks.cfg, ck->theta};
        std::vector<ExampleGradientRecord> recs = parallel_map<ExampleGradientRecord>(
            static_cast<int>(data.size()), n_threads, [&](int i) {
                return extract_record(m, data.examples[static_cast<std::size_t>(i)], ck->step,
                                      topk, fc_include_bias);
            });
        for (auto& r : recs) st.insert(std::move(r));
    }
    return st;
}

inline GradientStore precompute_store(const CheckpointSet& cks, const Dataset& data, int topk,
                                      const fs::path& dir, bool fc_include_bias = false,
                                      int n_threads = 1) {
    GradientStore st = build_store(cks, data, topk, fc_include_bias, n_threads);
    GradientStoreWriter writer(dir, st.meta);
    for (const auto& [step, recs] : st.by_step_)
        for (const auto& r : recs) writer.append(r);
    writer.finalize();
    return st;
}

}  // namespace tdinf
