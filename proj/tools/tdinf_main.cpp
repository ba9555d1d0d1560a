// Command line front end: train / grads / influence / del-eval / diagnose /
// cluster / fix / bench / synth over a shared work directory.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "tdinf/clustering.hpp"
#include "tdinf/corpus.hpp"
#include "tdinf/diagnostics.hpp"
#include "tdinf/evaluation.hpp"
#include "tdinf/gradients.hpp"
#include "tdinf/influence.hpp"
#include "tdinf/jobs.hpp"
#include "tdinf/model.hpp"
#include "tdinf/reports.hpp"
#include "tdinf/runconfig.hpp"
#include "tdinf/similarity.hpp"
#include "tdinf/synth.hpp"

namespace tdinf {
namespace {

int threads_of(const RunConfig& cfg) {
    return cfg.threads > 0 ? cfg.threads : default_threads();
}

// Partial outputs carry a FAILED marker until the command completes.
class FailMarker {
public:
    explicit FailMarker(fs::path dir) : marker_(std::move(dir)) {
        fs::create_directories(marker_);
        marker_ /= "FAILED";
        write_text_file(marker_, "command did not finish\n");
    }
    void success() {
        fs::remove(marker_);
        done_ = true;
    }
    ~FailMarker() {
        if (!done_) std::fprintf(stderr, "outputs are partial, FAILED marker left at %s\n",
                                 marker_.string().c_str());
    }

private:
    fs::path marker_;
    bool done_ = false;
};

void write_run_config(const fs::path& dir, const RunConfig& cfg) {
    write_text_file_atomic(dir / "run_config.json", run_config_to_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Workspace: the artifacts a command needs, reloaded from the workdir.

struct Workspace {
    RunConfig cfg;
    Vocab vocab;
    LabelMap labels;
    Dataset train_set, val_set, test_set;
    ModelConfig mcfg;
    CheckpointSet cks;
    StepEtas etas;

    GradientStore exact_store;  // train + test records, exact sparse grads
    GradientStore topk_store;   // train + test records, top-k filtered
    TfIdfModel tfidf;
    Model final_model{ModelConfig{}, {}};

    const Example& example_by_id(int id) const {
        for (const Dataset* d : {&train_set, &val_set, &test_set})
            for (const auto& e : d->examples)
                if (e.id == id) return e;
        throw std::runtime_error("unknown example id " + std::to_string(id));
    }

    std::vector<const Example*> pick_test_points() const {
        std::vector<const Example*> out;
        if (!cfg.test_ids.empty()) {
            for (int id : cfg.test_ids) out.push_back(&example_by_id(id));
            return out;
        }
        for (const auto& e : test_set.examples) {
            if (static_cast<int>(out.size()) >= cfg.num_test_points) break;
            out.push_back(&e);
        }
        return out;
    }
};

VocabOptions vocab_options(const RunConfig& cfg) {
    VocabOptions opt;
    opt.max_size = cfg.vocab_max_size;
    opt.min_freq = cfg.vocab_min_freq;
    if (!cfg.stopwords_file.empty()) {
        opt.stopwords.clear();
        std::istringstream in(read_text_file(cfg.stopwords_file));
        std::string w;
        while (in >> w) opt.stopwords.push_back(w);
    }
    return opt;
}

// Splits re-encoded from the persisted TSVs, ids assigned train, val, test
// consecutively so every command sees the same ids.
struct LoadedData {
    Vocab vocab;
    LabelMap labels;
    Dataset train_set, val_set, test_set;
};

LoadedData load_data(const RunConfig& cfg) {
    fs::path data = fs::path(cfg.workdir) / "data";
    LoadedData d;
    d.vocab = load_vocab(data / "vocab.json");
    d.labels = LabelMap::from_json(json::parse(read_text_file(data / "labels.json")));
    auto enc = [&](const std::string& name, const std::string& tag, int first_id) {
        return encode_dataset(load_raw(data / (name + ".tsv"), "tsv"), d.vocab, d.labels,
                              cfg.max_len, tag, first_id);
    };
    d.train_set = enc("train", "train", 0);
    d.val_set = enc("val", "val", static_cast<int>(d.train_set.size()));
    d.test_set = enc("test", "test",
                     static_cast<int>(d.train_set.size() + d.val_set.size()));
    return d;
}

CheckpointSet load_checkpoints(const RunConfig& cfg, const ModelConfig& mcfg) {
    fs::path dir = fs::path(cfg.workdir) / "checkpoints";
    json index = json::parse(read_text_file(dir / "index.json"));
    CheckpointSet cks;
    cks.cfg = mcfg;
    for (int step : index.at("steps").get<std::vector<int>>()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ckpt_%04d", step);
        cks.checkpoints.push_back(load_checkpoint(dir / buf, mcfg));
    }
    cks.select_steps(index.at("selection").get<std::vector<int>>());
    return cks;
}

Workspace load_workspace(const RunConfig& cfg, bool with_stores) {
    Workspace ws;
    ws.cfg = cfg;
    LoadedData d = load_data(cfg);
    ws.vocab = std::move(d.vocab);
    ws.labels = std::move(d.labels);
    ws.train_set = std::move(d.train_set);
    ws.val_set = std::move(d.val_set);
    ws.test_set = std::move(d.test_set);
    ws.mcfg = cfg.model_config(ws.vocab.size(), static_cast<int>(ws.labels.to_id.size()));
    ws.cks = load_checkpoints(cfg, ws.mcfg);
    ws.etas = step_etas(ws.cks);
    ws.final_model = Model{ws.mcfg, ws.cks.checkpoints.back().theta};
    if (with_stores) {
        fs::path g = fs::path(cfg.workdir) / "grads";
        ws.exact_store = GradientStore::load(g / "exact");
        ws.topk_store = GradientStore::load(g / "topk");
        ws.tfidf = tfidf_from_json(json::parse(read_text_file(g / "tfidf.json")));
    }
    return ws;
}

// ---------------------------------------------------------------------------
// Method dispatch shared by influence / del-eval / fix.

bool method_needs_stores(const std::string& m) {
    return m != "representer" && m != "influence_last";
}

std::vector<std::pair<int, double>> score_method(
    const Workspace& ws, const std::string& method, const Example& x_test,
    const std::vector<int>& candidate_ids,
    std::map<int, std::map<int, double>>* contribs_out = nullptr) {
    std::vector<std::pair<int, double>> scores;
    scores.reserve(candidate_ids.size());

    auto we_like = [&](const GradientStore& store, TokenFilter filter) {
        for (int id : candidate_ids) {
            InfluenceResult r =
                tracin_we(store, ws.etas, id, x_test.id, filter, &ws.vocab.common_set);
            scores.push_back({id, r.score});
            if (contribs_out) (*contribs_out)[id] = std::move(r.word_contribs);
        }
    };

    if (method == "tracin_we" || method == "tracin_first") {
        we_like(ws.exact_store, TokenFilter::All);
    } else if (method == "tracin_we_topk") {
        we_like(ws.topk_store, TokenFilter::All);
    } else if (method == "tracin_we_nocommon") {
        we_like(ws.exact_store, TokenFilter::NoCommon);
    } else if (method == "tracin_common") {
        we_like(ws.exact_store, TokenFilter::CommonOnly);
    } else if (method == "tracin_we_syn") {
        SynConfig sc;
        sc.threshold = ws.cfg.syn_threshold;
        const auto& emb = ws.cks.selected().back()->theta.embedding;
        for (int id : candidate_ids)
            scores.push_back({id, tracin_we_syn(ws.topk_store, ws.etas, id, x_test.id, sc, emb,
                                                ws.mcfg.embed_dim, ws.cfg.topk)
                                      .score});
    } else if (method == "tracin_last") {
        for (int id : candidate_ids)
            scores.push_back({id, tracin_last(ws.topk_store, ws.etas, id, x_test.id).score});
    } else if (method == "tracin_tfidf") {
        for (int id : candidate_ids)
            scores.push_back({id, tracin_tfidf(ws.tfidf, ws.topk_store, ws.etas,
                                               ws.example_by_id(id), x_test)
                                      .score});
    } else if (method == "influence_last") {
        LastLayerInfluenceConfig lc;
        lc.damping = ws.cfg.damping;
        FcInfluence fci = build_last_layer_influence(ws.final_model, ws.train_set, lc);
        std::vector<double> pre = fci.preconditioned(fc_weight_grad(ws.final_model, x_test));
        for (int id : candidate_ids)
            scores.push_back({id, dot(fc_weight_grad(ws.final_model, ws.example_by_id(id)), pre)});
    } else if (method == "representer") {
        LastLayerInfluenceConfig lc;
        lc.lambda_rep = ws.cfg.lambda_rep;
        for (int id : candidate_ids)
            scores.push_back({id, representer(ws.final_model, ws.example_by_id(id), x_test,
                                              ws.train_set.size(), lc)
                                      .score});
    } else if (method == "tracin_second" || method == "tracin_third" || method == "tracin_all") {
        LayerSelector sel;
        if (method == "tracin_second") sel = LayerSelector::only("conv1");
        else if (method == "tracin_third") sel = LayerSelector::only("conv2");
        else sel = LayerSelector::all(ws.mcfg);
        for (int id : candidate_ids)
            scores.push_back({id, tracin(ws.cks, ws.example_by_id(id), x_test, sel).score});
    } else {
        throw ConfigError("unknown influence method: " + method);
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_synth(const RunConfig& cfg) {
    fs::path out = cfg.corpus.empty() ? fs::path(cfg.workdir) / "corpus.tsv"
                                      : fs::path(cfg.corpus);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    SynthSpec spec;
    spec.size = cfg.synth_size;
    spec.num_classes = cfg.synth_classes;
    spec.flip_fraction = cfg.synth_flip;
    spec.flip_group_size = cfg.synth_flip_group;
    spec.ambiguity = cfg.synth_ambiguity;
    spec.seed = cfg.seed;
    SynthCorpus corpus = synth_corpus(spec);
    std::string tsv;
    for (const auto& r : corpus.records) tsv += r.label + "\t" + r.text + "\n";
    write_text_file_atomic(out, tsv);
    if (!corpus.flipped.empty()) {
        json j;
        j["flipped_line_indices"] = corpus.flipped;
        write_text_file_atomic(out.parent_path() / (out.stem().string() + "_flips.json"),
                               j.dump(2) + "\n");
    }
    std::printf("wrote %zu sentences to %s\n", corpus.records.size(), out.string().c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    fs::path wd(cfg.workdir);
    FailMarker marker(wd);
    fs::create_directories(wd / "data");
    write_run_config(wd, cfg);

    auto records = load_raw(cfg.corpus, cfg.format);
    std::vector<std::string> texts;
    for (const auto& r : records) texts.push_back(r.text);
    Vocab vocab = build_vocab(texts, vocab_options(cfg));
    LabelMap labels = build_label_map(records);

    Dataset all = encode_dataset(records, vocab, labels, cfg.max_len);
    Splits s = split(all, cfg.seed, {cfg.split_train, cfg.split_val, cfg.split_test});
    // reassign consecutive ids so reloaded splits agree with the stores
    int next_id = 0;
    for (Dataset* d : {&s.train, &s.val, &s.test})
        for (auto& e : d->examples) e.id = next_id++;

    auto inv = invert_label_map(labels);
    save_vocab(vocab, wd / "data" / "vocab.json");
    write_text_file_atomic(wd / "data" / "labels.json", labels.to_json().dump(2) + "\n");
    save_tsv(s.train, inv, wd / "data" / "train.tsv");
    save_tsv(s.val, inv, wd / "data" / "val.tsv");
    save_tsv(s.test, inv, wd / "data" / "test.tsv");

    ModelConfig mcfg = cfg.model_config(vocab.size(), static_cast<int>(labels.to_id.size()));
    Model model = init_model(mcfg);
    TrainResult res = train(model, s.train, cfg.hyper());
    res.checkpoints.select_steps(cfg.checkpoint_selection);

    fs::path ckdir = wd / "checkpoints";
    fs::create_directories(ckdir);
    std::vector<int> steps;
    for (const auto& ck : res.checkpoints.checkpoints) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "ckpt_%04d", ck.step);
        save_checkpoint(ck, mcfg, ckdir / buf);
        steps.push_back(ck.step);
    }
    json index;
    index["steps"] = steps;
    std::vector<int> sel_steps;
    for (const Checkpoint* c : res.checkpoints.selected()) sel_steps.push_back(c->step);
    index["selection"] = sel_steps;
    index["model_config"] = model_config_to_json(mcfg);
    write_text_file_atomic(ckdir / "index.json", index.dump(2) + "\n");

    json log;
    log["epoch_loss"] = res.epoch_loss;
    log["order_checksum"] = hex64(res.order_checksum);
    log["train_accuracy"] = accuracy(model, s.train);
    log["val_accuracy"] = accuracy(model, s.val);
    log["test_accuracy"] = accuracy(model, s.test);
    log["param_count_total"] = count_params(mcfg).total;
    log["param_count_non_embedding"] = count_params(mcfg).non_embedding;
    write_text_file_atomic(wd / "train_log.json", log.dump(2) + "\n");

    std::printf("trained %d epochs, train acc %.3f, val acc %.3f, test acc %.3f\n",
                cfg.epochs, accuracy(model, s.train), accuracy(model, s.val),
                accuracy(model, s.test));
    marker.success();
    return 0;
}

int cmd_grads(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, false);
    fs::path gdir = fs::path(cfg.workdir) / "grads";
    FailMarker marker(gdir);
    write_run_config(gdir, cfg);

    Dataset scored = ws.train_set;
    for (const auto& e : ws.test_set.examples) scored.examples.push_back(e);

    int nt = threads_of(cfg);
    precompute_store(ws.cks, scored, 0, gdir / "exact", false, nt);
    precompute_store(ws.cks, scored, cfg.topk, gdir / "topk", false, nt);
    TfIdfModel tfidf = tfidf_fit(ws.train_set);
    write_text_file_atomic(gdir / "tfidf.json", tfidf_to_json(tfidf).dump() + "\n");

    std::printf("gradient stores written for %zu examples x %zu checkpoints\n",
                scored.size(), ws.etas.size());
    marker.success();
    return 0;
}

std::vector<int> candidate_ids_for(const Workspace& ws, const Example& x_test) {
    std::vector<int> ids;
    if (ws.cfg.no_overlap_n > 0)
        return no_overlap_candidates(x_test, ws.train_set, ws.cfg.no_overlap_n, ws.tfidf);
    for (const auto& e : ws.train_set.examples) ids.push_back(e.id);
    return ids;
}

int cmd_influence(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, true);
    fs::path dir = fs::path(cfg.workdir) / "influence";
    FailMarker marker(dir);
    write_run_config(dir, cfg);

    json summary;
    for (const auto& method : cfg.methods) {
        fs::create_directories(dir / method);
        for (const Example* x : ws.pick_test_points()) {
            auto candidates = candidate_ids_for(ws, *x);
            std::map<int, std::map<int, double>> contribs;
            bool want_contribs = method.rfind("tracin_we", 0) == 0 && method != "tracin_we_syn";
            auto scores =
                score_method(ws, method, *x, candidates, want_contribs ? &contribs : nullptr);
            Ranking r = rank(scores);

            std::string jsonl;
            for (const auto& [id, score] : r.proponents) {
                json line;
                line["test_id"] = x->id;
                line["train_id"] = id;
                line["method"] = method;
                line["score"] = score;
                if (want_contribs) {
                    json wc = json::object();
                    for (const auto& [w, v] : contribs[id])
                        wc[ws.vocab.token_of(w)] = v;
                    line["word_contribs"] = wc;
                }
                jsonl += line.dump() + "\n";
            }
            write_text_file_atomic(dir / method / ("test_" + std::to_string(x->id) + ".jsonl"),
                                   jsonl);

            json top;
            for (int i = 0; i < 5 && i < static_cast<int>(r.proponents.size()); ++i)
                top["proponents"].push_back(
                    {{"id", r.proponents[static_cast<std::size_t>(i)].first},
                     {"score", r.proponents[static_cast<std::size_t>(i)].second}});
            for (int i = 0; i < 5 && i < static_cast<int>(r.opponents.size()); ++i)
                top["opponents"].push_back(
                    {{"id", r.opponents[static_cast<std::size_t>(i)].first},
                     {"score", r.opponents[static_cast<std::size_t>(i)].second}});
            summary[method]["test_" + std::to_string(x->id)] = top;
        }
    }
    write_text_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    std::printf("influence rankings written to %s\n", dir.string().c_str());
    marker.success();
    return 0;
}

int cmd_del_eval(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, true);
    fs::path dir = fs::path(cfg.workdir) / "deletion";
    FailMarker marker(dir);
    write_run_config(dir, cfg);

    RetrainProtocol proto;
    proto.model_cfg = ws.mcfg;
    proto.hyper = cfg.hyper();
    proto.base_seed = cfg.seed + 1000;
    proto.repeats = cfg.repeats;
    proto.n_threads = threads_of(cfg);

    auto test_points = ws.pick_test_points();
    std::vector<Model> baseline = retrain_ensemble(ws.train_set, {}, proto);

    json summary;
    for (const auto& method : cfg.methods) {
        fs::create_directories(dir / method);
        std::vector<double> aucs_plus, aucs_minus;
        for (const Example* x : test_points) {
            std::vector<double> base_probs;
            for (const auto& m : baseline) base_probs.push_back(predict_prob(m, *x, x->label));
            Ranking r = rank(score_method(ws, method, *x, candidate_ids_for(ws, *x)));
            DeletionCurve curve =
                deletion_eval(ws.train_set, *x, method, r, cfg.k_grid, proto, &base_probs);
            std::string stem = "test_" + std::to_string(x->id);
            write_text_file_atomic(dir / method / (stem + ".csv"), deletion_curve_csv(curve));
            write_text_file_atomic(dir / method / (stem + ".svg"), deletion_curve_svg(curve));
            write_text_file_atomic(dir / method / (stem + ".json"),
                                   deletion_curve_json(curve).dump(2) + "\n");
            aucs_plus.push_back(curve.auc_plus);
            aucs_minus.push_back(curve.auc_minus);
        }
        json m;
        m["auc_plus_mean"] = mean_of(aucs_plus);
        m["auc_minus_mean"] = mean_of(aucs_minus);
        m["auc_plus_stderr"] = bootstrap_se(aucs_plus, 500, cfg.seed + 7);
        m["auc_minus_stderr"] = bootstrap_se(aucs_minus, 500, cfg.seed + 8);
        m["auc_plus_per_test"] = aucs_plus;
        m["auc_minus_per_test"] = aucs_minus;
        summary[method] = m;
    }
    write_text_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    std::printf("deletion curves written to %s\n", dir.string().c_str());
    marker.success();
    return 0;
}

int cmd_diagnose(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, false);
    fs::path dir = fs::path(cfg.workdir) / "diagnostics";
    FailMarker marker(dir);
    write_run_config(dir, cfg);
    int nt = threads_of(cfg);

    json cj;
    std::vector<std::vector<std::string>> table;
    table.push_back({"group", "sum_G", "sum_delta", "C"});
    for (const auto& group : diagnostic_groups(ws.mcfg)) {
        CancellationReport r = cancellation_ratio(ws.cks, ws.train_set, group, nt);
        json g;
        g["delta_per_ckpt"] = r.delta_per_ckpt;
        g["g_per_ckpt"] = r.g_per_ckpt;
        g["sum_delta"] = r.sum_delta;
        g["sum_g"] = r.sum_g;
        g["defined"] = r.defined;
        if (r.defined) g["ratio"] = r.ratio;
        cj[group] = g;
        table.push_back({group, fmt_double(r.sum_g), fmt_double(r.sum_delta),
                         r.defined ? fmt_double(r.ratio) : "undefined"});
    }
    write_text_file_atomic(dir / "cancellation.json", cj.dump(2) + "\n");
    write_text_file_atomic(dir / "cancellation.txt", text_table(table));

    auto cosines =
        layer_grad_cosine_means(ws.final_model, ws.train_set, cfg.cosine_pairs, cfg.seed, nt);
    json cos;
    std::vector<std::vector<std::string>> ctable;
    ctable.push_back({"layer", "mean_pairwise_grad_cosine"});
    for (const auto& [layer, v] : cosines) {
        cos[layer] = v;
        ctable.push_back({layer, fmt_double(v)});
    }
    write_text_file_atomic(dir / "layer_cosine.json", cos.dump(2) + "\n");
    write_text_file_atomic(dir / "layer_cosine.txt", text_table(ctable));

    std::printf("diagnostics written to %s\n", dir.string().c_str());
    marker.success();
    return 0;
}

int cmd_cluster(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, true);
    fs::path dir = fs::path(cfg.workdir) / "clusters";
    FailMarker marker(dir);
    write_run_config(dir, cfg);

    TrainHyper h = cfg.hyper();
    EarlyStopConfig es;
    es.patience = cfg.cluster_patience;
    es.max_epochs = cfg.cluster_max_epochs;
    HardExampleSet hard =
        select_hard(ws.train_set, ws.val_set, cfg.cluster_runs, cfg.hard_threshold, ws.mcfg, h,
                    es, cfg.seed + 4000, threads_of(cfg));
    if (hard.ids.size() < 2) {
        write_text_file_atomic(dir / "report.md", "no hard examples found\n");
        write_text_file_atomic(dir / "report.json", json{{"clusters", json::array()}}.dump(2) + "\n");
        marker.success();
        return 0;
    }

    auto pair_score = [&](int a, int b) {
        return tracin_we(ws.exact_store, ws.etas, a, b).score;
    };
    DistanceMatrix dm = influence_distance_matrix(hard.ids, pair_score);
    auto raw = agglomerative(dm, cfg.cluster_threshold);

    auto pair_contribs = [&](int a, int b) {
        return tracin_we(ws.exact_store, ws.etas, a, b).word_contribs;
    };
    auto by_id = [&](int id) -> const Example& { return ws.example_by_id(id); };
    auto predictor = [&](const Example& e) { return predict_class(ws.final_model, e); };
    ClusterReport rep =
        build_cluster_report(raw, cfg.cluster_min_size, pair_contribs, by_id, predictor);
    rep.hard_count = static_cast<int>(hard.ids.size());

    std::map<int, std::string> names;
    for (const auto& [name, id] : ws.labels.to_id) names[id] = name;
    write_text_file_atomic(dir / "report.md",
                           render_cluster_report_markdown(rep, ws.vocab, by_id, names));

    json j;
    j["hard_examples"] = hard.ids;
    j["runs"] = hard.runs;
    j["threshold"] = hard.threshold;
    json clusters = json::array();
    for (const auto& c : rep.clusters) {
        json cj;
        cj["ids"] = c.ids;
        json words = json::array();
        for (const auto& [w, n] : c.common_words)
            words.push_back({{"word", ws.vocab.token_of(w)}, {"pairs", n}});
        cj["common_words"] = words;
        json tl = json::object(), pl = json::object();
        for (const auto& [l, n] : c.true_labels) tl[names.at(l)] = n;
        for (const auto& [l, n] : c.pred_labels) pl[names.at(l)] = n;
        cj["true_labels"] = tl;
        cj["pred_labels"] = pl;
        clusters.push_back(cj);
    }
    j["clusters"] = clusters;
    write_text_file_atomic(dir / "report.json", j.dump(2) + "\n");

    std::printf("%zu hard examples, %zu clusters of size >= %d\n", hard.ids.size(),
                rep.clusters.size(), cfg.cluster_min_size);
    marker.success();
    return 0;
}

int cmd_fix(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, true);
    fs::path dir = fs::path(cfg.workdir) / "fix";
    FailMarker marker(dir);
    write_run_config(dir, cfg);

    RetrainProtocol proto;
    proto.model_cfg = ws.mcfg;
    proto.hyper = cfg.hyper();
    proto.base_seed = cfg.seed + 2000;
    proto.repeats = cfg.repeats;
    proto.n_threads = threads_of(cfg);

    // candidates: misclassified test points inside the probability band
    std::vector<const Example*> targets;
    for (const auto& e : ws.test_set.examples) {
        if (static_cast<int>(targets.size()) >= cfg.fix_points) break;
        if (predict_class(ws.final_model, e) == e.label) continue;
        double p = predict_prob(ws.final_model, e, e.label);
        if (p < cfg.fix_band_lo || p > cfg.fix_band_hi) continue;
        targets.push_back(&e);
    }
    if (targets.empty())
        throw std::runtime_error("no misclassified test points inside the fix band");

    FixStrategy strategy = cfg.fix_strategy == "pad_word" ? FixStrategy::PadWord
                                                          : FixStrategy::RemoveExamples;
    json reports = json::array();
    for (const Example* x : targets) {
        check_fixable(ws.final_model, *x, cfg.fix_band_lo, cfg.fix_band_hi);
        Ranking r = rank(score_method(ws, cfg.fix_method, *x, candidate_ids_for(ws, *x)));

        std::map<int, int> pad_choice;
        if (strategy == FixStrategy::PadWord) {
            for (int i = 0; i < cfg.fix_k && i < static_cast<int>(r.opponents.size()); ++i) {
                int id = r.opponents[static_cast<std::size_t>(i)].first;
                auto contribs =
                    tracin_we(ws.topk_store, ws.etas, id, x->id).word_contribs;
                int best_w = -1;
                double best_v = 0.0;
                for (const auto& [w, v] : contribs)
                    if (v < best_v) {
                        best_v = v;
                        best_w = w;
                    }
                if (best_w < 0) {
                    // no negative contribution: fall back to the first content word
                    for (int t : ws.example_by_id(id).token_ids)
                        if (t >= kNumSpecials) {
                            best_w = t;
                            break;
                        }
                }
                pad_choice[id] = best_w;
            }
        }
        FixReport rep = fix_eval(ws.train_set, *x, cfg.fix_method, r, strategy, {cfg.fix_k},
                                 proto, strategy == FixStrategy::PadWord ? &pad_choice : nullptr);
        json j;
        j["test_id"] = rep.test_id;
        j["method"] = rep.method;
        j["strategy"] = rep.strategy;
        j["k"] = cfg.fix_k;
        j["fix_prob"] = rep.fix_prob[0];
        j["baseline_flip_rate"] = rep.baseline_flip_rate;
        j["train_accuracy_delta"] = rep.accuracy_delta;
        reports.push_back(j);
    }
    json out;
    out["reports"] = reports;
    double mean_fix = 0.0;
    for (const auto& r : reports) mean_fix += r.at("fix_prob").get<double>();
    out["mean_fix_prob"] = mean_fix / static_cast<double>(reports.size());
    write_text_file_atomic(dir / "report.json", out.dump(2) + "\n");
    std::printf("fix evaluation over %zu test points written to %s\n", targets.size(),
                dir.string().c_str());
    marker.success();
    return 0;
}

int cmd_bench(const RunConfig& cfg) {
    Workspace ws = load_workspace(cfg, false);
    fs::path dir = fs::path(cfg.workdir) / "bench";
    FailMarker marker(dir);
    write_run_config(dir, cfg);

    // widened last conv: the influence-function solve cost grows with the
    // activation width, mirroring the per-pair cost accounting
    ModelConfig wide = ws.mcfg;
    wide.conv_specs.back().filters = cfg.bench_widen;
    Model model = init_model(wide);
    TrainHyper h = cfg.hyper();
    h.epochs = std::min(h.epochs, 2);
    TrainResult tr = train(model, ws.train_set, h);
    CheckpointSet cks = std::move(tr.checkpoints);
    std::vector<int> sel;
    for (int s : {1, 2})
        if (s <= h.epochs) sel.push_back(s);
    cks.select_steps(sel);
    StepEtas etas = step_etas(cks);

    using clock = std::chrono::steady_clock;
    auto secs = [](clock::time_point a, clock::time_point b) {
        return std::chrono::duration<double>(b - a).count();
    };

    const int n_points = std::min<int>(static_cast<int>(ws.train_set.size()), cfg.bench_pairs);
    Dataset subset;
    subset.num_classes = ws.train_set.num_classes;
    for (int i = 0; i < n_points; ++i) subset.examples.push_back(ws.train_set.examples[static_cast<std::size_t>(i)]);

    auto t0 = clock::now();
    GradientStore store = build_store(cks, subset, cfg.topk);
    auto t1 = clock::now();
    double preprocess_per_point =
        secs(t0, t1) / static_cast<double>(subset.size() * etas.size());

    // influence-function preprocessing: Hessian assembly + factorization
    LastLayerInfluenceConfig lc;
    lc.damping = cfg.damping;
    t0 = clock::now();
    FcInfluence fci = build_last_layer_influence(model, ws.train_set, lc);
    t1 = clock::now();
    double inf_preprocess = secs(t0, t1);

    // pair sampling
    Rng rng(cfg.seed, "bench-pairs");
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < cfg.bench_pairs; ++i) {
        int a = static_cast<int>(rng.next_below(subset.size()));
        int b = static_cast<int>(rng.next_below(subset.size()));
        pairs.push_back({subset.examples[static_cast<std::size_t>(a)].id,
                         subset.examples[static_cast<std::size_t>(b)].id});
    }
    std::vector<std::vector<double>> fc_grads;
    for (const auto& e : subset.examples) fc_grads.push_back(fc_weight_grad(model, e));
    std::map<int, std::size_t> subset_index;
    for (std::size_t i = 0; i < subset.examples.size(); ++i)
        subset_index[subset.examples[i].id] = i;

    auto time_pairs = [&](auto&& fn, int reps) {
        volatile double sink = 0.0;
        auto a = clock::now();
        for (int r = 0; r < reps; ++r)
            for (const auto& [x, y] : pairs) sink += fn(x, y);
        auto b = clock::now();
        (void)sink;
        return secs(a, b) / static_cast<double>(reps * pairs.size());
    };

    double sec_tracin_last = time_pairs(
        [&](int a, int b) { return tracin_last(store, etas, a, b).score; }, 20);
    double sec_tracin_we_topk = time_pairs(
        [&](int a, int b) { return tracin_we(store, etas, a, b).score; }, 20);
    // a pairwise influence-function query solves against the cached
    // factorization for every pair
    double sec_influence_last = time_pairs(
        [&](int a, int b) {
            return fci.score(fc_grads[subset_index.at(a)], fc_grads[subset_index.at(b)]);
        },
        2);

    json j;
    j["model"] = {{"act_dim", wide.act_dim()},
                  {"fc_params", wide.act_dim() * wide.num_classes},
                  {"non_embedding_params", count_params(wide).non_embedding}};
    j["preprocess_sec_per_point"] = preprocess_per_point;
    j["influence_last_preprocess_sec"] = inf_preprocess;
    j["sec_per_pair"] = {{"tracin_last", sec_tracin_last},
                         {"tracin_we_topk", sec_tracin_we_topk},
                         {"influence_last", sec_influence_last}};
    write_text_file_atomic(dir / "bench.json", j.dump(2) + "\n");

    std::vector<std::vector<std::string>> table;
    table.push_back({"method", "sec_per_pair"});
    table.push_back({"tracin_last", fmt_double(sec_tracin_last)});
    table.push_back({"tracin_we_topk", fmt_double(sec_tracin_we_topk)});
    table.push_back({"influence_last", fmt_double(sec_influence_last)});
    write_text_file_atomic(dir / "bench.txt", text_table(table));

    std::printf("per-pair sec: tracin_last %.3g, tracin_we_topk %.3g, influence_last %.3g\n",
                sec_tracin_last, sec_tracin_we_topk, sec_influence_last);
    marker.success();
    return 0;
}

}  // namespace
}  // namespace tdinf

int main(int argc, char** argv) {
    using namespace tdinf;
    CLI::App app{"training-data influence toolbox for a small text CNN"};
    app.require_subcommand(1);
    app.fallthrough();  // global options may follow the subcommand

    std::string config_file;
    std::vector<std::string> overrides;
    std::string workdir_flag, corpus_flag;
    app.add_option("--config", config_file, "key = value configuration file");
    app.add_option("--set", overrides, "override config entries, e.g. --set epochs=5");
    app.add_option("--workdir", workdir_flag, "work directory (also env TDINF_WORKDIR)");
    app.add_option("--corpus", corpus_flag, "corpus file (tsv or jsonl)");

    const char* names[] = {"synth",    "train",   "grads", "influence",
                           "del-eval", "diagnose", "cluster", "fix",
                           "bench"};
    const char* descs[] = {"generate a synthetic labeled corpus",
                           "train the text CNN and record checkpoints",
                           "precompute the gradient stores and the tf-idf model",
                           "rank training examples for the configured test points",
                           "case-deletion retraining curves and AUC table",
                           "cancellation ratios and per-layer gradient cosines",
                           "cluster hard examples by influence distance",
                           "targeted fixing of misclassified test points",
                           "per-stage cost accounting"};
    std::map<std::string, CLI::App*> subs;
    for (int i = 0; i < 9; ++i) subs[names[i]] = app.add_subcommand(names[i], descs[i]);

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg;
        if (!config_file.empty()) apply_config_entries(cfg, parse_kv_file(config_file));
        if (const char* env = std::getenv("TDINF_WORKDIR"); env && *env) cfg.workdir = env;
        std::map<std::string, std::string> kv;
        for (const auto& ov : overrides) {
            auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects key=value, got: " + ov);
            kv[ov.substr(0, eq)] = ov.substr(eq + 1);
        }
        apply_config_entries(cfg, kv);
        if (!workdir_flag.empty()) cfg.workdir = workdir_flag;
        if (!corpus_flag.empty()) cfg.corpus = corpus_flag;

        auto picked = app.get_subcommands().at(0)->get_name();
        validate_config(cfg, picked == "train");

        if (picked == "synth") return cmd_synth(cfg);
        if (picked == "train") return cmd_train(cfg);
        if (picked == "grads") return cmd_grads(cfg);
        if (picked == "influence") return cmd_influence(cfg);
        if (picked == "del-eval") return cmd_del_eval(cfg);
        if (picked == "diagnose") return cmd_diagnose(cfg);
        if (picked == "cluster") return cmd_cluster(cfg);
        if (picked == "fix") return cmd_fix(cfg);
        if (picked == "bench") return cmd_bench(cfg);
        throw ConfigError("unknown subcommand");
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
