#pragma once

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tdinf/corpus.hpp"
#include "tdinf/model.hpp"

namespace tdinf {

#ifndef TDINF_GIT_SHA
#define TDINF_GIT_SHA "unknown"
#endif

inline const char* code_version() { return TDINF_GIT_SHA; }

// Flat key = value configuration. File entries are overridden by --set
// flags, and the TDINF_WORKDIR environment variable overrides the workdir
// unless a flag pins it explicitly.
struct RunConfig {
    // data
    std::string corpus;
    std::string format = "tsv";
    std::string workdir = "tdinf-out";
    std::string stopwords_file;
    std::uint64_t seed = 1;
    int max_len = 48;
    int vocab_max_size = 20000;
    int vocab_min_freq = 1;
    double split_train = 0.8, split_val = 0.1, split_test = 0.1;

    // model
    int embed_dim = 128;
    std::vector<ConvSpec> conv_specs = {{5, 10}, {5, 10}, {1, 10}};
    double l2_lambda = 0.0;
    bool freeze_embeddings = false;

    // training
    int epochs = 10;
    int batch_size = 32;
    double lr = 0.05;
    double momentum = 0.9;
    int checkpoint_every = 1;
    std::vector<int> checkpoint_selection = {1, 2, 3};

    // influence
    int topk = 10;
    std::vector<std::string> methods = {"tracin_we", "tracin_we_topk", "tracin_last",
                                        "tracin_tfidf", "influence_last", "representer"};
    double damping = 1e-3;
    double lambda_rep = 1e-3;
    double syn_threshold = 0.7;

    // evaluation
    std::vector<int> k_grid = {2, 5, 10, 20, 40};
    int repeats = 5;
    int num_test_points = 10;
    std::vector<int> test_ids;  // explicit override
    int no_overlap_n = 0;       // > 0: restrict candidates, freeze embeddings
    double fix_band_lo = 0.3, fix_band_hi = 0.7;
    int fix_k = 20;
    std::string fix_strategy = "remove_examples";
    std::string fix_method = "tracin_we_topk";
    int fix_points = 20;

    // clustering
    int cluster_runs = 20;
    double hard_threshold = 0.4;
    double cluster_threshold = 0.8;
    int cluster_min_size = 3;
    int cluster_max_epochs = 15;
    int cluster_patience = 3;

    // diagnostics / bench
    int cosine_pairs = 200;
    int bench_pairs = 200;
    int bench_widen = 64;

    // synth corpus generation
    int synth_size = 2000;
    int synth_classes = 4;
    double synth_flip = 0.0;
    int synth_flip_group = 1;
    double synth_ambiguity = 0.08;

    int threads = 0;  // 0: hardware concurrency

    ModelConfig model_config(int vocab_size, int num_classes) const {
        ModelConfig m;
        m.vocab_size = vocab_size;
        m.embed_dim = embed_dim;
        m.conv_specs = conv_specs;
        m.num_classes = num_classes;
        m.l2_lambda = l2_lambda;
        m.freeze_embeddings = freeze_embeddings;
        m.seed = seed;
        return m;
    }

    TrainHyper hyper() const {
        TrainHyper h;
        h.epochs = epochs;
        h.batch_size = batch_size;
        h.lr = lr;
        h.momentum = momentum;
        h.checkpoint_every = checkpoint_every;
        return h;
    }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const auto& tok : split_list(s)) out.push_back(std::stoi(tok));
    return out;
}

inline std::vector<ConvSpec> parse_conv_specs(const std::string& s) {
    std::vector<ConvSpec> out;
    for (const auto& tok : split_list(s)) {
        auto x = tok.find('x');
        if (x == std::string::npos) throw ConfigError("conv spec must look like 5x10: " + tok);
        out.push_back({std::stoi(tok.substr(0, x)), std::stoi(tok.substr(x + 1))});
    }
    return out;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("expected a boolean, got: " + s);
}

}  // namespace detail

// Parses "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_kv_file(const fs::path& path) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_text_file(path));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            auto a = s.find_first_not_of(" \t\r");
            auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ": line " + std::to_string(line_no) +
                              ": expected key = value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline void apply_config_entries(RunConfig& c, const std::map<std::string, std::string>& kv) {
    std::vector<std::string> problems;
    for (const auto& [key, value] : kv) {
        try {
            if (key == "corpus") c.corpus = value;
            else if (key == "format") c.format = value;
            else if (key == "workdir") c.workdir = value;
            else if (key == "stopwords") c.stopwords_file = value;
            else if (key == "seed") c.seed = std::stoull(value);
            else if (key == "max_len") c.max_len = std::stoi(value);
            else if (key == "vocab_max_size") c.vocab_max_size = std::stoi(value);
            else if (key == "vocab_min_freq") c.vocab_min_freq = std::stoi(value);
            else if (key == "split") {
                auto parts = detail::split_list(value);
                if (parts.size() != 3) throw ConfigError("split needs three fractions");
                c.split_train = std::stod(parts[0]);
                c.split_val = std::stod(parts[1]);
                c.split_test = std::stod(parts[2]);
            } else if (key == "embed_dim") c.embed_dim = std::stoi(value);
            else if (key == "conv_specs") c.conv_specs = detail::parse_conv_specs(value);
            else if (key == "l2_lambda") c.l2_lambda = std::stod(value);
            else if (key == "freeze_embeddings") c.freeze_embeddings = detail::parse_bool(value);
            else if (key == "epochs") c.epochs = std::stoi(value);
            else if (key == "batch_size") c.batch_size = std::stoi(value);
            else if (key == "lr") c.lr = std::stod(value);
            else if (key == "momentum") c.momentum = std::stod(value);
            else if (key == "checkpoint_every") c.checkpoint_every = std::stoi(value);
            else if (key == "checkpoint_selection")
                c.checkpoint_selection = detail::parse_int_list(value);
            else if (key == "topk") c.topk = std::stoi(value);
            else if (key == "methods") c.methods = detail::split_list(value);
            else if (key == "damping") c.damping = std::stod(value);
            else if (key == "lambda_rep") c.lambda_rep = std::stod(value);
            else if (key == "syn_threshold") c.syn_threshold = std::stod(value);
            else if (key == "k_grid") c.k_grid = detail::parse_int_list(value);
            else if (key == "repeats") c.repeats = std::stoi(value);
            else if (key == "num_test_points") c.num_test_points = std::stoi(value);
            else if (key == "test_ids") c.test_ids = detail::parse_int_list(value);
            else if (key == "no_overlap_n") c.no_overlap_n = std::stoi(value);
            else if (key == "fix_band") {
                auto parts = detail::split_list(value);
                if (parts.size() != 2) throw ConfigError("fix_band needs two numbers");
                c.fix_band_lo = std::stod(parts[0]);
                c.fix_band_hi = std::stod(parts[1]);
            } else if (key == "fix_k") c.fix_k = std::stoi(value);
            else if (key == "fix_strategy") c.fix_strategy = value;
            else if (key == "fix_method") c.fix_method = value;
            else if (key == "fix_points") c.fix_points = std::stoi(value);
            else if (key == "cluster_runs") c.cluster_runs = std::stoi(value);
            else if (key == "hard_threshold") c.hard_threshold = std::stod(value);
            else if (key == "cluster_threshold") c.cluster_threshold = std::stod(value);
            else if (key == "cluster_min_size") c.cluster_min_size = std::stoi(value);
            else if (key == "cluster_max_epochs") c.cluster_max_epochs = std::stoi(value);
            else if (key == "cluster_patience") c.cluster_patience = std::stoi(value);
            else if (key == "cosine_pairs") c.cosine_pairs = std::stoi(value);
            else if (key == "bench_pairs") c.bench_pairs = std::stoi(value);
            else if (key == "bench_widen") c.bench_widen = std::stoi(value);
            else if (key == "synth_size") c.synth_size = std::stoi(value);
            else if (key == "synth_classes") c.synth_classes = std::stoi(value);
            else if (key == "synth_flip") c.synth_flip = std::stod(value);
            else if (key == "synth_flip_group") c.synth_flip_group = std::stoi(value);
            else if (key == "synth_ambiguity") c.synth_ambiguity = std::stod(value);
            else if (key == "threads") c.threads = std::stoi(value);
            else problems.push_back("unknown key: " + key);
        } catch (const std::exception& e) {
            problems.push_back(key + ": " + e.what());
        }
    }
    if (!problems.empty()) {
        std::string msg = "configuration errors:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

// Validation happens up front so a bad run dies before any compute starts.
inline void validate_config(const RunConfig& c, bool needs_corpus) {
    std::vector<std::string> problems;
    auto want = [&](bool ok, const std::string& msg) {
        if (!ok) problems.push_back(msg);
    };
    want(!needs_corpus || !c.corpus.empty(), "corpus path is required");
    want(c.format == "tsv" || c.format == "jsonl", "format must be tsv or jsonl");
    want(c.max_len >= 4, "max_len must be at least 4");
    want(c.vocab_max_size >= kNumSpecials + 1, "vocab_max_size too small for the specials");
    want(std::abs(c.split_train + c.split_val + c.split_test - 1.0) < 1e-9,
         "split fractions must sum to 1");
    want(c.embed_dim >= 1, "embed_dim must be positive");
    for (const auto& s : c.conv_specs) {
        want(s.kernel >= 1 && s.kernel % 2 == 1, "conv kernels must be odd");
        want(s.filters >= 1, "conv filters must be positive");
    }
    want(c.l2_lambda >= 0, "l2_lambda must be >= 0");
    want(c.epochs >= 1 && c.batch_size >= 1, "epochs and batch_size must be positive");
    want(c.lr > 0, "lr must be positive");
    want(c.momentum >= 0 && c.momentum < 1, "momentum must be in [0, 1)");
    want(c.checkpoint_every >= 1, "checkpoint_every must be >= 1");
    want(!c.checkpoint_selection.empty(), "checkpoint_selection must not be empty");
    want(c.topk >= 1, "topk must be >= 1");
    want(!c.methods.empty(), "method list must not be empty");
    want(c.damping >= 0, "damping must be >= 0");
    want(c.lambda_rep > 0, "lambda_rep must be positive");
    want(c.syn_threshold > 0 && c.syn_threshold <= 1, "syn_threshold must be in (0, 1]");
    want(!c.k_grid.empty(), "k_grid must not be empty");
    for (int k : c.k_grid) want(k >= 0, "k_grid entries must be >= 0");
    want(c.repeats >= 1, "repeats must be >= 1");
    want(c.num_test_points >= 1, "num_test_points must be >= 1");
    want(c.fix_band_lo >= 0 && c.fix_band_hi <= 1 && c.fix_band_lo < c.fix_band_hi,
         "fix_band must satisfy 0 <= lo < hi <= 1");
    want(c.fix_k >= 1, "fix_k must be >= 1");
    want(c.fix_strategy == "remove_examples" || c.fix_strategy == "pad_word",
         "fix_strategy must be remove_examples or pad_word");
    want(c.cluster_runs >= 1, "cluster_runs must be >= 1");
    want(c.hard_threshold > 0 && c.hard_threshold <= 1, "hard_threshold must be in (0, 1]");
    want(c.cluster_threshold > 0, "cluster_threshold must be positive");
    want(c.cluster_min_size >= 1, "cluster_min_size must be >= 1");
    want(c.threads >= 0, "threads must be >= 0");
    if (!problems.empty()) {
        std::string msg = "configuration errors:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

inline json run_config_to_json(const RunConfig& c) {
    json j;
    j["corpus"] = c.corpus;
    j["format"] = c.format;
    j["workdir"] = c.workdir;
    j["stopwords"] = c.stopwords_file;
    j["seed"] = c.seed;
    j["max_len"] = c.max_len;
    j["vocab_max_size"] = c.vocab_max_size;
    j["vocab_min_freq"] = c.vocab_min_freq;
    j["split"] = {c.split_train, c.split_val, c.split_test};
    j["embed_dim"] = c.embed_dim;
    json convs = json::array();
    for (const auto& s : c.conv_specs) convs.push_back({{"kernel", s.kernel}, {"filters", s.filters}});
    j["conv_specs"] = convs;
    j["l2_lambda"] = c.l2_lambda;
    j["freeze_embeddings"] = c.freeze_embeddings;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["checkpoint_every"] = c.checkpoint_every;
    j["checkpoint_selection"] = c.checkpoint_selection;
    j["topk"] = c.topk;
    j["methods"] = c.methods;
    j["damping"] = c.damping;
    j["lambda_rep"] = c.lambda_rep;
    j["syn_threshold"] = c.syn_threshold;
    j["k_grid"] = c.k_grid;
    j["repeats"] = c.repeats;
    j["num_test_points"] = c.num_test_points;
    j["test_ids"] = c.test_ids;
    j["no_overlap_n"] = c.no_overlap_n;
    j["fix_band"] = {c.fix_band_lo, c.fix_band_hi};
    j["fix_k"] = c.fix_k;
    j["fix_strategy"] = c.fix_strategy;
    j["fix_method"] = c.fix_method;
    j["fix_points"] = c.fix_points;
    j["cluster_runs"] = c.cluster_runs;
    j["hard_threshold"] = c.hard_threshold;
    j["cluster_threshold"] = c.cluster_threshold;
    j["cluster_min_size"] = c.cluster_min_size;
    j["cluster_max_epochs"] = c.cluster_max_epochs;
    j["cluster_patience"] = c.cluster_patience;
    j["cosine_pairs"] = c.cosine_pairs;
    j["bench_pairs"] = c.bench_pairs;
    j["bench_widen"] = c.bench_widen;
    j["synth_size"] = c.synth_size;
    j["synth_classes"] = c.synth_classes;
    j["synth_flip"] = c.synth_flip;
    j["synth_flip_group"] = c.synth_flip_group;
    j["synth_ambiguity"] = c.synth_ambiguity;
    j["threads"] = c.threads;
    j["code_version"] = code_version();
    return j;
}

}  // namespace tdinf
