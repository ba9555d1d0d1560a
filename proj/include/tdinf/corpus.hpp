#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdinf/io.hpp"
#include "tdinf/rng.hpp"

namespace tdinf {

using json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kStartId = 2;
inline constexpr int kEndId = 3;
inline constexpr int kNumSpecials = 4;

inline const char* kPadTok = "[PAD]";
inline const char* kUnkTok = "[UNK]";
inline const char* kStartTok = "[START]";
inline const char* kEndTok = "[END]";

// Default stopword list; the same 25 words ship in data/stopwords.txt and
// can be overridden there or via config.
inline const std::vector<std::string>& default_stopwords() {
    static const std::vector<std::string> words = {
        "a", "an", "the", "and", "or", "but", "if", "then", "so",
        "of", "to", "in", "on", "at", "by", "for", "with", "as",
        "is", "are", "was", "be", "it", "this", "that"};
    return words;
}

inline const std::vector<std::string>& common_punctuation() {
    static const std::vector<std::string> toks = {".", ",", "!", "?"};
    return toks;
}

// Lowercase word tokenizer: letter/digit runs are words, every other
// printable character is its own token. Bytes >= 0x80 are treated as word
// characters so UTF-8 sequences stay inside one token.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (unsigned char c : text) {
        if (c >= 0x80 || std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    flush();
    return out;
}

struct Vocab {
    std::vector<std::string> tokens;          // id -> token, specials first
    std::unordered_map<std::string, int> index;
    std::set<int> common_set;                 // start/end + stopwords + punctuation

    int size() const { return static_cast<int>(tokens.size()); }

    int id_of(const std::string& tok) const {
        auto it = index.find(tok);
        return it == index.end() ? kUnkId : it->second;
    }

    const std::string& token_of(int id) const { return tokens.at(static_cast<std::size_t>(id)); }

    bool is_special(int id) const { return id < kNumSpecials; }
    bool is_common(int id) const { return common_set.count(id) > 0; }

    void check() const {
        if (size() < kNumSpecials) throw ConfigError("vocab missing specials");
        for (int i = 0; i < size(); ++i) {
            auto it = index.find(tokens[static_cast<std::size_t>(i)]);
            if (it == index.end() || it->second != i)
                throw std::runtime_error("vocab index is not a bijection");
        }
        for (int id : common_set)
            if (id < 0 || id >= size()) throw std::runtime_error("common_set id out of range");
    }
};

struct Example {
    int id = -1;
    std::string text;
    std::vector<int> token_ids;  // [START] ... [END], padded to max_len
    int label = -1;

    int length() const {  // non-pad token count
        int n = 0;
        for (int t : token_ids)
            if (t != kPadId) ++n;
        return n;
    }
};

struct Dataset {
    std::vector<Example> examples;
    int num_classes = 0;
    std::string split_tag = "train";

    std::size_t size() const { return examples.size(); }
    const Example& by_id(int id) const {
        for (const auto& e : examples)
            if (e.id == id) return e;
        throw std::runtime_error("example id not found: " + std::to_string(id));
    }
};

// Label names <-> dense class ids, persisted next to checkpoints so that
// val/test files are mapped consistently with the train split.
struct LabelMap {
    std::map<std::string, int> to_id;

    int id_or_throw(const std::string& name, int line_no) const {
        auto it = to_id.find(name);
        if (it == to_id.end())
            throw std::runtime_error("line " + std::to_string(line_no) +
                                     ": label not in train label map: " + name);
        return it->second;
    }

    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : to_id) j[k] = v;
        return j;
    }

    static LabelMap from_json(const json& j) {
        LabelMap m;
        for (auto it = j.begin(); it != j.end(); ++it) m.to_id[it.key()] = it.value().get<int>();
        return m;
    }
};

inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab, int max_len) {
    std::vector<std::string> words = split_words(text);
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(max_len));
    ids.push_back(kStartId);
    for (const auto& w : words) {
        if (static_cast<int>(ids.size()) >= max_len - 1) break;
        ids.push_back(vocab.id_of(w));
    }
    ids.push_back(kEndId);
    ids.resize(static_cast<std::size_t>(max_len), kPadId);
    return ids;
}

inline std::string decode(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == kPadId || id == kStartId || id == kEndId) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token_of(id);
    }
    return out;
}

struct VocabOptions {
    int max_size = 20000;
    int min_freq = 1;
    std::vector<std::string> stopwords = default_stopwords();
};

// Frequency-ranked vocabulary over raw texts. Ties broken lexicographically
// so the result does not depend on input order.
inline Vocab build_vocab(const std::vector<std::string>& texts, const VocabOptions& opt = {}) {
    if (opt.max_size < kNumSpecials + 1)
        throw ConfigError("vocab max_size must be at least " + std::to_string(kNumSpecials + 1));
    if (texts.empty()) throw ConfigError("cannot build vocab from empty corpus");

    std::map<std::string, long long> freq;
    for (const auto& t : texts)
        for (const auto& w : split_words(t)) ++freq[w];

    std::vector<std::pair<std::string, long long>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.tokens = {kPadTok, kUnkTok, kStartTok, kEndTok};
    for (const auto& [tok, n] : ranked) {
        if (static_cast<int>(v.tokens.size()) >= opt.max_size) break;
        if (n < opt.min_freq) break;
        v.tokens.push_back(tok);
    }
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i)
        v.index[v.tokens[static_cast<std::size_t>(i)]] = i;

    v.common_set = {kStartId, kEndId};
    for (const auto& p : common_punctuation()) {
        auto it = v.index.find(p);
        if (it != v.index.end()) v.common_set.insert(it->second);
    }
    for (const auto& w : opt.stopwords) {
        auto it = v.index.find(w);
        if (it != v.index.end()) v.common_set.insert(it->second);
    }
    v.check();
    return v;
}

inline json vocab_to_json(const Vocab& v) {
    json j;
    j["tokens"] = v.tokens;
    j["special"] = {{"pad", kPadId}, {"unk", kUnkId}, {"start", kStartId}, {"end", kEndId}};
    j["common_set"] = std::vector<int>(v.common_set.begin(), v.common_set.end());
    return j;
}

inline Vocab vocab_from_json(const json& j) {
    Vocab v;
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (int i = 0; i < static_cast<int>(v.tokens.size()); ++i)
        v.index[v.tokens[static_cast<std::size_t>(i)]] = i;
    for (int id : j.at("common_set").get<std::vector<int>>()) v.common_set.insert(id);
    v.check();
    return v;
}

inline void save_vocab(const Vocab& v, const fs::path& path) {
    write_text_file_atomic(path, vocab_to_json(v).dump(2) + "\n");
}

inline Vocab load_vocab(const fs::path& path) {
    return vocab_from_json(json::parse(read_text_file(path)));
}

// ---------------------------------------------------------------------------
// Raw record loading (labels still strings, no tokenization yet).

struct RawRecord {
    std::string label;
    std::string text;
};

inline std::vector<RawRecord> load_tsv(const fs::path& path) {
    std::string content = read_text_file(path);
    std::vector<RawRecord> out;
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < content.size()) {
        std::size_t eol = content.find('\n', pos);
        if (eol == std::string::npos) eol = content.size();
        ++line_no;
        std::string line = content.substr(pos, eol - pos);
        pos = eol + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                                     ": expected label<TAB>text");
        out.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    return out;
}

inline std::vector<RawRecord> load_jsonl(const fs::path& path) {
    std::string content = read_text_file(path);
    std::vector<RawRecord> out;
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < content.size()) {
        std::size_t eol = content.find('\n', pos);
        if (eol == std::string::npos) eol = content.size();
        ++line_no;
        std::string line = content.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                                     ": bad JSON: " + e.what());
        }
        if (!j.contains("label") || !j.contains("text"))
            throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) +
                                     ": record needs label and text");
        std::string label = j["label"].is_string() ? j["label"].get<std::string>()
                                                   : std::to_string(j["label"].get<long long>());
        out.push_back({label, j["text"].get<std::string>()});
    }
    return out;
}

inline std::vector<RawRecord> load_raw(const fs::path& path, const std::string& format) {
    if (format == "tsv") return load_tsv(path);
    if (format == "jsonl") return load_jsonl(path);
    throw ConfigError("unknown dataset format: " + format);
}

// Builds the label map from the records themselves (train split usage):
// dense ids assigned in sorted label order.
inline LabelMap build_label_map(const std::vector<RawRecord>& records) {
    std::set<std::string> labels;
    for (const auto& r : records) labels.insert(r.label);
    LabelMap m;
    int next = 0;
    for (const auto& l : labels) m.to_id[l] = next++;
    return m;
}

inline Dataset encode_dataset(const std::vector<RawRecord>& records, const Vocab& vocab,
                              const LabelMap& labels, int max_len,
                              const std::string& split_tag = "train", int first_id = 0) {
    Dataset d;
    d.split_tag = split_tag;
    d.num_classes = static_cast<int>(labels.to_id.size());
    int id = first_id;
    int line_no = 0;
    for (const auto& r : records) {
        ++line_no;
        Example e;
        e.id = id++;
        e.text = r.text;
        e.label = labels.id_or_throw(r.label, line_no);
        e.token_ids = tokenize(r.text, vocab, max_len);
        d.examples.push_back(std::move(e));
    }
    return d;
}

inline void save_tsv(const Dataset& d, const std::map<int, std::string>& id_to_label,
                     const fs::path& path) {
    std::string out;
    for (const auto& e : d.examples) {
        out += id_to_label.at(e.label);
        out += '\t';
        out += e.text;
        out += '\n';
    }
    write_text_file_atomic(path, out);
}

inline std::map<int, std::string> invert_label_map(const LabelMap& m) {
    std::map<int, std::string> inv;
    for (const auto& [k, v] : m.to_id) inv[v] = k;
    return inv;
}

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

struct Splits {
    Dataset train, val, test;
};

// Deterministic for a fixed seed: permutation drawn from the "split"
// substream, examples keep their original ids.
inline Splits split(const Dataset& all, std::uint64_t seed, SplitFractions f = {}) {
    if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
    const std::size_t n = all.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed, "split");
    rng.shuffle(order);

    auto n_train = static_cast<std::size_t>(f.train * static_cast<double>(n));
    auto n_val = static_cast<std::size_t>(f.val * static_cast<double>(n));
    std::size_t n_test = n - n_train - n_val;
    if (n_train == 0 || n_val == 0 || n_test == 0)
        throw ConfigError("split produces an empty subset");

    Splits s;
    s.train.num_classes = s.val.num_classes = s.test.num_classes = all.num_classes;
    s.train.split_tag = "train";
    s.val.split_tag = "val";
    s.test.split_tag = "test";
    for (std::size_t i = 0; i < n; ++i) {
        const Example& e = all.examples[order[i]];
        if (i < n_train)
            s.train.examples.push_back(e);
        else if (i < n_train + n_val)
            s.val.examples.push_back(e);
        else
            s.test.examples.push_back(e);
    }
    std::set<int> train_labels;
    for (const auto& e : s.train.examples) train_labels.insert(e.label);
    if (static_cast<int>(train_labels.size()) != all.num_classes)
        throw ConfigError("train split does not cover every label class");
    return s;
}

}  // namespace tdinf
