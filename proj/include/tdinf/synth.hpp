#pragma once

#include <set>
#include <string>
#include <vector>

#include "tdinf/corpus.hpp"
#include "tdinf/rng.hpp"

namespace tdinf {

// Synthetic news-style corpus: each class owns a keyword pool; sentences mix
// class keywords with shared noise words, stopwords and punctuation. The
// `ambiguity` knob leaks keywords across classes, `flip_fraction` mislabels
// a deterministic subset (returned for harness oracles).

struct SynthSpec {
    int num_classes = 4;
    int size = 2000;
    int keywords_per_class = 40;
    int noise_words = 300;
    int min_content = 6;
    int max_content = 13;
    double keyword_prob = 0.42;   // content slot draws a class keyword
    double stopword_prob = 0.28;  // ... or a stopword
    double ambiguity = 0.08;      // keyword slot leaks from another class
    double flip_fraction = 0.0;
    // Flips arrive as families of near-duplicate sentences sharing a wrong
    // label (labeling-artifact style); 1 flips independent random sentences.
    int flip_group_size = 1;
    std::uint64_t seed = 1;
};

struct SynthCorpus {
    std::vector<RawRecord> records;
    std::vector<int> flipped;  // record indices whose label was flipped
    std::vector<std::string> class_names;
};

namespace detail {

inline std::vector<std::string> make_pseudo_words(Rng& rng, int count,
                                                  std::set<std::string>& used) {
    static const std::vector<std::string> syllables = {
        "ba", "do", "ke", "mi", "ra", "tu", "zo", "ne", "pa", "li",
        "ver", "sun", "tor", "mel", "qua", "fin", "gor", "hax", "jin", "lum",
        "sa", "re", "no", "vi", "ta", "ku", "pel", "mar", "den", "osh"};
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < count) {
        int parts = rng.next_int(2, 3);
        std::string w;
        for (int i = 0; i < parts; ++i) w += rng.pick(syllables);
        if (used.insert(w).second) out.push_back(w);
    }
    return out;
}

}  // namespace detail

inline SynthCorpus synth_corpus(const SynthSpec& spec) {
    SynthCorpus out;
    for (int c = 0; c < spec.num_classes; ++c) {
        static const std::vector<std::string> stock = {"world",   "sport", "business",
                                                       "science", "arts",  "health"};
        out.class_names.push_back(c < static_cast<int>(stock.size())
                                      ? stock[static_cast<std::size_t>(c)]
                                      : "class" + std::to_string(c));
    }

    Rng words_rng(spec.seed, "synth-words");
    std::set<std::string> used;
    std::vector<std::vector<std::string>> keywords;
    for (int c = 0; c < spec.num_classes; ++c)
        keywords.push_back(detail::make_pseudo_words(words_rng, spec.keywords_per_class, used));
    std::vector<std::string> noise = detail::make_pseudo_words(words_rng, spec.noise_words, used);
    const auto& stops = default_stopwords();
    static const std::vector<std::string> punct = {".", ",", "!", "?"};

    Rng rng(spec.seed, "synth-sentences");
    for (int i = 0; i < spec.size; ++i) {
        int label = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.num_classes)));
        int len = rng.next_int(spec.min_content, spec.max_content);
        std::string text;
        for (int t = 0; t < len; ++t) {
            double u = rng.next_double();
            std::string w;
            if (u < spec.keyword_prob) {
                int cls = label;
                if (rng.next_double() < spec.ambiguity) {
                    cls = static_cast<int>(
                        rng.next_below(static_cast<std::uint64_t>(spec.num_classes - 1)));
                    if (cls >= label) ++cls;
                }
                w = rng.pick(keywords[static_cast<std::size_t>(cls)]);
            } else if (u < spec.keyword_prob + spec.stopword_prob) {
                w = rng.pick(stops);
            } else {
                w = rng.pick(noise);
            }
            if (!text.empty()) text += ' ';
            text += w;
        }
        if (rng.next_double() < 0.7) text += " " + rng.pick(punct);
        out.records.push_back({out.class_names[static_cast<std::size_t>(label)], text});
    }

    if (spec.flip_fraction > 0.0) {
        Rng flip_rng(spec.seed, "synth-flips");
        const int n_flip =
            static_cast<int>(spec.flip_fraction * static_cast<double>(out.records.size()));
        std::vector<int> idx(out.records.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        flip_rng.shuffle(idx);

        if (spec.flip_group_size <= 1) {
            for (int i = 0; i < n_flip; ++i) {
                int rec = idx[static_cast<std::size_t>(i)];
                auto& r = out.records[static_cast<std::size_t>(rec)];
                int cur = 0;
                for (int c = 0; c < spec.num_classes; ++c)
                    if (out.class_names[static_cast<std::size_t>(c)] == r.label) cur = c;
                int other = static_cast<int>(
                    flip_rng.next_below(static_cast<std::uint64_t>(spec.num_classes - 1)));
                if (other >= cur) ++other;
                r.label = out.class_names[static_cast<std::size_t>(other)];
                out.flipped.push_back(rec);
            }
        } else {
            // labeling-artifact families: each template yields near-duplicate
            // variants, half keeping the true label and half mislabeled. The
            // inconsistent halves cannot both be fit, so the family stays
            // hard to learn and its mislabeled members are mutual proponents.
            int written = 0;  // counts mislabeled members
            int cursor = 0;   // walks the shuffled record indices
            while (written < n_flip) {
                int group = std::min(spec.flip_group_size, n_flip - written);
                int true_class = static_cast<int>(
                    flip_rng.next_below(static_cast<std::uint64_t>(spec.num_classes)));
                int wrong = static_cast<int>(
                    flip_rng.next_below(static_cast<std::uint64_t>(spec.num_classes - 1)));
                if (wrong >= true_class) ++wrong;

                int len = spec.min_content +
                          static_cast<int>(flip_rng.next_below(static_cast<std::uint64_t>(
                              spec.max_content - spec.min_content + 1)));
                std::vector<std::string> tmpl;
                for (int t = 0; t < len; ++t) {
                    double u = flip_rng.next_double();
                    if (u < 0.55)
                        tmpl.push_back(
                            flip_rng.pick(keywords[static_cast<std::size_t>(true_class)]));
                    else if (u < 0.75)
                        tmpl.push_back(flip_rng.pick(stops));
                    else
                        tmpl.push_back(flip_rng.pick(noise));
                }
                auto variant = [&] {
                    std::vector<std::string> words = tmpl;
                    int edits = 1 + static_cast<int>(flip_rng.next_below(2));
                    for (int e = 0; e < edits; ++e) {
                        std::size_t pos =
                            static_cast<std::size_t>(flip_rng.next_below(words.size()));
                        words[pos] = flip_rng.pick(noise);
                    }
                    std::string text;
                    for (const auto& w : words) {
                        if (!text.empty()) text += ' ';
                        text += w;
                    }
                    return text;
                };
                for (int g = 0; g < 2 * group && cursor < static_cast<int>(idx.size()); ++g) {
                    int rec = idx[static_cast<std::size_t>(cursor++)];
                    bool mislabeled = g < group;
                    out.records[static_cast<std::size_t>(rec)] = {
                        out.class_names[static_cast<std::size_t>(mislabeled ? wrong : true_class)],
                        variant()};
                    if (mislabeled) {
                        out.flipped.push_back(rec);
                        ++written;
                    }
                }
            }
        }
        std::sort(out.flipped.begin(), out.flipped.end());
    }
    return out;
}

}  // namespace tdinf
