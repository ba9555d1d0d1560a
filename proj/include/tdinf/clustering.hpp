#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tdinf/influence.hpp"
#include "tdinf/jobs.hpp"
#include "tdinf/model.hpp"

namespace tdinf {

struct EarlyStopConfig {
    int patience = 3;  // epochs without val-loss improvement
    int max_epochs = 15;
};

// Trains with early stopping and returns the model restored to its best
// validation-loss epoch.
inline Model train_early_stopped(const ModelConfig& cfg, const Dataset& train_set,
                                 const Dataset& val_set, TrainHyper hyper,
                                 const EarlyStopConfig& es) {
    hyper.epochs = es.max_epochs;
    hyper.checkpoint_every = 1;
    Model m = init_model(cfg);
    double best_loss = std::numeric_limits<double>::infinity();
    Params best = m.p;
    int since_best = 0;
    train(m, train_set, hyper, {}, [&](int, const Model& cur) {
        double vl = mean_loss(cur, val_set);
        if (vl < best_loss) {
            best_loss = vl;
            best = cur.p;
            since_best = 0;
        } else {
            ++since_best;
        }
        return since_best >= es.patience;
    });
    m.p = std::move(best);
    return m;
}

struct HardExampleSet {
    std::vector<int> ids;               // rate >= threshold
    std::map<int, double> rate;         // id -> misclassification rate over runs
    int runs = 0;
    double threshold = 0.0;
};

// Trains `runs` seeded models (early-stopped at their best validation loss)
// and keeps the examples misclassified in at least `threshold` of them.
inline HardExampleSet select_hard(const Dataset& train_set, const Dataset& val_set, int runs,
                                  double threshold, const ModelConfig& cfg_base,
                                  const TrainHyper& hyper, const EarlyStopConfig& es,
                                  std::uint64_t base_seed, int n_threads = 1) {
    if (runs < 1) throw ConfigError("select_hard needs at least one run");
    std::vector<std::vector<char>> wrong = parallel_map<std::vector<char>>(
        runs, n_threads, [&](int r) {
            ModelConfig cfg = cfg_base;
            cfg.seed = splitmix64(base_seed ^ static_cast<std::uint64_t>(r + 1));
            Model m = train_early_stopped(cfg, train_set, val_set, hyper, es);
            std::vector<char> miss(train_set.size());
            for (std::size_t i = 0; i < train_set.size(); ++i)
                miss[i] = predict_class(m, train_set.examples[i]) != train_set.examples[i].label;
            return miss;
        });

    HardExampleSet hs;
    hs.runs = runs;
    hs.threshold = threshold;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        int n = 0;
        for (int r = 0; r < runs; ++r) n += wrong[static_cast<std::size_t>(r)][i];
        double rate = static_cast<double>(n) / static_cast<double>(runs);
        int id = train_set.examples[i].id;
        hs.rate[id] = rate;
        if (rate >= threshold) hs.ids.push_back(id);
    }
    return hs;
}

// Average-linkage agglomerative clustering: merge the closest pair until the
// minimum inter-cluster distance exceeds the threshold. Ties break on the
// smallest member ids, so the output is deterministic. Returns every cluster
// (including singletons), each sorted, ordered by smallest member id.
inline std::vector<std::vector<int>> agglomerative(const DistanceMatrix& dm, double threshold) {
    dm.check_symmetric();
    const std::size_t n = dm.ids.size();
    std::vector<std::vector<int>> members(n);
    std::vector<char> alive(n, 1);
    for (std::size_t i = 0; i < n; ++i) members[i] = {dm.ids[i]};
    std::vector<double> dist = dm.d;  // cluster-level distances, Lance-Williams average

    while (true) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = n, bj = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (!alive[i]) continue;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (!alive[j]) continue;
                double d = dist[i * n + j];
                bool better = d < best;
                if (d == best && bi < n) {
                    int cand_a = members[i].front(), cand_b = members[j].front();
                    int cur_a = members[bi].front(), cur_b = members[bj].front();
                    better = std::pair(cand_a, cand_b) < std::pair(cur_a, cur_b);
                }
                if (better) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        if (bi == n || best > threshold) break;

        const double wa = static_cast<double>(members[bi].size());
        const double wb = static_cast<double>(members[bj].size());
        for (std::size_t k = 0; k < n; ++k) {
            if (!alive[k] || k == bi || k == bj) continue;
            double d = (wa * dist[bi * n + k] + wb * dist[bj * n + k]) / (wa + wb);
            dist[bi * n + k] = dist[k * n + bi] = d;
        }
        members[bi].insert(members[bi].end(), members[bj].begin(), members[bj].end());
        std::sort(members[bi].begin(), members[bi].end());
        alive[bj] = 0;
    }

    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < n; ++i)
        if (alive[i]) out.push_back(std::move(members[i]));
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return out;
}

// Words that most often land in the top-5 contributions of pairwise scores
// within a cluster. pair_contribs(a, b) returns the word-level decomposition
// of the influence between two members.
inline std::vector<std::pair<int, int>> common_words(
    const std::vector<int>& cluster,
    const std::function<std::map<int, double>(int, int)>& pair_contribs, int top_per_pair = 5) {
    std::map<int, int> counts;
    for (std::size_t i = 0; i < cluster.size(); ++i) {
        for (std::size_t j = i + 1; j < cluster.size(); ++j) {
            auto contribs = pair_contribs(cluster[i], cluster[j]);
            std::vector<std::pair<int, double>> v(contribs.begin(), contribs.end());
            std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
                return std::abs(a.second) > std::abs(b.second);
            });
            if (static_cast<int>(v.size()) > top_per_pair)
                v.resize(static_cast<std::size_t>(top_per_pair));
            for (const auto& [w, c] : v) ++counts[w];
        }
    }
    std::vector<std::pair<int, int>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return ranked;
}

struct ClusterReport {
    struct Cluster {
        std::vector<int> ids;
        std::vector<std::pair<int, int>> common_words;  // word id, pair count
        std::map<int, int> true_labels;                 // label -> count
        std::map<int, int> pred_labels;
    };
    std::vector<Cluster> clusters;
    int min_size = 3;
    int hard_count = 0;
};

inline ClusterReport build_cluster_report(
    const std::vector<std::vector<int>>& raw_clusters, int min_size,
    const std::function<std::map<int, double>(int, int)>& pair_contribs,
    const std::function<const Example&(int)>& example_by_id,
    const std::function<int(const Example&)>& predictor) {
    ClusterReport rep;
    rep.min_size = min_size;
    for (const auto& c : raw_clusters) {
        if (static_cast<int>(c.size()) < min_size) continue;
        ClusterReport::Cluster cl;
        cl.ids = c;
        cl.common_words = common_words(c, pair_contribs);
        for (int id : c) {
            const Example& e = example_by_id(id);
            ++cl.true_labels[e.label];
            ++cl.pred_labels[predictor(e)];
        }
        rep.clusters.push_back(std::move(cl));
    }
    std::sort(rep.clusters.begin(), rep.clusters.end(), [](const auto& a, const auto& b) {
        if (a.ids.size() != b.ids.size()) return a.ids.size() > b.ids.size();
        return a.ids.front() < b.ids.front();
    });
    return rep;
}

inline std::string render_cluster_report_markdown(
    const ClusterReport& rep, const Vocab& vocab,
    const std::function<const Example&(int)>& example_by_id,
    const std::map<int, std::string>& label_names) {
    std::string out;
    out += "| Cluster | Size | Common words | Predicted labels | True labels |\n";
    out += "|---|---|---|---|---|\n";
    auto label_dist = [&](const std::map<int, int>& m) {
        std::string s;
        for (const auto& [l, n] : m) {
            if (!s.empty()) s += ", ";
            s += label_names.at(l) + ":" + std::to_string(n);
        }
        return s;
    };
    int idx = 1;
    for (const auto& c : rep.clusters) {
        std::string words;
        for (std::size_t i = 0; i < c.common_words.size() && i < 5; ++i) {
            if (!words.empty()) words += ", ";
            words += vocab.token_of(c.common_words[i].first);
        }
        out += "| " + std::to_string(idx++) + " | " + std::to_string(c.ids.size()) + " | " +
               words + " | " + label_dist(c.pred_labels) + " | " + label_dist(c.true_labels) +
               " |\n";
    }
    out += "\n";
    idx = 1;
    for (const auto& c : rep.clusters) {
        out += "### Cluster " + std::to_string(idx++) + "\n";
        for (int id : c.ids) out += "- [" + std::to_string(id) + "] " + example_by_id(id).text + "\n";
        out += "\n";
    }
    return out;
}

}  // namespace tdinf
