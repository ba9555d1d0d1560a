#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tdinf/influence.hpp"
#include "tdinf/jobs.hpp"
#include "tdinf/model.hpp"
#include "tdinf/similarity.hpp"

namespace tdinf {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Standard error of the mean via bootstrap resampling (deterministic seed).
inline double bootstrap_se(const std::vector<double>& values, int n_boot, std::uint64_t seed) {
    if (values.size() < 2) return 0.0;
    Rng rng(seed, "bootstrap");
    std::vector<double> means;
    means.reserve(static_cast<std::size_t>(n_boot));
    for (int b = 0; b < n_boot; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i)
            s += values[static_cast<std::size_t>(rng.next_below(values.size()))];
        means.push_back(s / static_cast<double>(values.size()));
    }
    double m = mean_of(means), sq = 0.0;
    for (double x : means) sq += (x - m) * (x - m);
    return std::sqrt(sq / static_cast<double>(means.size() - 1));
}

// Percentile bootstrap CI for the mean.
inline std::pair<double, double> bootstrap_ci_mean(const std::vector<double>& values, int n_boot,
                                                   std::uint64_t seed, double alpha = 0.05) {
    Rng rng(seed, "bootstrap-ci");
    std::vector<double> means;
    means.reserve(static_cast<std::size_t>(n_boot));
    for (int b = 0; b < n_boot; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i)
            s += values[static_cast<std::size_t>(rng.next_below(values.size()))];
        means.push_back(s / static_cast<double>(values.size()));
    }
    std::sort(means.begin(), means.end());
    auto at = [&](double q) {
        double idx = q * static_cast<double>(means.size() - 1);
        return means[static_cast<std::size_t>(idx)];
    };
    return {at(alpha / 2), at(1.0 - alpha / 2)};
}

// AUC-DEL: the mean of the curve over the k grid.
inline double auc(const std::vector<double>& values, const std::vector<int>& k_grid) {
    if (k_grid.empty()) throw ConfigError("auc: empty k grid");
    if (values.size() != k_grid.size()) throw ConfigError("auc: curve/grid size mismatch");
    return mean_of(values);
}

// ---------------------------------------------------------------------------
// Retraining protocol. Every retrain starts from scratch with seed
// base_seed + i; the same seeds are reused for the no-removal baseline, so
// baseline and deletion runs share init and shuffle streams.

struct RetrainProtocol {
    ModelConfig model_cfg;  // seed field is overridden per retrain
    TrainHyper hyper;
    std::uint64_t base_seed = 1000;
    int repeats = 5;
    int n_threads = 1;
};

inline Model retrain_once(const Dataset& train_set, const std::set<int>& removed, ModelConfig cfg,
                          const TrainHyper& hyper, std::uint64_t seed,
                          std::uint64_t* order_checksum = nullptr) {
    cfg.seed = seed;
    Model m = init_model(cfg);
    TrainResult res = train(m, train_set, hyper, removed);
    if (order_checksum) *order_checksum = res.order_checksum;
    return m;
}

inline std::vector<Model> retrain_ensemble(const Dataset& train_set, const std::set<int>& removed,
                                           const RetrainProtocol& proto) {
    return parallel_map<Model>(proto.repeats, proto.n_threads, [&](int i) {
        return retrain_once(train_set, removed, proto.model_cfg, proto.hyper,
                            proto.base_seed + static_cast<std::uint64_t>(i));
    });
}

struct DeletionCurve {
    int test_id = -1;
    std::string method;
    std::vector<int> k_grid;
    std::vector<double> del_plus, del_minus;              // per k, mean over repeats
    std::vector<double> stderr_plus, stderr_minus;        // per k, bootstrap
    std::vector<std::vector<double>> per_seed_plus;       // [k][seed]
    std::vector<std::vector<double>> per_seed_minus;
    int repeats = 0;
    double auc_plus = 0.0, auc_minus = 0.0;
};

// DEL+/DEL-: retrain with the top-k proponents (opponents) removed and
// report the change of the groundtruth-class probability against the
// baseline mean over the same seeds. k=0 entries reuse the baseline runs.
inline DeletionCurve deletion_eval(const Dataset& train_set, const Example& x_test,
                                   const std::string& method, const Ranking& ranking,
                                   const std::vector<int>& k_grid, const RetrainProtocol& proto,
                                   const std::vector<double>* baseline_probs_in = nullptr) {
    for (int k : k_grid)
        if (k < 0 || k >= static_cast<int>(train_set.size()))
            throw ConfigError("deletion k must be in [0, |train|)");
    if (ranking.proponents.size() < static_cast<std::size_t>(
            *std::max_element(k_grid.begin(), k_grid.end())))
        throw ConfigError("ranking shorter than max k");

    DeletionCurve curve;
    curve.test_id = x_test.id;
    curve.method = method;
    curve.k_grid = k_grid;
    curve.repeats = proto.repeats;

    std::vector<double> baseline;
    if (baseline_probs_in) {
        baseline = *baseline_probs_in;
    } else {
        auto models = retrain_ensemble(train_set, {}, proto);
        for (const auto& m : models)
            baseline.push_back(predict_prob(m, x_test, x_test.label));
    }
    const double baseline_mean = mean_of(baseline);

    struct Job {
        std::set<int> removed;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    auto removal_set = [&](bool plus, int k) {
        std::set<int> ids;
        const auto& side = plus ? ranking.proponents : ranking.opponents;
        for (int i = 0; i < k; ++i) ids.insert(side[static_cast<std::size_t>(i)].first);
        return ids;
    };
    std::vector<std::pair<int, int>> job_slot;  // (k index, side 0=+,1=-) per repeat block
    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
        for (int side = 0; side < 2; ++side) {
            if (k_grid[ki] == 0) continue;
            for (int rep = 0; rep < proto.repeats; ++rep) {
                jobs.push_back({removal_set(side == 0, k_grid[ki]),
                                proto.base_seed + static_cast<std::uint64_t>(rep)});
                job_slot.push_back({static_cast<int>(ki), side});
            }
        }
    }

    std::vector<double> probs = parallel_map<double>(
        static_cast<int>(jobs.size()), proto.n_threads, [&](int i) {
            const Job& j = jobs[static_cast<std::size_t>(i)];
            Model m = retrain_once(train_set, j.removed, proto.model_cfg, proto.hyper, j.seed);
            return predict_prob(m, x_test, x_test.label);
        });

    curve.per_seed_plus.assign(k_grid.size(), {});
    curve.per_seed_minus.assign(k_grid.size(), {});
    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
        if (k_grid[ki] == 0) {
            for (double p : baseline) {
                curve.per_seed_plus[ki].push_back(p - baseline_mean);
                curve.per_seed_minus[ki].push_back(p - baseline_mean);
            }
        }
    }
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        auto [ki, side] = job_slot[i];
        double del = probs[i] - baseline_mean;
        if (side == 0)
            curve.per_seed_plus[static_cast<std::size_t>(ki)].push_back(del);
        else
            curve.per_seed_minus[static_cast<std::size_t>(ki)].push_back(del);
    }

    for (std::size_t ki = 0; ki < k_grid.size(); ++ki) {
        curve.del_plus.push_back(mean_of(curve.per_seed_plus[ki]));
        curve.del_minus.push_back(mean_of(curve.per_seed_minus[ki]));
        curve.stderr_plus.push_back(bootstrap_se(curve.per_seed_plus[ki], 200,
                                                 proto.base_seed + 17 * ki));
        curve.stderr_minus.push_back(bootstrap_se(curve.per_seed_minus[ki], 200,
                                                  proto.base_seed + 31 * ki));
    }
    curve.auc_plus = auc(curve.del_plus, k_grid);
    curve.auc_minus = auc(curve.del_minus, k_grid);
    return curve;
}

// The n training examples with the smallest TF-IDF similarity to the test
// sentence (ties by id): the candidate pool for the no-word-overlap setup.
inline std::vector<int> no_overlap_candidates(const Example& x_test, const Dataset& train_set, int n,
                                              const TfIdfModel& tfidf) {
    std::vector<std::pair<double, int>> sims;
    for (const auto& e : train_set.examples) sims.push_back({tfidf_cosine(tfidf, e, x_test), e.id});
    std::sort(sims.begin(), sims.end());
    std::vector<int> ids;
    for (int i = 0; i < n && i < static_cast<int>(sims.size()); ++i)
        ids.push_back(sims[static_cast<std::size_t>(i)].second);
    return ids;
}

// ---------------------------------------------------------------------------
// Targeted fixing of one misclassification.

enum class FixStrategy { RemoveExamples, PadWord };

struct FixReport {
    int test_id = -1;
    std::string method;
    std::string strategy;
    std::vector<int> k_grid;
    std::vector<double> fix_prob;     // per k, fraction of repeats now correct
    double baseline_flip_rate = 0.0;  // k = 0: plain retrain already fixes it
    double accuracy_delta = 0.0;      // train-set accuracy change at max k
    int repeats = 0;
};

// Validates the Appendix-style preconditions: the baseline model must
// misclassify x_test with groundtruth probability inside the band.
inline void check_fixable(const Model& baseline, const Example& x_test, double band_lo,
                          double band_hi) {
    double p = predict_prob(baseline, x_test, x_test.label);
    if (predict_class(baseline, x_test) == x_test.label)
        throw ConfigError("fix_eval: test example is not misclassified by the baseline");
    if (p < band_lo || p > band_hi)
        throw ConfigError("fix_eval: groundtruth probability outside the configured band");
}

// Strategy (b) edit: in each listed sentence, the first occurrence of its
// chosen word becomes [PAD]. Exactly one token per sentence changes.
inline Dataset pad_word_edit(const Dataset& train_set, const std::vector<int>& sentence_ids,
                             const std::map<int, int>& word_choice) {
    Dataset edited = train_set;
    for (int id : sentence_ids) {
        int word = word_choice.at(id);
        for (auto& e : edited.examples) {
            if (e.id != id) continue;
            auto it = std::find(e.token_ids.begin(), e.token_ids.end(), word);
            if (it != e.token_ids.end()) *it = kPadId;
            break;
        }
    }
    return edited;
}

// pad_word_choice maps opponent id -> word id whose first occurrence gets
// replaced by [PAD] (strategy b).
inline FixReport fix_eval(const Dataset& train_set, const Example& x_test, const std::string& method,
                          const Ranking& ranking, FixStrategy strategy,
                          const std::vector<int>& k_grid, const RetrainProtocol& proto,
                          const std::map<int, int>* pad_word_choice = nullptr) {
    if (ranking.opponents.empty()) throw ConfigError("fix_eval: no opponents available");
    int max_k = *std::max_element(k_grid.begin(), k_grid.end());
    if (max_k > static_cast<int>(ranking.opponents.size()))
        throw ConfigError("fix_eval: k exceeds available opponents");
    if (strategy == FixStrategy::PadWord && pad_word_choice == nullptr)
        throw ConfigError("fix_eval: pad_word strategy needs word choices");

    FixReport rep;
    rep.test_id = x_test.id;
    rep.method = method;
    rep.strategy = strategy == FixStrategy::RemoveExamples ? "remove_examples" : "pad_word";
    rep.k_grid = k_grid;
    rep.repeats = proto.repeats;

    auto opponents_upto = [&](int k) {
        std::vector<int> ids;
        for (int i = 0; i < k; ++i) ids.push_back(ranking.opponents[static_cast<std::size_t>(i)].first);
        return ids;
    };

    // one job per (k, repeat); k=0 measures the baseline flip rate
    struct Job {
        int k;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    std::vector<int> ks_with_zero = k_grid;
    if (std::find(ks_with_zero.begin(), ks_with_zero.end(), 0) == ks_with_zero.end())
        ks_with_zero.insert(ks_with_zero.begin(), 0);
    for (int k : ks_with_zero)
        for (int rep = 0; rep < proto.repeats; ++rep)
            jobs.push_back({k, proto.base_seed + static_cast<std::uint64_t>(rep)});

    struct Outcome {
        bool fixed = false;
        double train_acc = 0.0;
    };
    std::vector<Outcome> outs = parallel_map<Outcome>(
        static_cast<int>(jobs.size()), proto.n_threads, [&](int ji) {
            const Job& job = jobs[static_cast<std::size_t>(ji)];
            Outcome o;
            Model m{proto.model_cfg, {}};
            if (strategy == FixStrategy::RemoveExamples) {
                std::set<int> removed;
                for (int id : opponents_upto(job.k)) removed.insert(id);
                m = retrain_once(train_set, removed, proto.model_cfg, proto.hyper, job.seed);
            } else {
                Dataset edited = pad_word_edit(train_set, opponents_upto(job.k), *pad_word_choice);
                m = retrain_once(edited, {}, proto.model_cfg, proto.hyper, job.seed);
            }
            o.fixed = predict_class(m, x_test) == x_test.label;
            o.train_acc = accuracy(m, train_set);
            return o;
        });

    std::map<int, std::vector<const Outcome*>> by_k;
    for (std::size_t i = 0; i < jobs.size(); ++i)
        by_k[jobs[i].k].push_back(&outs[i]);

    auto frac_fixed = [&](int k) {
        const auto& v = by_k.at(k);
        int n = 0;
        for (const auto* o : v) n += o->fixed ? 1 : 0;
        return static_cast<double>(n) / static_cast<double>(v.size());
    };
    rep.baseline_flip_rate = frac_fixed(0);
    for (int k : k_grid) rep.fix_prob.push_back(frac_fixed(k));

    double base_acc = 0.0, maxk_acc = 0.0;
    for (const auto* o : by_k.at(0)) base_acc += o->train_acc;
    base_acc /= static_cast<double>(by_k.at(0).size());
    for (const auto* o : by_k.at(max_k)) maxk_acc += o->train_acc;
    maxk_acc /= static_cast<double>(by_k.at(max_k).size());
    rep.accuracy_delta = maxk_acc - base_acc;
    return rep;
}

}  // namespace tdinf
