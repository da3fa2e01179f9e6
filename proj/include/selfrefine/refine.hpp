#pragma once

// Phase 2: self-refinement. Samples responses from the frozen instructed
// policy, builds preference pairs (CoT-preferred by default, answer-preferred
// as the variant), and optimizes the DPO objective
//     L = -E[log sigmoid(M)],
//     M = beta*log(pi_theta(y_w|x)/pi_ref(y_w|x))
//       - beta*log(pi_theta(y_l|x)/pi_ref(y_l|x))
// against the frozen reference, selecting the checkpoint with the lowest
// validation loss.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "instruct.hpp"
#include "matching.hpp"
#include "policy.hpp"
#include "util.hpp"

namespace selfrefine::refine {

using corpus::Demonstration;
using policy::PolicyModel;
using policy::TokenSeq;

enum class ChosenProvenance { self_cot, teacher_demo };

inline const char* provenance_name(ChosenProvenance p) {
    return p == ChosenProvenance::self_cot ? "self_cot" : "teacher_demo";
}

struct PreferencePair {
    std::string demo_id;
    std::string prompt;   // x_CoT for the CoT variant, x for the answer variant
    std::string chosen;   // y_w
    std::string rejected; // y_l
    ChosenProvenance chosen_provenance = ChosenProvenance::self_cot;
};

struct RefineConfig {
    double beta = 0.1;
    double learning_rate = 1e-4;  // toy-scale default; paper preset is 1e-6
    int warmup_steps = 100;
    int batch_size = 16;          // paper preset is 128
    int max_steps = 1000;
    int samples_per_demo = 1;     // k
    double sample_temperature = 0.1;
    uint64_t seed = 0;
    std::string variant = "cot";  // cot | answer
    int max_new_tokens_plain = 24;
    int max_new_tokens_cot = 96;
    int val_every = 25;

    void validate() const {
        if (beta <= 0) throw ConfigError("refine.beta must be positive");
        if (learning_rate <= 0) throw ConfigError("refine.learning_rate must be positive");
        if (max_steps < 0) throw ConfigError("refine.max_steps must be >= 0");
        if (warmup_steps < 0) throw ConfigError("refine.warmup_steps must be >= 0");
        if (batch_size < 1) throw ConfigError("refine.batch_size must be >= 1");
        if (samples_per_demo < 1) throw ConfigError("refine.samples_per_demo must be >= 1");
        if (sample_temperature < 0) throw ConfigError("refine.sample_temperature must be >= 0");
        if (variant != "cot" && variant != "answer")
            throw ConfigError("refine.variant must be cot|answer");
        if (val_every < 1) throw ConfigError("refine.val_every must be >= 1");
    }
};

// Linear warmup over warmup_steps, then constant (no decay).
inline double dpo_lr_at(int64_t step, const RefineConfig& config) {
    if (config.warmup_steps == 0 || step + 1 >= config.warmup_steps)
        return config.learning_rate;
    return config.learning_rate * static_cast<double>(step + 1) /
           static_cast<double>(config.warmup_steps);
}

// ----------------------------- sampling -----------------------------

struct SampledResponses {
    std::string demo_id;
    std::string y;      // answer to the plain prompt x
    std::string y_cot;  // answer to the CoT prompt x_CoT
};

template <typename S>
SampledResponses sample_responses(const PolicyModel<S>& instructed, const Demonstration& demo,
                                  const RefineConfig& config, int sample_index = 0) {
    policy::GenerationConfig gen;
    gen.temperature = config.sample_temperature;
    gen.max_new_tokens = config.max_new_tokens_plain;
    gen.seed = derive_seed(config.seed, "sample_y/" + demo.id,
                           static_cast<uint64_t>(sample_index));
    SampledResponses out;
    out.demo_id = demo.id;
    out.y = policy::generate(instructed, corpus::render_prompt(demo, false), gen);
    gen.max_new_tokens = config.max_new_tokens_cot;
    gen.seed = derive_seed(config.seed, "sample_ycot/" + demo.id,
                           static_cast<uint64_t>(sample_index));
    out.y_cot = policy::generate(instructed, corpus::render_prompt(demo, true), gen);
    return out;
}

// ----------------------------- membership test -----------------------------

// t_i in y: whole-token, case-insensitive match of the normalized target in
// the answer's final segment.
inline bool target_in(std::string_view answer, const Demonstration& demo) {
    return target_in_answer(answer, demo.target, demo.kind(), std::max(demo.n_choices(), 1));
}

// ----------------------------- pair building -----------------------------

struct PairBuildResult {
    std::vector<PreferencePair> pairs;
    size_t dropped = 0;            // chosen == rejected
    size_t rejected_correct = 0;   // kept pairs whose rejected answer is itself correct
};

namespace detail {

inline std::map<std::string, const Demonstration*> index_by_id(
    const std::vector<Demonstration>& demos) {
    std::map<std::string, const Demonstration*> by_id;
    for (const auto& d : demos) by_id[d.id] = &d;
    return by_id;
}

}  // namespace detail

// CoT variant: prompt x_CoT; chosen is the self CoT answer when it commits
// to the target, otherwise the teacher CoT demonstration; rejected is always
// the plain self answer.
inline PairBuildResult build_pairs_cot(const std::vector<Demonstration>& demos,
                                       const std::vector<SampledResponses>& samples) {
    const auto by_id = detail::index_by_id(demos);
    PairBuildResult result;
    for (const auto& s : samples) {
        auto it = by_id.find(s.demo_id);
        if (it == by_id.end())
            throw DataError("build_pairs_cot: sample references unknown demonstration id " +
                            s.demo_id);
        const Demonstration& demo = *it->second;
        PreferencePair pair;
        pair.demo_id = demo.id;
        pair.prompt = corpus::render_prompt(demo, true);
        if (target_in(s.y_cot, demo)) {
            pair.chosen = s.y_cot;
            pair.chosen_provenance = ChosenProvenance::self_cot;
        } else {
            pair.chosen = demo.teacher_cot_answer;
            pair.chosen_provenance = ChosenProvenance::teacher_demo;
        }
        pair.rejected = s.y;
        if (pair.chosen == pair.rejected) {
            ++result.dropped;
            continue;
        }
        if (target_in(pair.rejected, demo)) ++result.rejected_correct;
        result.pairs.push_back(std::move(pair));
    }
    return result;
}

// Answer variant: mirror with roles swapped; prompt is the plain x.
inline PairBuildResult build_pairs_answer(const std::vector<Demonstration>& demos,
                                          const std::vector<SampledResponses>& samples) {
    const auto by_id = detail::index_by_id(demos);
    PairBuildResult result;
    for (const auto& s : samples) {
        auto it = by_id.find(s.demo_id);
        if (it == by_id.end())
            throw DataError("build_pairs_answer: sample references unknown demonstration id " +
                            s.demo_id);
        const Demonstration& demo = *it->second;
        PreferencePair pair;
        pair.demo_id = demo.id;
        pair.prompt = corpus::render_prompt(demo, false);
        if (target_in(s.y, demo)) {
            pair.chosen = s.y;
            pair.chosen_provenance = ChosenProvenance::self_cot;
        } else {
            pair.chosen = demo.teacher_answer;
            pair.chosen_provenance = ChosenProvenance::teacher_demo;
        }
        pair.rejected = s.y_cot;
        if (pair.chosen == pair.rejected) {
            ++result.dropped;
            continue;
        }
        if (target_in(pair.rejected, demo)) ++result.rejected_correct;
        result.pairs.push_back(std::move(pair));
    }
    return result;
}

// ----------------------------- DPO loss -----------------------------

inline double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct PairTokens {
    TokenSeq prompt;
    TokenSeq chosen;
    TokenSeq rejected;
};

inline PairTokens tokenize_pair(const policy::Vocabulary& vocab, const PreferencePair& pair) {
    PairTokens t;
    t.prompt = policy::make_prompt_tokens(vocab, pair.prompt);
    t.chosen = policy::make_answer_tokens(vocab, pair.chosen);
    t.rejected = policy::make_answer_tokens(vocab, pair.rejected);
    return t;
}

template <typename S>
double dpo_margin(const PolicyModel<S>& theta, const PolicyModel<S>& ref,
                  const PreferencePair& pair, double beta) {
    if (theta.vocab.content_hash() != ref.vocab.content_hash())
        throw DataError("dpo_margin: policies do not share a vocabulary");
    const PairTokens t = tokenize_pair(theta.vocab, pair);
    const double theta_w = policy::sequence_log_prob(theta, t.prompt, t.chosen);
    const double theta_l = policy::sequence_log_prob(theta, t.prompt, t.rejected);
    const double ref_w = policy::sequence_log_prob(ref, t.prompt, t.chosen);
    const double ref_l = policy::sequence_log_prob(ref, t.prompt, t.rejected);
    return beta * (theta_w - ref_w) - beta * (theta_l - ref_l);
}

namespace detail {

// log prob of continuation plus, optionally, the gradient of
// scale * log prob with respect to theta.
template <typename S>
double logprob_pass(const PolicyModel<S>& pol, const TokenSeq& prompt, const TokenSeq& cont,
                    double scale, std::vector<S>* grad) {
    const size_t total = prompt.size() + cont.size();
    if (total > static_cast<size_t>(pol.arch().context))
        throw LengthError("pair sequence of " + std::to_string(total) +
                          " tokens exceeds context window " + std::to_string(pol.arch().context));
    TokenSeq tokens = prompt;
    tokens.insert(tokens.end(), cont.begin(), cont.end());
    const int V = pol.arch().vocab;
    policy::ForwardCache<S> cache;
    std::vector<S> logits;
    pol.model.forward(tokens, logits, grad ? &cache : nullptr);
    double logp = 0.0;
    for (size_t j = 0; j < cont.size(); ++j) {
        const size_t row = prompt.size() + j - 1;
        logp += policy::log_prob_of(logits.data() + row * static_cast<size_t>(V), V, cont[j]);
    }
    if (grad) {
        // d(logp)/d(logits) = onehot - softmax at each answer row
        std::vector<S> dlogits(logits.size(), S(0));
        for (size_t j = 0; j < cont.size(); ++j) {
            const size_t row = prompt.size() + j - 1;
            const S* lrow = logits.data() + row * static_cast<size_t>(V);
            S* drow = dlogits.data() + row * static_cast<size_t>(V);
            double maxv = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < V; ++i) maxv = std::max(maxv, static_cast<double>(lrow[i]));
            double denom = 0.0;
            for (int i = 0; i < V; ++i) denom += std::exp(static_cast<double>(lrow[i]) - maxv);
            for (int i = 0; i < V; ++i)
                drow[i] = static_cast<S>(-std::exp(static_cast<double>(lrow[i]) - maxv) / denom *
                                         scale);
            drow[cont[j]] += static_cast<S>(scale);
        }
        pol.model.backward(tokens, cache, dlogits, *grad);
    }
    return logp;
}

struct RefLogProbs {
    double chosen = 0.0;
    double rejected = 0.0;
};

}  // namespace detail

// Batch mean of -log sigmoid(margin). The reference is a constant: no
// gradient ever flows to it. Gradient (optional) is with respect to theta.
template <typename S>
double dpo_loss(const PolicyModel<S>& theta, const PolicyModel<S>& ref,
                const std::vector<PreferencePair>& batch, double beta,
                std::vector<S>* grad_out = nullptr) {
    if (batch.empty()) throw DataError("dpo_loss: empty batch");
    if (theta.vocab.content_hash() != ref.vocab.content_hash())
        throw DataError("dpo_loss: policies do not share a vocabulary");
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    struct Work {
        PairTokens tokens;
        detail::RefLogProbs ref_lp;
        double theta_w = 0.0, theta_l = 0.0;
        std::vector<S> grad;
    };
    std::vector<Work> works(batch.size());
    parallel_for(batch.size(), [&](size_t i) {
        Work& w = works[i];
        w.tokens = tokenize_pair(theta.vocab, batch[i]);
        w.ref_lp.chosen = policy::sequence_log_prob(ref, w.tokens.prompt, w.tokens.chosen);
        w.ref_lp.rejected = policy::sequence_log_prob(ref, w.tokens.prompt, w.tokens.rejected);
        if (!grad_out) {
            w.theta_w = policy::sequence_log_prob(theta, w.tokens.prompt, w.tokens.chosen);
            w.theta_l = policy::sequence_log_prob(theta, w.tokens.prompt, w.tokens.rejected);
            return;
        }
        // forward first to get the margin, then scaled backward passes
        w.theta_w = detail::logprob_pass<S>(theta, w.tokens.prompt, w.tokens.chosen, 0.0, nullptr);
        w.theta_l = detail::logprob_pass<S>(theta, w.tokens.prompt, w.tokens.rejected, 0.0, nullptr);
        const double margin =
            beta * (w.theta_w - w.ref_lp.chosen) - beta * (w.theta_l - w.ref_lp.rejected);
        const double coeff = -(1.0 - sigmoid(margin)) * beta * inv_b;  // dL/dlogp(chosen)
        w.grad.assign(theta.n_params(), S(0));
        detail::logprob_pass<S>(theta, w.tokens.prompt, w.tokens.chosen, coeff, &w.grad);
        detail::logprob_pass<S>(theta, w.tokens.prompt, w.tokens.rejected, -coeff, &w.grad);
    });

    double loss = 0.0;
    for (const auto& w : works) {
        const double margin =
            beta * (w.theta_w - w.ref_lp.chosen) - beta * (w.theta_l - w.ref_lp.rejected);
        loss += softplus(-margin);
    }
    loss *= inv_b;
    if (grad_out) {
        grad_out->assign(theta.n_params(), S(0));
        for (const auto& w : works)
            for (size_t i = 0; i < w.grad.size(); ++i) (*grad_out)[i] += w.grad[i];
    }
    return loss;
}

// ----------------------------- trainer -----------------------------

struct RefineLogRow {
    int64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
};

template <typename S>
struct RefineResult {
    PolicyModel<S> policy;
    std::vector<RefineLogRow> log;
    PairBuildResult build;
    std::vector<SampledResponses> samples;
    int64_t selected_step = 0;
    double selected_val_loss = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

// Cached per-pair state for the training loop: token sequences plus the
// reference log probs, which never change.
template <typename S>
struct PreparedPair {
    PairTokens tokens;
    RefLogProbs ref_lp;
};

template <typename S>
std::vector<PreparedPair<S>> prepare_pairs(const PolicyModel<S>& ref,
                                           const std::vector<PreferencePair>& pairs) {
    std::vector<PreparedPair<S>> out(pairs.size());
    parallel_for(pairs.size(), [&](size_t i) {
        out[i].tokens = tokenize_pair(ref.vocab, pairs[i]);
        out[i].ref_lp.chosen =
            policy::sequence_log_prob(ref, out[i].tokens.prompt, out[i].tokens.chosen);
        out[i].ref_lp.rejected =
            policy::sequence_log_prob(ref, out[i].tokens.prompt, out[i].tokens.rejected);
    });
    return out;
}

// Loss (and optional theta-gradient) over prepared pairs.
template <typename S>
double dpo_prepared_loss(const PolicyModel<S>& theta, const std::vector<PreparedPair<S>>& pairs,
                         const std::vector<size_t>& indices, double beta,
                         std::vector<S>* grad_out) {
    const double inv_b = 1.0 / static_cast<double>(indices.size());
    struct Work {
        double loss = 0.0;
        std::vector<S> grad;
    };
    std::vector<Work> works(indices.size());
    parallel_for(indices.size(), [&](size_t i) {
        const PreparedPair<S>& p = pairs[indices[i]];
        Work& w = works[i];
        const double theta_w = logprob_pass<S>(theta, p.tokens.prompt, p.tokens.chosen, 0.0, nullptr);
        const double theta_l =
            logprob_pass<S>(theta, p.tokens.prompt, p.tokens.rejected, 0.0, nullptr);
        const double margin =
            beta * (theta_w - p.ref_lp.chosen) - beta * (theta_l - p.ref_lp.rejected);
        w.loss = softplus(-margin);
        if (grad_out) {
            const double coeff = -(1.0 - sigmoid(margin)) * beta * inv_b;
            w.grad.assign(theta.n_params(), S(0));
            logprob_pass<S>(theta, p.tokens.prompt, p.tokens.chosen, coeff, &w.grad);
            logprob_pass<S>(theta, p.tokens.prompt, p.tokens.rejected, -coeff, &w.grad);
        }
    });
    double loss = 0.0;
    for (const auto& w : works) loss += w.loss;
    loss *= inv_b;
    if (grad_out) {
        grad_out->assign(theta.n_params(), S(0));
        for (const auto& w : works)
            for (size_t i = 0; i < w.grad.size(); ++i) (*grad_out)[i] += w.grad[i];
    }
    return loss;
}

}  // namespace detail

// Full self-refinement: sample, build pairs, train with DPO, return the
// lowest-validation-loss checkpoint. Accepts a base-phase policy as well so
// the refine-only ablation can run; a refined policy is rejected.
template <typename S>
RefineResult<S> self_refine(const PolicyModel<S>& instructed,
                            const std::vector<Demonstration>& demos, const RefineConfig& config) {
    config.validate();
    if (instructed.phase == policy::Phase::refined)
        throw DataError("self_refine: input policy is already refined");
    if (demos.empty()) throw DataError("self_refine: no demonstrations");

    RefineResult<S> result{instructed, {}, {}, {}, 0, 0.0, false, {}};
    const PolicyModel<S>& ref = instructed;  // frozen reference

    // sample y and y_cot for every demo (and every k)
    result.samples.resize(demos.size() * static_cast<size_t>(config.samples_per_demo));
    parallel_for(result.samples.size(), [&](size_t i) {
        const size_t demo_idx = i / static_cast<size_t>(config.samples_per_demo);
        const int sample_idx = static_cast<int>(i % static_cast<size_t>(config.samples_per_demo));
        result.samples[i] = sample_responses(ref, demos[demo_idx], config, sample_idx);
    });

    result.build = config.variant == "cot" ? build_pairs_cot(demos, result.samples)
                                           : build_pairs_answer(demos, result.samples);
    if (result.build.pairs.empty())
        throw TrainError("self_refine: zero usable preference pairs (" +
                         std::to_string(result.build.dropped) +
                         " dropped as chosen == rejected); nothing to optimize");

    // shuffled order, last 10% held out for checkpoint selection
    const size_t n = result.build.pairs.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng split_rng(derive_seed(config.seed, "refine/val_split"));
    split_rng.shuffle(order);
    size_t val_n = n >= 2 ? std::max<size_t>(1, corpus::round_half_away(0.1 * static_cast<double>(n)))
                          : 0;
    std::vector<size_t> train_idx(order.begin(), order.end() - static_cast<long>(val_n));
    std::vector<size_t> val_idx(order.end() - static_cast<long>(val_n), order.end());
    if (val_idx.empty()) val_idx = train_idx;  // degenerate single-pair corpus

    const auto prepared = detail::prepare_pairs(ref, result.build.pairs);

    result.policy.phase = policy::Phase::refined;
    if (config.max_steps == 0) return result;

    instruct::AdamState adam;
    std::vector<S> grad;
    std::vector<S> best_params = result.policy.model.params();
    double best_val =
        detail::dpo_prepared_loss<S>(result.policy, prepared, val_idx, config.beta, nullptr);
    int64_t best_step = 0;
    result.log.push_back({0, 0.0, std::numeric_limits<double>::quiet_NaN(), best_val});

    std::vector<S> last_good = result.policy.model.params();
    Rng batch_rng(derive_seed(config.seed, "refine/batches"));
    std::vector<size_t> cycle;
    size_t cursor = 0;
    for (int64_t step = 0; step < config.max_steps; ++step) {
        std::vector<size_t> batch;
        batch.reserve(static_cast<size_t>(config.batch_size));
        while (batch.size() < static_cast<size_t>(config.batch_size)) {
            if (cursor >= cycle.size()) {
                cycle = train_idx;
                batch_rng.shuffle(cycle);
                cursor = 0;
            }
            batch.push_back(cycle[cursor++]);
        }
        const double train_loss =
            detail::dpo_prepared_loss<S>(result.policy, prepared, batch, config.beta, &grad);
        if (!std::isfinite(train_loss)) {
            result.policy.model.mutable_params() = last_good;
            result.aborted = true;
            result.abort_reason = "non-finite DPO loss at step " + std::to_string(step);
            break;
        }
        last_good = result.policy.model.params();
        const double lr = dpo_lr_at(step, config);
        instruct::adam_step(adam, result.policy.model.mutable_params(), grad, lr, 0.0,
                            result.policy.model.layout());
        RefineLogRow row{step + 1, lr, train_loss, std::numeric_limits<double>::quiet_NaN()};
        const bool eval_now =
            (step + 1) % config.val_every == 0 || step + 1 == config.max_steps;
        if (eval_now) {
            row.val_loss = detail::dpo_prepared_loss<S>(result.policy, prepared, val_idx,
                                                        config.beta, nullptr);
            if (row.val_loss < best_val) {
                best_val = row.val_loss;
                best_step = step + 1;
                best_params = result.policy.model.params();
            }
        }
        result.log.push_back(row);
    }

    result.policy.model.mutable_params() = best_params;
    result.selected_step = best_step;
    result.selected_val_loss = best_val;
    return result;
}

// ----------------------------- pair persistence -----------------------------

inline void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& p : pairs) {
        nlohmann::json j = {{"demo_id", p.demo_id},
                            {"prompt", p.prompt},
                            {"chosen", p.chosen},
                            {"rejected", p.rejected},
                            {"chosen_provenance", provenance_name(p.chosen_provenance)}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<PreferencePair> load_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open pair file: " + path);
    std::vector<PreferencePair> pairs;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed pair record at " + path + ":" + std::to_string(line_no) +
                            ": " + e.what());
        }
        PreferencePair p;
        p.demo_id = j.at("demo_id").get<std::string>();
        p.prompt = j.at("prompt").get<std::string>();
        p.chosen = j.at("chosen").get<std::string>();
        p.rejected = j.at("rejected").get<std::string>();
        const std::string prov = j.at("chosen_provenance").get<std::string>();
        if (prov == "self_cot") p.chosen_provenance = ChosenProvenance::self_cot;
        else if (prov == "teacher_demo") p.chosen_provenance = ChosenProvenance::teacher_demo;
        else throw DataError("unknown chosen_provenance '" + prov + "' at " + path + ":" +
                             std::to_string(line_no));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace selfrefine::refine
