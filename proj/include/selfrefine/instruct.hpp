#pragma once

// Phase 1: instruction-tuning. Teacher-forced negative log likelihood over
// answer tokens only (prompt masked), linear-warmup + cosine schedule,
// decoupled-weight-decay Adam.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "policy.hpp"
#include "util.hpp"

namespace selfrefine::instruct {

using corpus::Demonstration;
using policy::PolicyModel;
using policy::TokenSeq;

struct InstructConfig {
    int epochs = 4;
    double learning_rate = 3e-3;  // toy-scale default; paper preset is 2e-5
    double weight_decay = 1e-4;
    double warmup_ratio = 0.03;
    std::string scheduler = "cosine";
    int batch_size = 16;
    uint64_t seed = 0;
    // cot: CoT prompt with CoT target; plain: standard prompt with plain
    // target; mixed: both sequences per demonstration.
    std::string target_mode = "cot";

    void validate() const {
        if (epochs < 0) throw ConfigError("instruct.epochs must be >= 0");
        if (learning_rate <= 0) throw ConfigError("instruct.learning_rate must be positive");
        if (warmup_ratio < 0 || warmup_ratio >= 1)
            throw ConfigError("instruct.warmup_ratio must be in [0,1)");
        if (batch_size < 1) throw ConfigError("instruct.batch_size must be >= 1");
        if (scheduler != "cosine") throw ConfigError("unsupported scheduler '" + scheduler + "'");
        if (target_mode != "cot" && target_mode != "plain" && target_mode != "mixed")
            throw ConfigError("instruct.target_mode must be cot|plain|mixed");
    }
};

// ----------------------------- schedule -----------------------------

// Linear warmup from 0 over ceil(warmup_ratio * total) steps, then cosine
// decay to 0 at total_steps.
inline double lr_at(int64_t step, int64_t total_steps, const InstructConfig& config) {
    if (step < 0 || step > total_steps) throw ConfigError("lr_at: step out of range");
    if (total_steps == 0) return 0.0;
    const int64_t warm =
        static_cast<int64_t>(std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));
    if (step < warm)
        return config.learning_rate * static_cast<double>(step) / static_cast<double>(warm);
    if (total_steps == warm) return config.learning_rate;
    const double u = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return config.learning_rate * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
}

// ----------------------------- loss -----------------------------

struct TrainExample {
    std::string id;
    TokenSeq prompt;  // [bos] + prompt text
    TokenSeq answer;  // separator + answer text + [eos]
};

inline TrainExample make_train_example(const policy::Vocabulary& vocab, const Demonstration& demo,
                                       bool cot_target) {
    TrainExample ex;
    ex.id = demo.id;
    ex.prompt = policy::make_prompt_tokens(vocab, corpus::render_prompt(demo, cot_target));
    ex.answer = policy::make_answer_tokens(
        vocab, cot_target ? demo.teacher_cot_answer : demo.teacher_answer);
    return ex;
}

inline void check_fits_context(const TrainExample& ex, int context) {
    const size_t total = ex.prompt.size() + ex.answer.size();
    if (total > static_cast<size_t>(context))
        throw LengthError("record " + ex.id + ": sequence of " + std::to_string(total) +
                          " tokens exceeds context window " + std::to_string(context));
}

// NLL of the answer span given full-sequence logits; prompt rows are never
// read, which is the masking contract.
template <typename S>
double answer_nll_from_logits(const std::vector<S>& logits, int vocab, const TrainExample& ex) {
    double nll = 0.0;
    for (size_t j = 0; j < ex.answer.size(); ++j) {
        const size_t row = ex.prompt.size() + j - 1;
        nll -= policy::log_prob_of(logits.data() + row * static_cast<size_t>(vocab), vocab,
                                   ex.answer[j]);
    }
    return nll;
}

namespace detail {

template <typename S>
struct ExampleWork {
    double nll = 0.0;
    std::vector<S> grad;  // empty unless gradients requested
};

// Forward (and optionally backward) for one example. d(loss)/d(logits) at
// answer rows is softmax - onehot, scaled by `scale`.
template <typename S>
ExampleWork<S> example_pass(const policy::PolicyModel<S>& policy, const TrainExample& ex,
                            bool want_grad, double scale) {
    check_fits_context(ex, policy.arch().context);
    TokenSeq tokens = ex.prompt;
    tokens.insert(tokens.end(), ex.answer.begin(), ex.answer.end());
    const int V = policy.arch().vocab;

    ExampleWork<S> work;
    policy::ForwardCache<S> cache;
    std::vector<S> logits;
    policy.model.forward(tokens, logits, want_grad ? &cache : nullptr);
    work.nll = answer_nll_from_logits(logits, V, ex);
    if (!want_grad) return work;

    std::vector<S> dlogits(logits.size(), S(0));
    for (size_t j = 0; j < ex.answer.size(); ++j) {
        const size_t row = ex.prompt.size() + j - 1;
        const S* lrow = logits.data() + row * static_cast<size_t>(V);
        S* drow = dlogits.data() + row * static_cast<size_t>(V);
        double maxv = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < V; ++i) maxv = std::max(maxv, static_cast<double>(lrow[i]));
        double denom = 0.0;
        for (int i = 0; i < V; ++i) denom += std::exp(static_cast<double>(lrow[i]) - maxv);
        for (int i = 0; i < V; ++i)
            drow[i] = static_cast<S>(std::exp(static_cast<double>(lrow[i]) - maxv) / denom * scale);
        drow[ex.answer[j]] -= static_cast<S>(scale);
    }
    work.grad.assign(policy.n_params(), S(0));
    policy.model.backward(tokens, cache, dlogits, work.grad);
    return work;
}

}  // namespace detail

// Batch mean of the per-record answer-token NLL sums.
template <typename S>
double instruction_loss_examples(const PolicyModel<S>& policy,
                                 const std::vector<TrainExample>& batch,
                                 std::vector<S>* grad_out = nullptr) {
    if (batch.empty()) throw DataError("instruction loss: empty batch");
    const double scale = 1.0 / static_cast<double>(batch.size());
    std::vector<detail::ExampleWork<S>> works(batch.size());
    parallel_for(batch.size(), [&](size_t i) {
        works[i] = detail::example_pass(policy, batch[i], grad_out != nullptr, scale);
    });
    double loss = 0.0;
    for (const auto& w : works) loss += w.nll;
    loss *= scale;
    if (grad_out) {
        grad_out->assign(policy.n_params(), S(0));
        for (const auto& w : works)  // fixed reduction order
            for (size_t i = 0; i < w.grad.size(); ++i) (*grad_out)[i] += w.grad[i];
    }
    return loss;
}

template <typename S>
double instruction_loss(const PolicyModel<S>& policy, const std::vector<Demonstration>& batch,
                        bool cot_target, std::vector<S>* grad_out = nullptr) {
    std::vector<TrainExample> examples;
    examples.reserve(batch.size());
    for (const auto& d : batch) examples.push_back(make_train_example(policy.vocab, d, cot_target));
    return instruction_loss_examples(policy, examples, grad_out);
}

// ----------------------------- optimizer -----------------------------

// Adam with decoupled weight decay; decay applies to weight matrices only,
// never to biases or layer-norm parameters. Moments kept in double.
struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename S>
void adam_step(AdamState& st, std::vector<S>& params, const std::vector<S>& grad, double lr,
               double weight_decay, const std::vector<policy::ParamSlice>& layout) {
    if (st.m.empty()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
    }
    ++st.t;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (const auto& slice : layout) {
        const bool decay = slice.cols > 1 && weight_decay > 0.0;
        for (size_t i = slice.offset; i < slice.offset + slice.count(); ++i) {
            const double g = static_cast<double>(grad[i]);
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            double update = lr * mhat / (std::sqrt(vhat) + st.eps);
            if (decay) update += lr * weight_decay * static_cast<double>(params[i]);
            params[i] = static_cast<S>(static_cast<double>(params[i]) - update);
        }
    }
}

// ----------------------------- trainer -----------------------------

struct TrainLogRow {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

template <typename S>
struct TuneResult {
    PolicyModel<S> policy;
    std::vector<TrainLogRow> log;
    bool aborted = false;
    std::string abort_reason;
};

// Teacher-forced training over prepared examples; also backs the format
// warmup that produces the base-phase policy.
template <typename S>
TuneResult<S> tune_examples(const PolicyModel<S>& start, const std::vector<TrainExample>& examples,
                            const InstructConfig& config, policy::Phase result_phase) {
    config.validate();
    if (examples.empty()) throw DataError("tune_examples: no training examples");
    for (const auto& ex : examples) check_fits_context(ex, start.arch().context);

    TuneResult<S> result{start, {}, false, {}};
    result.policy.phase = result_phase;
    const size_t n = examples.size();
    const int64_t steps_per_epoch =
        static_cast<int64_t>((n + static_cast<size_t>(config.batch_size) - 1) /
                             static_cast<size_t>(config.batch_size));
    const int64_t total_steps = config.epochs * steps_per_epoch;
    if (total_steps == 0) return result;

    AdamState adam;
    std::vector<S> grad;
    std::vector<S> last_good = result.policy.model.params();
    int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        Rng rng(derive_seed(config.seed, "instruct/epoch", static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        for (size_t begin = 0; begin < n; begin += static_cast<size_t>(config.batch_size)) {
            const size_t end = std::min(n, begin + static_cast<size_t>(config.batch_size));
            std::vector<TrainExample> batch;
            batch.reserve(end - begin);
            for (size_t i = begin; i < end; ++i) batch.push_back(examples[order[i]]);
            const double loss = instruction_loss_examples(result.policy, batch, &grad);
            if (!std::isfinite(loss)) {
                result.policy.model.mutable_params() = last_good;
                result.aborted = true;
                result.abort_reason = "non-finite loss at step " + std::to_string(step);
                return result;
            }
            last_good = result.policy.model.params();
            const double lr = lr_at(step, total_steps, config);
            adam_step(adam, result.policy.model.mutable_params(), grad, lr, config.weight_decay,
                      result.policy.model.layout());
            result.log.push_back({step, lr, loss});
            ++step;
        }
    }
    return result;
}

template <typename S>
TuneResult<S> instruction_tune(const PolicyModel<S>& start, const std::vector<Demonstration>& demos,
                               const InstructConfig& config) {
    config.validate();
    if (demos.empty()) throw DataError("instruction_tune: no demonstrations");
    std::vector<TrainExample> examples;
    for (const auto& d : demos) {
        if (config.target_mode == "cot" || config.target_mode == "mixed")
            examples.push_back(make_train_example(start.vocab, d, true));
        if (config.target_mode == "plain" || config.target_mode == "mixed")
            examples.push_back(make_train_example(start.vocab, d, false));
    }
    return tune_examples(start, examples, config, policy::Phase::instructed);
}

}  // namespace selfrefine::instruct
