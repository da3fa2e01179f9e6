#pragma once

// The student model: tokenizer + transformer + exact sequence log
// probability, temperature sampling and checkpoint I/O.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "util.hpp"
#include "vocab.hpp"

namespace selfrefine::policy {

enum class Phase { base, instructed, refined };

inline std::string phase_name(Phase p) {
    switch (p) {
        case Phase::base: return "base";
        case Phase::instructed: return "instructed";
        case Phase::refined: return "refined";
    }
    return "base";
}

inline Phase phase_from_name(const std::string& s) {
    if (s == "base") return Phase::base;
    if (s == "instructed") return Phase::instructed;
    if (s == "refined") return Phase::refined;
    throw CheckpointError("unknown checkpoint phase '" + s + "'");
}

struct GenerationConfig {
    double temperature = 0.1;  // 0 means greedy
    int max_new_tokens = 96;
    uint64_t seed = 0;
};

template <typename S>
struct PolicyModel {
    Transformer<S> model;
    Vocabulary vocab;
    Phase phase = Phase::base;

    const ModelArch& arch() const { return model.arch(); }
    size_t n_params() const { return model.n_params(); }
};

template <typename S>
PolicyModel<S> init_policy(ModelArch arch, const Vocabulary& vocab, uint64_t seed) {
    arch.vocab = static_cast<int>(vocab.size());
    PolicyModel<S> p{Transformer<S>::random_init(arch, seed), vocab, Phase::base};
    return p;
}

// Uniform next-token distribution everywhere; handy in tests.
template <typename S>
PolicyModel<S> zero_policy(ModelArch arch, const Vocabulary& vocab) {
    arch.vocab = static_cast<int>(vocab.size());
    std::vector<S> params(param_count(arch), S(0));
    return PolicyModel<S>{Transformer<S>(arch, std::move(params)), vocab, Phase::base};
}

// ----------------------------- token stream layout -----------------------------
// A scored/trained sequence is [bos] prompt-tokens [answer-tokens eos] where
// the answer span starts with the newline separating prompt from answer, so
// generation learns to produce the separator itself.

inline TokenSeq make_prompt_tokens(const Vocabulary& vocab, std::string_view prompt_text,
                                   size_t* unknown_count = nullptr) {
    TokenSeq out;
    out.push_back(vocab.bos());
    const TokenSeq body = vocab.encode(prompt_text, unknown_count);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

inline TokenSeq make_answer_tokens(const Vocabulary& vocab, std::string_view answer_text,
                                   size_t* unknown_count = nullptr) {
    TokenSeq out = vocab.encode("\n" + std::string(answer_text), unknown_count);
    out.push_back(vocab.eos());
    return out;
}

// ----------------------------- probabilities -----------------------------

// log softmax of one logits row, aggregated in double regardless of S.
template <typename S>
inline double log_prob_of(const S* logits, int vocab, int32_t token) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < vocab; ++i) maxv = std::max(maxv, static_cast<double>(logits[i]));
    double denom = 0.0;
    for (int i = 0; i < vocab; ++i) denom += std::exp(static_cast<double>(logits[i]) - maxv);
    return static_cast<double>(logits[token]) - maxv - std::log(denom);
}

template <typename S>
inline std::vector<double> probs_from_logits(const S* logits, int vocab, double temperature) {
    std::vector<double> p(static_cast<size_t>(vocab));
    double maxv = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < vocab; ++i) maxv = std::max(maxv, static_cast<double>(logits[i]));
    double denom = 0.0;
    for (int i = 0; i < vocab; ++i) {
        p[static_cast<size_t>(i)] = std::exp((static_cast<double>(logits[i]) - maxv) / temperature);
        denom += p[static_cast<size_t>(i)];
    }
    for (double& v : p) v /= denom;
    return p;
}

// Sum of log pi(w_t | s_t) over continuation tokens only. The prompt is the
// conditioning prefix; an empty continuation scores 0.
template <typename S>
double sequence_log_prob(const PolicyModel<S>& policy, const TokenSeq& prompt,
                         const TokenSeq& continuation) {
    if (continuation.empty()) return 0.0;
    if (prompt.empty()) throw DataError("sequence_log_prob: prompt must contain at least <bos>");
    const size_t total = prompt.size() + continuation.size();
    if (total > static_cast<size_t>(policy.arch().context))
        throw LengthError("sequence of " + std::to_string(total) +
                          " tokens exceeds context window " +
                          std::to_string(policy.arch().context));
    TokenSeq tokens = prompt;
    tokens.insert(tokens.end(), continuation.begin(), continuation.end());
    std::vector<S> logits;
    policy.model.forward(tokens, logits);
    const int V = policy.arch().vocab;
    double sum = 0.0;
    for (size_t j = 0; j < continuation.size(); ++j) {
        const size_t row = prompt.size() + j - 1;  // row t predicts token t+1
        sum += log_prob_of(logits.data() + row * static_cast<size_t>(V), V, continuation[j]);
    }
    return sum;
}

// ----------------------------- generation -----------------------------

template <typename S>
inline int32_t sample_token(const S* logits, int vocab, double temperature, Rng& rng) {
    if (temperature <= 0.0) {
        int32_t best = 0;  // ties break to the lowest token index
        for (int i = 1; i < vocab; ++i)
            if (logits[i] > logits[best]) best = i;
        return best;
    }
    const std::vector<double> p = probs_from_logits(logits, vocab, temperature);
    const double u = rng.next_double();
    double acc = 0.0;
    for (int i = 0; i < vocab; ++i) {
        acc += p[static_cast<size_t>(i)];
        if (u < acc) return i;
    }
    return vocab - 1;
}

struct GenerationResult {
    std::string text;        // decoded continuation, separator stripped
    TokenSeq tokens;         // raw continuation tokens (without eos)
    bool hit_eos = false;
};

template <typename S>
GenerationResult generate_result(const PolicyModel<S>& policy, std::string_view prompt_text,
                                 const GenerationConfig& config) {
    if (config.temperature < 0.0) throw ConfigError("generation temperature must be >= 0");
    const TokenSeq prompt = make_prompt_tokens(policy.vocab, prompt_text);
    if (static_cast<int>(prompt.size()) >= policy.arch().context)
        throw LengthError("prompt of " + std::to_string(prompt.size()) +
                          " tokens exceeds context window " +
                          std::to_string(policy.arch().context));
    Rng rng(derive_seed(config.seed, "generate"));
    auto state = policy.model.new_decode_state();
    std::vector<S> logits_row;
    for (size_t i = 0; i + 1 < prompt.size(); ++i) {
        std::vector<S> discard;
        policy.model.decode_step(state, prompt[i], discard);
    }
    policy.model.decode_step(state, prompt.back(), logits_row);

    GenerationResult result;
    const int V = policy.arch().vocab;
    for (int n = 0; n < config.max_new_tokens; ++n) {
        const int32_t next = sample_token(logits_row.data(), V, config.temperature, rng);
        if (next == policy.vocab.eos()) {
            result.hit_eos = true;
            break;
        }
        result.tokens.push_back(next);
        if (state.pos >= policy.arch().context) break;  // window exhausted
        policy.model.decode_step(state, next, logits_row);
    }
    std::string text = policy.vocab.decode(result.tokens);
    // strip the leading answer separator
    if (!text.empty() && text.front() == '\n') text.erase(text.begin());
    result.text = std::move(text);
    return result;
}

template <typename S>
std::string generate(const PolicyModel<S>& policy, std::string_view prompt_text,
                     const GenerationConfig& config) {
    return generate_result(policy, prompt_text, config).text;
}

// ----------------------------- checkpoints -----------------------------
// Layout: magic line, one-line JSON header, then the parameter payload as
// raw little-endian IEEE-754 float32.

inline constexpr const char* kCheckpointMagic = "SELFREFINE-CKPT-V1";

struct CheckpointMeta {
    Phase phase = Phase::base;
    int64_t step = 0;
    double val_loss = 0.0;
    std::string config_hash;
};

inline void write_f32_le(std::ofstream& out, float v) {
    const uint32_t bits = std::bit_cast<uint32_t>(v);
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff),
                           static_cast<char>((bits >> 24) & 0xff)};
    out.write(bytes, 4);
}

inline float read_f32_le(std::ifstream& in) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    return std::bit_cast<float>(bits);
}

inline void save_checkpoint(const PolicyModel<float>& policy, const CheckpointMeta& meta,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    const ModelArch& a = policy.arch();
    nlohmann::json header = {{"layers", a.layers},
                             {"width", a.width},
                             {"heads", a.heads},
                             {"context", a.context},
                             {"vocab", a.vocab},
                             {"vocab_hash", hash_hex(policy.vocab.content_hash())},
                             {"phase", phase_name(meta.phase)},
                             {"step", meta.step},
                             {"val_loss", meta.val_loss},
                             {"config_hash", meta.config_hash},
                             {"param_count", policy.n_params()}};
    out << kCheckpointMagic << '\n' << header.dump() << '\n';
    for (float v : policy.model.params()) write_f32_le(out, v);
    if (!out) throw IoError("checkpoint write failed: " + path);
}

inline std::pair<PolicyModel<float>, CheckpointMeta> load_checkpoint(
    const std::string& path, const Vocabulary& vocab,
    const std::optional<ModelArch>& expected_arch = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string magic, header_line;
    std::getline(in, magic);
    if (magic != kCheckpointMagic)
        throw CheckpointError("bad checkpoint magic in " + path + " (got '" + magic + "')");
    std::getline(in, header_line);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint header in " + path + ": " + e.what());
    }
    ModelArch arch;
    arch.layers = header.at("layers").get<int>();
    arch.width = header.at("width").get<int>();
    arch.heads = header.at("heads").get<int>();
    arch.context = header.at("context").get<int>();
    arch.vocab = header.at("vocab").get<int>();
    if (expected_arch) {
        ModelArch want = *expected_arch;
        want.vocab = static_cast<int>(vocab.size());
        auto mismatch = [&](const char* field, int got, int exp) {
            throw CheckpointError(std::string("checkpoint arch mismatch in ") + path + ": " +
                                  field + " is " + std::to_string(got) + ", expected " +
                                  std::to_string(exp));
        };
        if (arch.layers != want.layers) mismatch("layers", arch.layers, want.layers);
        if (arch.width != want.width) mismatch("width", arch.width, want.width);
        if (arch.heads != want.heads) mismatch("heads", arch.heads, want.heads);
        if (arch.context != want.context) mismatch("context", arch.context, want.context);
        if (arch.vocab != want.vocab) mismatch("vocab", arch.vocab, want.vocab);
    }
    if (header.at("vocab_hash").get<std::string>() != hash_hex(vocab.content_hash()))
        throw CheckpointError("checkpoint vocabulary hash mismatch in " + path);
    const size_t count = header.at("param_count").get<size_t>();
    if (count != param_count(arch))
        throw CheckpointError("checkpoint parameter count mismatch in " + path + ": header says " +
                              std::to_string(count) + ", arch implies " +
                              std::to_string(param_count(arch)));
    std::vector<float> params(count);
    for (size_t i = 0; i < count; ++i) params[i] = read_f32_le(in);
    if (!in) throw CheckpointError("checkpoint payload truncated: " + path);
    CheckpointMeta meta;
    meta.phase = phase_from_name(header.at("phase").get<std::string>());
    meta.step = header.at("step").get<int64_t>();
    meta.val_loss = header.at("val_loss").get<double>();
    meta.config_hash = header.at("config_hash").get<std::string>();
    PolicyModel<float> policy{Transformer<float>(arch, std::move(params)), vocab, meta.phase};
    return {std::move(policy), meta};
}

}  // namespace selfrefine::policy
