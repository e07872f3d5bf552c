#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ppt/datagen.hpp"
#include "ppt/tape.hpp"

namespace ppt {

struct ModelConfig {
    int layers = 6;
    int heads = 4;
    int hidden = 256;
    int max_positions = 16;
    int num_actions = 4;
    int context_dim = 3;

    // per turn: current context, previous winner/loser one-hots, previous context
    int token_dim() const { return 2 * context_dim + 2 * num_actions; }
    int ff_dim() const { return 4 * hidden; }

    void validate() const {
        check(layers >= 1, "model: layers must be >= 1");
        check(heads >= 1 && hidden >= 1, "model: heads/hidden must be >= 1");
        check(hidden % heads == 0, "model: hidden must be divisible by heads");
        check(max_positions >= 2, "model: max_positions must be >= 2");
        check(num_actions >= 2, "model: num_actions must be >= 2");
        check(context_dim >= 1, "model: context_dim must be >= 1");
    }
};

namespace detail {

inline Tensor gaussian_tensor(Rng& rng, std::vector<int64_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.gaussian(0.0, stddev);
    return t;
}

}  // namespace detail

// Scaled Gaussian init (std 0.02; residual projections scaled by
// 1/sqrt(2*layers)), zero biases, layer norms at identity, and an all-zero
// output head so the initial policy is exactly uniform. Each tensor draws
// from its own named rng stream, so init is insensitive to insertion order.
inline ParamStore init_params(const Rng& rng, const ModelConfig& cfg) {
    cfg.validate();
    const double std0 = 0.02;
    const double resid = std0 / std::sqrt(2.0 * cfg.layers);
    ParamStore p;

    auto gauss = [&](const std::string& name, std::vector<int64_t> shape, double stddev) {
        Rng r = rng.fork(name);
        p.add(name, detail::gaussian_tensor(r, std::move(shape), stddev));
    };
    auto zeros = [&](const std::string& name, std::vector<int64_t> shape) {
        p.add(name, Tensor(std::move(shape), 0.0));
    };
    auto ones = [&](const std::string& name, std::vector<int64_t> shape) {
        p.add(name, Tensor(std::move(shape), 1.0));
    };

    gauss("embed.w", {cfg.token_dim(), cfg.hidden}, std0);
    zeros("embed.b", {cfg.hidden});
    gauss("pos", {cfg.max_positions, cfg.hidden}, std0);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = cat("layer", l, ".");
        ones(pre + "ln1.g", {cfg.hidden});
        zeros(pre + "ln1.b", {cfg.hidden});
        for (const char* nm : {"attn.wq", "attn.wk", "attn.wv"})
            gauss(pre + nm, {cfg.hidden, cfg.hidden}, std0);
        gauss(pre + "attn.wo", {cfg.hidden, cfg.hidden}, resid);
        for (const char* nm : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            zeros(pre + nm, {cfg.hidden});
        ones(pre + "ln2.g", {cfg.hidden});
        zeros(pre + "ln2.b", {cfg.hidden});
        gauss(pre + "ff.w1", {cfg.hidden, cfg.ff_dim()}, std0);
        zeros(pre + "ff.b1", {cfg.ff_dim()});
        gauss(pre + "ff.w2", {cfg.ff_dim(), cfg.hidden}, resid);
        zeros(pre + "ff.b2", {cfg.hidden});
    }
    ones("final_ln.g", {cfg.hidden});
    zeros("final_ln.b", {cfg.hidden});
    zeros("head.w", {cfg.hidden, cfg.num_actions});
    zeros("head.b", {cfg.num_actions});
    return p;
}

// One token per turn: the current query context plus the previous turn's
// outcome (winner/loser one-hots and that turn's context); the outcome fields
// are zero at the first position. Position t therefore conditions on the
// history through t-1 and the question at t. Rows of the result are tokens.
inline Tensor encode_sequence(const ModelConfig& cfg, const std::vector<Context>& contexts,
                              const std::vector<PreferenceTriple>& completed) {
    check(contexts.size() == completed.size() + 1,
          "encode_sequence: need one more context than completed turns");
    const auto n = static_cast<int64_t>(contexts.size());
    Tensor tok({n, cfg.token_dim()}, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const Context& cur = contexts[static_cast<size_t>(i)];
        check(static_cast<int>(cur.x.size()) == cfg.context_dim, "encode_sequence: context dim mismatch");
        for (int d = 0; d < cfg.context_dim; ++d) tok.at(i, d) = cur.x[static_cast<size_t>(d)];
        if (i == 0) continue;
        const PreferenceTriple& prev = completed[static_cast<size_t>(i - 1)];
        check(prev.winner >= 0 && prev.winner < cfg.num_actions && prev.loser >= 0 &&
                  prev.loser < cfg.num_actions && prev.winner != prev.loser,
              "encode_sequence: bad triple actions");
        check(static_cast<int>(prev.x.x.size()) == cfg.context_dim,
              "encode_sequence: triple context dim mismatch");
        tok.at(i, cfg.context_dim + prev.winner) = 1.0;
        tok.at(i, cfg.context_dim + cfg.num_actions + prev.loser) = 1.0;
        for (int d = 0; d < cfg.context_dim; ++d)
            tok.at(i, cfg.context_dim + 2 * cfg.num_actions + d) = prev.x.x[static_cast<size_t>(d)];
    }
    return tok;
}

// recover (winner, loser, context) from a token's outcome fields
inline PreferenceTriple decode_token_outcome(const ModelConfig& cfg, const Tensor& tokens, int64_t row) {
    PreferenceTriple t;
    t.winner = t.loser = -1;
    for (int a = 0; a < cfg.num_actions; ++a) {
        if (tokens.at(row, cfg.context_dim + a) == 1.0) t.winner = a;
        if (tokens.at(row, cfg.context_dim + cfg.num_actions + a) == 1.0) t.loser = a;
    }
    check(t.winner >= 0 && t.loser >= 0, "decode_token_outcome: no outcome at this position");
    for (int d = 0; d < cfg.context_dim; ++d)
        t.x.x.push_back(tokens.at(row, cfg.context_dim + 2 * cfg.num_actions + d));
    return t;
}

// Pre-norm causal transformer over already-encoded tokens. `segments` lists
// independent sequences packed row-wise into `tokens`; positions restart at
// each segment. Returns the logits node (rows x num_actions).
inline Tape::Ref policy_logits(Tape& tape, const ParamRefs& p, const ModelConfig& cfg,
                               const Tensor& tokens, const Tape::Segments& segments) {
    check(tokens.cols() == cfg.token_dim(), "policy_logits: token width mismatch");
    std::vector<int> pos_idx;
    pos_idx.reserve(static_cast<size_t>(tokens.rows()));
    int64_t covered = 0;
    for (auto [start, len] : segments) {
        check(start == covered, "policy_logits: segments must tile the rows in order");
        check(len >= 1 && len <= cfg.max_positions,
              cat("policy_logits: sequence length ", len, " exceeds max_positions ", cfg.max_positions));
        for (int i = 0; i < len; ++i) pos_idx.push_back(i);
        covered += len;
    }
    check(covered == tokens.rows(), "policy_logits: segments do not cover all rows");

    Tape::Ref x = tape.constant(tokens);
    Tape::Ref h = tape.add(tape.affine(x, p("embed.w"), p("embed.b")),
                           tape.gather_rows(p("pos"), std::move(pos_idx)));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = cat("layer", l, ".");
        Tape::Ref a = tape.layer_norm(h, p(pre + "ln1.g"), p(pre + "ln1.b"));
        Tape::Ref att = tape.causal_attention(tape.affine(a, p(pre + "attn.wq"), p(pre + "attn.bq")),
                                              tape.affine(a, p(pre + "attn.wk"), p(pre + "attn.bk")),
                                              tape.affine(a, p(pre + "attn.wv"), p(pre + "attn.bv")),
                                              cfg.heads, segments);
        h = tape.add(h, tape.affine(att, p(pre + "attn.wo"), p(pre + "attn.bo")));
        Tape::Ref b = tape.layer_norm(h, p(pre + "ln2.g"), p(pre + "ln2.b"));
        Tape::Ref f = tape.affine(tape.gelu(tape.affine(b, p(pre + "ff.w1"), p(pre + "ff.b1"))),
                                  p(pre + "ff.w2"), p(pre + "ff.b2"));
        h = tape.add(h, f);
    }
    Tape::Ref fin = tape.layer_norm(h, p("final_ln.g"), p("final_ln.b"));
    return tape.affine(fin, p("head.w"), p("head.b"));
}

// Per-position action distributions, no gradients.
inline Tensor forward(const ParamStore& params, const ModelConfig& cfg, const Tensor& tokens,
                      const Tape::Segments& segments) {
    Tape tape(false);
    ParamRefs refs = bind_params(tape, params);
    Tape::Ref probs = tape.softmax_rows(policy_logits(tape, refs, cfg, tokens, segments));
    return tape.value(probs);
}

inline Tensor forward(const ParamStore& params, const ModelConfig& cfg, const Tensor& tokens) {
    return forward(params, cfg, tokens, {{0, static_cast<int>(tokens.rows())}});
}

// Distribution over actions for the query given the interaction history.
inline std::vector<double> policy_at(const ParamStore& params, const ModelConfig& cfg,
                                     const std::vector<PreferenceTriple>& history,
                                     const Context& query) {
    check(static_cast<int>(history.size()) <= cfg.max_positions - 1, "policy_at: history too long");
    std::vector<Context> contexts;
    contexts.reserve(history.size() + 1);
    for (const auto& t : history) contexts.push_back(t.x);
    contexts.push_back(query);
    Tensor probs = forward(params, cfg, encode_sequence(cfg, contexts, history));
    const int64_t last = probs.rows() - 1;
    std::vector<double> out(static_cast<size_t>(cfg.num_actions));
    for (int a = 0; a < cfg.num_actions; ++a) out[static_cast<size_t>(a)] = probs.at(last, a);
    return out;
}

// Same history against many query contexts in one batched forward; returns
// one distribution per query (each query is its own segment).
inline std::vector<std::vector<double>> policy_batch(const ParamStore& params, const ModelConfig& cfg,
                                                     const std::vector<PreferenceTriple>& history,
                                                     const std::vector<Context>& queries) {
    check(static_cast<int>(history.size()) <= cfg.max_positions - 1, "policy_batch: history too long");
    check(!queries.empty(), "policy_batch: no queries");
    const int len = static_cast<int>(history.size()) + 1;
    std::vector<Context> contexts;
    contexts.reserve(history.size() + 1);
    for (const auto& t : history) contexts.push_back(t.x);
    contexts.push_back(queries[0]);

    Tensor tokens({static_cast<int64_t>(queries.size()) * len, cfg.token_dim()}, 0.0);
    Tape::Segments segments;
    for (size_t q = 0; q < queries.size(); ++q) {
        contexts.back() = queries[q];
        Tensor one = encode_sequence(cfg, contexts, history);
        std::copy(one.data.begin(), one.data.end(),
                  tokens.data.begin() + static_cast<ptrdiff_t>(q * one.data.size()));
        segments.push_back({static_cast<int>(q) * len, len});
    }
    Tensor probs = forward(params, cfg, tokens, segments);
    std::vector<std::vector<double>> out(queries.size(),
                                         std::vector<double>(static_cast<size_t>(cfg.num_actions)));
    for (size_t q = 0; q < queries.size(); ++q) {
        const int64_t row = static_cast<int64_t>(q) * len + (len - 1);
        for (int a = 0; a < cfg.num_actions; ++a) out[q][static_cast<size_t>(a)] = probs.at(row, a);
    }
    return out;
}

inline int64_t param_count(const ParamStore& params) { return params.num_values(); }

}  // namespace ppt
