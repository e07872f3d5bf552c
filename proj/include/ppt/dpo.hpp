#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "ppt/adam.hpp"
#include "ppt/model.hpp"

namespace ppt {

struct ReferencePolicy {
    std::vector<double> probs{0.25, 0.25, 0.25, 0.25};

    void validate() const {
        double total = 0.0;
        for (double p : probs) {
            check(p > 0.0, "reference policy must be strictly positive");
            total += p;
        }
        check(std::abs(total - 1.0) <= 1e-9, "reference policy must sum to 1");
    }

    double log_prob(int action) const {
        check(action >= 0 && action < static_cast<int>(probs.size()),
              "reference policy: action out of range");
        return std::log(probs[static_cast<size_t>(action)]);
    }
};

struct DpoConfig {
    double beta = 1.0;
    double learning_rate = 3e-4;
    int epochs = 60;
    int batch_size = 16;    // sequences per step (history-dependent training)
    int batch_triples = 64;  // triples per step (per-group baseline training)

    void validate() const {
        check(beta > 0.0, "dpo: beta must be > 0");
        check(learning_rate > 0.0, "dpo: learning_rate must be > 0");
        check(epochs >= 1, "dpo: epochs must be >= 1");
        check(batch_size >= 1 && batch_triples >= 1, "dpo: batch sizes must be >= 1");
    }
};

struct TrainReport {
    std::string label;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_mean_loss;
    int64_t steps = 0;
    double wall_seconds = 0.0;
    DpoConfig config;
};

// Token rows for a batch of sequences plus the per-row preference outcome.
struct DpoBatch {
    Tensor tokens;
    Tape::Segments segments;
    std::vector<int> winners;
    std::vector<int> losers;
};

inline DpoBatch make_sequence_batch(const ModelConfig& cfg,
                                    const std::vector<const HistorySequence*>& seqs) {
    check(!seqs.empty(), "dpo batch: empty batch");
    int64_t total = 0;
    for (const auto* s : seqs) {
        check(s && !s->triples.empty(), "dpo batch: empty sequence");
        check(static_cast<int>(s->triples.size()) <= cfg.max_positions,
              "dpo batch: sequence longer than max_positions");
        total += static_cast<int64_t>(s->triples.size());
    }
    DpoBatch b;
    b.tokens = Tensor({total, cfg.token_dim()}, 0.0);
    b.winners.reserve(static_cast<size_t>(total));
    b.losers.reserve(static_cast<size_t>(total));
    int64_t row = 0;
    for (const auto* s : seqs) {
        std::vector<Context> contexts;
        contexts.reserve(s->triples.size());
        for (const auto& t : s->triples) contexts.push_back(t.x);
        std::vector<PreferenceTriple> completed(s->triples.begin(), s->triples.end() - 1);
        Tensor tok = encode_sequence(cfg, contexts, completed);
        std::copy(tok.data.begin(), tok.data.end(),
                  b.tokens.data.begin() + static_cast<ptrdiff_t>(row * cfg.token_dim()));
        b.segments.push_back({static_cast<int>(row), static_cast<int>(tok.rows())});
        for (const auto& t : s->triples) {
            b.winners.push_back(t.winner);
            b.losers.push_back(t.loser);
        }
        row += tok.rows();
    }
    return b;
}

// history-free examples: each triple is its own length-1 sequence
inline DpoBatch make_triple_batch(const ModelConfig& cfg,
                                  const std::vector<PreferenceTriple>& triples) {
    check(!triples.empty(), "dpo batch: empty batch");
    DpoBatch b;
    b.tokens = Tensor({static_cast<int64_t>(triples.size()), cfg.token_dim()}, 0.0);
    for (size_t i = 0; i < triples.size(); ++i) {
        Tensor tok = encode_sequence(cfg, {triples[i].x}, {});
        std::copy(tok.data.begin(), tok.data.end(),
                  b.tokens.data.begin() + static_cast<ptrdiff_t>(i * tok.data.size()));
        b.segments.push_back({static_cast<int>(i), 1});
        b.winners.push_back(triples[i].winner);
        b.losers.push_back(triples[i].loser);
    }
    return b;
}

// Per row: -log sigmoid( beta*log(p[w]/ref[w]) - beta*log(p[l]/ref[l]) ),
// averaged over all rows (positions and sequences alike). Log-probabilities
// come from log-softmax over the logits, never log of softmax.
inline Tape::Ref dpo_loss_graph(Tape& tape, const ParamRefs& p, const ModelConfig& cfg,
                                const DpoBatch& batch, const ReferencePolicy& ref, double beta) {
    ref.validate();
    check(beta > 0.0, "dpo: beta must be > 0");
    Tape::Ref logp = tape.log_softmax_rows(policy_logits(tape, p, cfg, batch.tokens, batch.segments));
    Tape::Ref lw = tape.pick_columns(logp, batch.winners);
    Tape::Ref ll = tape.pick_columns(logp, batch.losers);

    Tensor ref_diff({static_cast<int64_t>(batch.winners.size()), 1});
    for (size_t i = 0; i < batch.winners.size(); ++i)
        ref_diff.data[i] = ref.log_prob(batch.winners[i]) - ref.log_prob(batch.losers[i]);

    Tape::Ref u = tape.scale(tape.sub(tape.sub(lw, ll), tape.constant(std::move(ref_diff))), beta);
    return tape.mean_all(tape.softplus(tape.neg(u)));
}

inline double dpo_loss_value(const ParamStore& params, const ModelConfig& cfg, const DpoBatch& batch,
                             const ReferencePolicy& ref, double beta) {
    Tape tape(false);
    ParamRefs refs = bind_params(tape, params);
    return tape.value(dpo_loss_graph(tape, refs, cfg, batch, ref, beta)).data[0];
}

inline double history_dpo_loss(const ParamStore& params, const ModelConfig& cfg,
                               const std::vector<const HistorySequence*>& seqs,
                               const ReferencePolicy& ref, double beta) {
    return dpo_loss_value(params, cfg, make_sequence_batch(cfg, seqs), ref, beta);
}

inline double standard_dpo_loss(const ParamStore& params, const ModelConfig& cfg,
                                const std::vector<PreferenceTriple>& triples,
                                const ReferencePolicy& ref, double beta) {
    return dpo_loss_value(params, cfg, make_triple_batch(cfg, triples), ref, beta);
}

namespace detail {

struct StepResult {
    double loss;
};

inline StepResult train_step(ParamStore& params, OptState& opt, const ModelConfig& cfg,
                             const DpoBatch& batch, const ReferencePolicy& ref, double beta) {
    auto [loss, grads] = value_and_grad(params, [&](Tape& tape, const ParamRefs& refs) {
        return dpo_loss_graph(tape, refs, cfg, batch, ref, beta);
    });
    adam_step(params, grads, opt);
    return {loss};
}

}  // namespace detail

// History-dependent training: each epoch re-partitions the pools into fresh
// length-T sequences and draws group-balanced batches (slots cycle the groups
// round-robin, per-group cursors wrap) so every group contributes equally to
// the expected loss regardless of its dataset size.
inline std::pair<ParamStore, TrainReport> train_ppt(const Rng& rng, const OfflineDataset& dataset,
                                                    const ModelConfig& model_cfg,
                                                    const DpoConfig& dpo_cfg,
                                                    const ReferencePolicy& ref = {}) {
    model_cfg.validate();
    dpo_cfg.validate();
    ref.validate();
    dataset.validate();
    const int K = dataset.num_groups();
    check(K >= 1, "train_ppt: dataset has no groups");
    for (int g = 0; g < K; ++g)
        check(!dataset.sequences[static_cast<size_t>(g)].empty(),
              cat("train_ppt: group ", g, " has no full sequence"));
    check(dataset.T <= model_cfg.max_positions, "train_ppt: T exceeds max_positions");

    const auto t0 = std::chrono::steady_clock::now();
    ParamStore params = init_params(rng.fork("init"), model_cfg);
    OptState opt = OptState::init(params, AdamHyper{.learning_rate = dpo_cfg.learning_rate});

    TrainReport report;
    report.label = "ppt";
    report.config = dpo_cfg;

    const int64_t total_seqs = static_cast<int64_t>(dataset.num_sequences());
    const int64_t steps_per_epoch = (total_seqs + dpo_cfg.batch_size - 1) / dpo_cfg.batch_size;

    for (int epoch = 0; epoch < dpo_cfg.epochs; ++epoch) {
        Rng re = rng.fork("epoch").fork(static_cast<uint64_t>(epoch));
        OfflineDataset ds = reshuffle_epoch(re, dataset);
        std::vector<size_t> cursor(static_cast<size_t>(K), 0);
        int64_t slot_counter = 0;
        double epoch_loss = 0.0;
        for (int64_t step = 0; step < steps_per_epoch; ++step) {
            std::vector<const HistorySequence*> batch;
            batch.reserve(static_cast<size_t>(dpo_cfg.batch_size));
            for (int slot = 0; slot < dpo_cfg.batch_size; ++slot) {
                const auto g = static_cast<size_t>(slot_counter++ % K);
                const auto& seqs = ds.sequences[g];
                batch.push_back(&seqs[cursor[g] % seqs.size()]);
                ++cursor[g];
            }
            auto r = detail::train_step(params, opt, model_cfg, make_sequence_batch(model_cfg, batch),
                                        ref, dpo_cfg.beta);
            if (report.steps == 0) report.initial_loss = r.loss;
            ++report.steps;
            epoch_loss += r.loss;
        }
        report.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }
    report.final_loss = report.epoch_mean_loss.back();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {std::move(params), std::move(report)};
}

// One history-free model per group, trained on that group's triples only.
// All models share the architecture so they can be interpolated weight-wise.
inline std::pair<std::vector<ParamStore>, std::vector<TrainReport>> train_ps_models(
    const Rng& rng, const OfflineDataset& dataset, const ModelConfig& model_cfg,
    const DpoConfig& dpo_cfg, const ReferencePolicy& ref = {}) {
    model_cfg.validate();
    dpo_cfg.validate();
    ref.validate();
    dataset.validate();
    const int K = dataset.num_groups();
    check(K >= 1, "train_ps_models: dataset has no groups");

    std::vector<ParamStore> models;
    std::vector<TrainReport> reports;
    for (int g = 0; g < K; ++g) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rg = rng.fork("group").fork(static_cast<uint64_t>(g));
        std::vector<PreferenceTriple> pool = dataset.pool(g);
        check(!pool.empty(), cat("train_ps_models: group ", g, " has no triples"));

        ParamStore params = init_params(rg.fork("init"), model_cfg);
        OptState opt = OptState::init(params, AdamHyper{.learning_rate = dpo_cfg.learning_rate});
        TrainReport report;
        report.label = cat("ps-group", g + 1);
        report.config = dpo_cfg;

        for (int epoch = 0; epoch < dpo_cfg.epochs; ++epoch) {
            Rng re = rg.fork("epoch").fork(static_cast<uint64_t>(epoch));
            re.shuffle(pool);
            double epoch_loss = 0.0;
            int64_t epoch_steps = 0;
            for (size_t start = 0; start < pool.size(); start += static_cast<size_t>(dpo_cfg.batch_triples)) {
                const size_t stop = std::min(pool.size(), start + static_cast<size_t>(dpo_cfg.batch_triples));
                std::vector<PreferenceTriple> batch(pool.begin() + static_cast<ptrdiff_t>(start),
                                                    pool.begin() + static_cast<ptrdiff_t>(stop));
                auto r = detail::train_step(params, opt, model_cfg, make_triple_batch(model_cfg, batch),
                                            ref, dpo_cfg.beta);
                if (report.steps == 0) report.initial_loss = r.loss;
                ++report.steps;
                ++epoch_steps;
                epoch_loss += r.loss;
            }
            report.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_steps));
        }
        report.final_loss = report.epoch_mean_loss.back();
        report.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        models.push_back(std::move(params));
        reports.push_back(std::move(report));
    }
    return {std::move(models), std::move(reports)};
}

}  // namespace ppt
