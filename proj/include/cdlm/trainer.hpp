#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cdlm/autodiff.hpp"
#include "cdlm/diffusion.hpp"
#include "cdlm/model.hpp"
#include "cdlm/trajectory.hpp"

namespace cdlm {

template <class T>
struct LossWeights {
    T w_distill = T(1.0);
    T w_cons = T(0.5);
    T w_dlm = T(0.01);

    void validate() const {
        check(w_distill >= 0 && w_cons >= 0 && w_dlm >= 0, "LossWeights: negative weight");
        check(w_distill > 0 || w_cons > 0 || w_dlm > 0, "LossWeights: all weights zero");
    }
};

template <class T>
struct LossBundle {
    T distill = 0, consistency = 0, dlm = 0, total = 0;
};

/// A trajectory state y and its block-completion state y*; U_y are the
/// positions unmasked between them, S_y the positions still masked at y*.
struct TrainingPair {
    SequenceState y;
    SequenceState y_star;
    std::vector<int> newly_unmasked;  // U_y, absolute positions
    std::vector<int> still_masked;    // S_y, absolute positions
    int t_start = 0;
    int t_end = 0;
};

/// t_start uniform over non-boundary steps; t_end = min(N, ceil(t_start/B)*B).
template <class T>
TrainingPair sample_pair(const TrajectoryRecord<T>& rec, std::mt19937_64& rng) {
    const int N = rec.total_steps;
    const int B = rec.block_size;
    std::uniform_int_distribution<int> u(0, N - 1);
    int t_start = u(rng);
    while (t_start % B == 0) t_start = u(rng);  // boundary pairs are degenerate
    return make_pair_at(rec, t_start);
}

template <class T>
TrainingPair make_pair_at(const TrajectoryRecord<T>& rec, int t_start) {
    const int N = rec.total_steps;
    const int B = rec.block_size;
    check(t_start >= 0 && t_start < N, "make_pair_at: t_start out of range");
    TrainingPair pair;
    pair.t_start = t_start;
    pair.t_end = std::min(N, ((t_start + B - 1) / B) * B);
    pair.y = reconstruct_state(rec, t_start);
    pair.y_star = reconstruct_state(rec, pair.t_end);
    for (int k = t_start; k < pair.t_end; ++k) pair.newly_unmasked.push_back(rec.events[k].position);
    std::sort(pair.newly_unmasked.begin(), pair.newly_unmasked.end());
    for (int i = pair.y_star.prompt_len; i < pair.y_star.seq_len(); ++i)
        if (pair.y_star.tokens[i] == tok::MASK) pair.still_masked.push_back(i);
    return pair;
}

/// Forward KL between teacher distributions reconstructed from the hidden
/// buffer (through the given head) and the student's predictions at y, over
/// the newly unmasked positions. The teacher side carries no gradient.
template <class T>
Node<T> distillation_loss(const Node<T>& student_logits, const TrajectoryRecord<T>& rec,
                          const std::vector<int>& newly_unmasked, const Model<T>& head_model) {
    check(!newly_unmasked.empty(), "distillation_loss: empty U_y");
    const int d = head_model.cfg.d_model;
    const int V = head_model.cfg.vocab_size;
    Array<T> hiddens({newly_unmasked.size(), static_cast<std::size_t>(d)});
    for (std::size_t i = 0; i < newly_unmasked.size(); ++i) {
        const auto& h = rec.hidden_for_offset(newly_unmasked[i] - rec.prompt_len());
        std::copy(h.begin(), h.end(), hiddens.row(i));
    }
    Array<T> teacher_logits = head_model.lm_head(hiddens);
    // row softmax with max subtraction
    Array<T> p = teacher_logits;
    for (std::size_t r = 0; r < p.rows(); ++r) {
        T* row = p.row(r);
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < V; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += static_cast<double>(row[j]);
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (int j = 0; j < V; ++j) row[j] *= inv;
    }
    std::vector<int> rows(newly_unmasked.begin(), newly_unmasked.end());
    Node<T> q = softmax(gather_rows(student_logits, rows));
    return kl_divergence(p, q);
}

/// Forward KL aligning the student at y with its own (detached) predictions
/// at y*, over still-masked positions. Zero when S_y is empty.
template <class T>
Node<T> consistency_loss(const Model<T>& student, const Node<T>& student_logits_y,
                         const SequenceState& y_star, const std::vector<int>& still_masked,
                         const AttnMask& mask) {
    if (still_masked.empty()) return constant(Array<T>({1}, T(0)));
    auto target_out = student.forward_graph(y_star.tokens, mask);
    Node<T> target_rows = softmax(gather_rows(target_out.logits, still_masked));
    Array<T> p = target_rows->value;  // stop-gradient: values only
    Node<T> q = softmax(gather_rows(student_logits_y, still_masked));
    return kl_divergence(p, q);
}

/// Masked-denoising objective: sample t ~ U[0,1], mask the clean target at
/// rate t, and score -1/t * log q at the masked positions. Resamples t when
/// no token lands masked.
template <class T>
Node<T> denoising_loss(const Model<T>& model, const std::vector<int>& padded_prompt,
                       const std::vector<int>& ground_truth, const AttentionMode& mode,
                       std::mt19937_64& rng) {
    SequenceState clean;
    clean.prompt_len = static_cast<int>(padded_prompt.size());
    clean.gen_len = static_cast<int>(ground_truth.size());
    clean.tokens = padded_prompt;
    clean.tokens.insert(clean.tokens.end(), ground_truth.begin(), ground_truth.end());

    std::uniform_real_distribution<double> u(0.0, 1.0);
    SequenceState noisy;
    double t = 0.0;
    do {
        t = u(rng);
        noisy = forward_mask(clean, t, rng);
    } while (noisy.masked_count() == 0);

    const AttnMask mask = build_attention_mask(mode, clean.seq_len(), noisy.tokens);
    auto out = model.forward_graph(noisy.tokens, mask);
    Node<T> logp = log_softmax(out.logits);
    const int L = clean.seq_len();
    std::vector<int> targets(L, 0);
    std::vector<char> masked(L, 0);
    std::vector<T> weight(L, T(0));
    for (int i = clean.prompt_len; i < L; ++i) {
        if (noisy.tokens[i] != tok::MASK) continue;
        targets[i] = clean.tokens[i];
        masked[i] = 1;
        weight[i] = static_cast<T>(1.0 / t);
    }
    return nll_masked(logp, targets, masked, weight);
}

/// Teacher pretraining objective: the same masked-denoising integral as
/// denoising_loss, but estimated with t drawn log-uniformly on [t_min, 1] so
/// the 1/t importance weight becomes the constant log(1/t_min). This is plain
/// importance sampling: the expectation is unchanged while the per-sample
/// weight no longer explodes as t -> 0, which keeps the gradient variance
/// bounded and lets tasks whose answers depend on neighbouring answer tokens
/// converge in a practical number of steps.
///
/// Generation spans are much longer than typical answers, so most maskable
/// positions are end-of-text fill; `tail_weight` scales the weight of fill
/// positions past the first EOT (the answer and its terminating EOT keep the
/// full weight) so the trivial fill pattern cannot drown out the answer
/// gradient.
template <class T>
Node<T> pretrain_loss(const Model<T>& model, const std::vector<int>& padded_prompt,
                      const std::vector<int>& ground_truth, const AttentionMode& mode,
                      std::mt19937_64& rng, double t_min = 0.02, double tail_weight = 0.05) {
    check(t_min > 0.0 && t_min < 1.0, "pretrain_loss: t_min outside (0,1)");
    check(tail_weight >= 0.0, "pretrain_loss: negative tail_weight");
    SequenceState clean;
    clean.prompt_len = static_cast<int>(padded_prompt.size());
    clean.gen_len = static_cast<int>(ground_truth.size());
    clean.tokens = padded_prompt;
    clean.tokens.insert(clean.tokens.end(), ground_truth.begin(), ground_truth.end());

    const double log_weight = std::log(1.0 / t_min);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SequenceState noisy;
    do {
        const double t = std::exp(u(rng) * std::log(t_min));  // log-uniform on [t_min, 1]
        noisy = forward_mask(clean, t, rng);
    } while (noisy.masked_count() == 0);

    const AttnMask mask = build_attention_mask(mode, clean.seq_len(), noisy.tokens);
    auto out = model.forward_graph(noisy.tokens, mask);
    Node<T> logp = log_softmax(out.logits);
    const int L = clean.seq_len();
    int first_eot = L;  // first EOT of the clean generation span, if any
    for (int i = clean.prompt_len; i < L; ++i)
        if (clean.tokens[i] == tok::EOT) { first_eot = i; break; }
    std::vector<int> targets(L, 0);
    std::vector<char> masked(L, 0);
    std::vector<T> weight(L, T(0));
    for (int i = clean.prompt_len; i < L; ++i) {
        if (noisy.tokens[i] != tok::MASK) continue;
        targets[i] = clean.tokens[i];
        masked[i] = 1;
        weight[i] = static_cast<T>(i > first_eot ? log_weight * tail_weight : log_weight);
    }
    return nll_masked(logp, targets, masked, weight);
}

/// Block-causal masked-denoising term of the student objective.
template <class T>
Node<T> dlm_loss(const Model<T>& student, const std::vector<int>& padded_prompt,
                 const std::vector<int>& ground_truth, int block_size, std::mt19937_64& rng) {
    const auto mode =
        AttentionMode::block_causal(block_size, static_cast<int>(padded_prompt.size()));
    return denoising_loss(student, padded_prompt, ground_truth, mode, rng);
}

template <class T>
struct TrainConfig {
    int epochs = 16;
    int batch_size = 64;
    T lr = T(2e-4);
    double warmup_frac = 0.05;
    T weight_decay = T(0);
    LossWeights<T> weights;
    std::uint64_t seed = 0;
};

template <class T>
struct CurveRow {
    int epoch = 0;
    T distill = 0, consistency = 0, dlm = 0, total = 0;
    double val_score = 0.0;
};

/// One optimizer update on a batch of trajectory records.
template <class T>
LossBundle<T> train_step(const std::vector<const TrajectoryRecord<T>*>& batch, Model<T>& student,
                         const Model<T>& teacher, const LossWeights<T>& weights, AdamW<T>& opt,
                         std::mt19937_64& rng, int step_index) {
    weights.validate();
    check(!batch.empty(), "train_step: empty batch");
    auto params = student.parameters();
    for (auto& p : params) zero_grad(p);
    const T inv_batch = T(1) / static_cast<T>(batch.size());
    LossBundle<T> bundle;
    for (const auto* rec : batch) {
        const TrainingPair pair = sample_pair(*rec, rng);
        const auto mode = AttentionMode::block_causal(rec->block_size, rec->prompt_len());
        const AttnMask mask = build_attention_mask(mode, pair.y.seq_len(), pair.y.tokens);

        Node<T> total;
        Node<T> logits_y;
        if (weights.w_distill > 0 || weights.w_cons > 0)
            logits_y = student.forward_graph(pair.y.tokens, mask).logits;
        if (weights.w_distill > 0) {
            Node<T> l = distillation_loss(logits_y, *rec, pair.newly_unmasked, teacher);
            bundle.distill += l->value.data[0];
            total = mul_scalar(l, weights.w_distill);
        }
        if (weights.w_cons > 0) {
            const AttnMask mask_star =
                build_attention_mask(mode, pair.y_star.seq_len(), pair.y_star.tokens);
            Node<T> l = consistency_loss(student, logits_y, pair.y_star, pair.still_masked, mask_star);
            bundle.consistency += l->value.data[0];
            Node<T> wl = mul_scalar(l, weights.w_cons);
            total = total ? add(total, wl) : wl;
        }
        if (weights.w_dlm > 0) {
            Node<T> l = dlm_loss(student, rec->prompt, rec->ground_truth, rec->block_size, rng);
            bundle.dlm += l->value.data[0];
            Node<T> wl = mul_scalar(l, weights.w_dlm);
            total = total ? add(total, wl) : wl;
        }
        backward(mul_scalar(total, inv_batch));
    }
    bundle.distill *= inv_batch;
    bundle.consistency *= inv_batch;
    bundle.dlm *= inv_batch;
    bundle.total = weights.w_distill * bundle.distill + weights.w_cons * bundle.consistency +
                   weights.w_dlm * bundle.dlm;
    if (!std::isfinite(static_cast<double>(bundle.total)))
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step_index) +
                                 " (distill=" + std::to_string(bundle.distill) +
                                 ", cons=" + std::to_string(bundle.consistency) +
                                 ", dlm=" + std::to_string(bundle.dlm) + ")");
    opt.step(params);
    return bundle;
}

template <class T>
struct TrainResult {
    Model<T> best;
    std::vector<CurveRow<T>> curve;
    int best_epoch = 0;
};

/// Full training loop; keeps the checkpoint of the best validation epoch.
template <class T>
TrainResult<T> train(const std::vector<TrajectoryRecord<T>>& dataset, const Model<T>& init,
                     const Model<T>& teacher, const TrainConfig<T>& cfg,
                     const std::function<double(const Model<T>&)>& validate,
                     const std::function<void(const CurveRow<T>&)>& on_epoch = {}) {
    check(!dataset.empty(), "train: empty dataset");
    Model<T> student = init.clone();
    AdamW<T> opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(dataset.size()) / cfg.batch_size);
    opt.warmup_steps =
        static_cast<std::size_t>(cfg.warmup_frac * steps_per_epoch * cfg.epochs);

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult<T> result{student.clone(), {}, 0};
    double best_val = -1.0;
    int step_index = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        LossBundle<T> epoch_sum;
        int n_steps = 0;
        for (std::size_t off = 0; off + cfg.batch_size <= order.size() || (off == 0 && order.size() < static_cast<std::size_t>(cfg.batch_size));
             off += cfg.batch_size) {
            std::vector<const TrajectoryRecord<T>*> batch;
            for (std::size_t i = off; i < std::min(order.size(), off + cfg.batch_size); ++i)
                batch.push_back(&dataset[order[i]]);
            if (batch.empty()) break;
            const auto b = train_step(batch, student, teacher, cfg.weights, opt, rng, step_index++);
            epoch_sum.distill += b.distill;
            epoch_sum.consistency += b.consistency;
            epoch_sum.dlm += b.dlm;
            epoch_sum.total += b.total;
            ++n_steps;
        }
        CurveRow<T> row;
        row.epoch = epoch;
        row.distill = epoch_sum.distill / n_steps;
        row.consistency = epoch_sum.consistency / n_steps;
        row.dlm = epoch_sum.dlm / n_steps;
        row.total = epoch_sum.total / n_steps;
        row.val_score = validate ? validate(student) : 0.0;
        result.curve.push_back(row);
        if (on_epoch) on_epoch(row);
        if (row.val_score > best_val) {
            best_val = row.val_score;
            result.best = student.clone();
            result.best_epoch = epoch;
        }
    }
    if (!validate) result.best = student.clone();
    return result;
}

}  // namespace cdlm
