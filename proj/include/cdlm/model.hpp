#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cdlm/array.hpp"
#include "cdlm/autodiff.hpp"
#include "cdlm/io.hpp"
#include "cdlm/vocab.hpp"

namespace cdlm {

struct ModelConfig {
    int vocab_size = 47;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq_len = 128;
    bool tied_lm_head = true;

    void validate() const {
        check(vocab_size > tok::FIRST_SYMBOL, "ModelConfig: vocab too small for specials");
        check(d_model % n_heads == 0, "ModelConfig: d_model not divisible by n_heads");
        check(n_layers >= 1 && d_ff >= 1 && max_seq_len >= 1, "ModelConfig: bad sizes");
    }
    int head_dim() const { return d_model / n_heads; }
};

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

struct AttentionMode {
    enum class Kind { Bidirectional, BlockCausal };
    Kind kind = Kind::Bidirectional;
    int block_size = 0;  // BlockCausal only
    int prompt_len = 0;

    static AttentionMode bidirectional() { return {Kind::Bidirectional, 0, 0}; }
    static AttentionMode block_causal(int block_size, int prompt_len) {
        return {Kind::BlockCausal, block_size, prompt_len};
    }
};

struct AttnMask {
    int n = 0;
    std::vector<std::uint8_t> allow;  // n*n, row-major
    bool at(int i, int j) const { return allow[static_cast<std::size_t>(i) * n + j] != 0; }
    void set(int i, int j, bool v) { allow[static_cast<std::size_t>(i) * n + j] = v ? 1 : 0; }
};

/// Structural mask; entry (i,j) == query i may attend key j.
inline AttnMask build_attention_mask(const AttentionMode& mode, int seq_len) {
    AttnMask m;
    m.n = seq_len;
    m.allow.assign(static_cast<std::size_t>(seq_len) * seq_len, 0);
    if (mode.kind == AttentionMode::Kind::Bidirectional) {
        std::fill(m.allow.begin(), m.allow.end(), 1);
        return m;
    }
    const int B = mode.block_size;
    const int p = mode.prompt_len;
    check(B >= 1, "build_attention_mask: block size must be >= 1");
    check(p >= 0 && p <= seq_len, "build_attention_mask: bad prompt length");
    check((seq_len - p) % B == 0, "build_attention_mask: generation span not block-aligned");
    for (int i = 0; i < seq_len; ++i) {
        if (i < p) {
            for (int j = 0; j < p; ++j) m.set(i, j, true);  // prompt attends prompt only
        } else {
            const int bi = (i - p) / B;
            for (int j = 0; j < p; ++j) m.set(i, j, true);
            for (int j = p; j < seq_len; ++j)
                if ((j - p) / B <= bi) m.set(i, j, true);
        }
    }
    return m;
}

/// Same, with PAD positions removed as keys.
inline AttnMask build_attention_mask(const AttentionMode& mode, int seq_len,
                                     const std::vector<int>& tokens) {
    check(static_cast<int>(tokens.size()) == seq_len, "build_attention_mask: token count mismatch");
    AttnMask m = build_attention_mask(mode, seq_len);
    for (int j = 0; j < seq_len; ++j)
        if (tokens[j] == tok::PAD)
            for (int i = 0; i < seq_len; ++i) m.set(i, j, false);
    return m;
}

template <class T>
Array<T> mask_bias(const AttnMask& m) {
    Array<T> b({static_cast<std::size_t>(m.n), static_cast<std::size_t>(m.n)});
    for (std::size_t i = 0; i < b.size(); ++i) b.data[i] = m.allow[i] ? T(0) : T(-1e30);
    return b;
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

template <class T>
struct KVCache {
    int frontier = 0;  // number of positions with committed K/V
    int prompt_len = 0;
    int block_size = 0;
    std::vector<Array<T>> k, v;          // per layer, [max_seq x d_model]
    std::vector<std::uint8_t> key_valid;  // PAD keys excluded

    KVCache(const ModelConfig& cfg, int block_size_, int prompt_len_)
        : prompt_len(prompt_len_), block_size(block_size_) {
        const std::size_t L = static_cast<std::size_t>(cfg.max_seq_len);
        const std::size_t d = static_cast<std::size_t>(cfg.d_model);
        k.assign(cfg.n_layers, Array<T>({L, d}));
        v.assign(cfg.n_layers, Array<T>({L, d}));
        key_valid.assign(L, 0);
    }

    int committed_blocks() const { return frontier <= prompt_len ? 0 : (frontier - prompt_len) / block_size; }
};

template <class T>
struct ForwardOutput {
    Array<T> logits;       // [n_eval x V]
    Array<T> last_hidden;  // [n_eval x d]
    int first_pos = 0;     // absolute position of row 0
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
struct GraphOutput {
    Node<T> logits;
    Node<T> last_hidden;
};

template <class T>
class Model {
  public:
    ModelConfig cfg;

    explicit Model(const ModelConfig& c) : cfg(c) {
        cfg.validate();
        const auto V = static_cast<std::size_t>(cfg.vocab_size);
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto L = static_cast<std::size_t>(cfg.max_seq_len);
        const auto dff = static_cast<std::size_t>(cfg.d_ff);
        tok_emb_ = leaf(Array<T>({V, d}), true, "tok_emb");
        pos_emb_ = leaf(Array<T>({L, d}), true, "pos_emb");
        layers_.resize(cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& lp = layers_[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            lp.ln1_g = leaf(Array<T>({d}, T(1)), true, pre + "ln1.g");
            lp.ln1_b = leaf(Array<T>({d}), true, pre + "ln1.b");
            lp.wq = leaf(Array<T>({d, d}), true, pre + "attn.wq");
            lp.bq = leaf(Array<T>({d}), true, pre + "attn.bq");
            lp.wk = leaf(Array<T>({d, d}), true, pre + "attn.wk");
            lp.bk = leaf(Array<T>({d}), true, pre + "attn.bk");
            lp.wv = leaf(Array<T>({d, d}), true, pre + "attn.wv");
            lp.bv = leaf(Array<T>({d}), true, pre + "attn.bv");
            lp.wo = leaf(Array<T>({d, d}), true, pre + "attn.wo");
            lp.bo = leaf(Array<T>({d}), true, pre + "attn.bo");
            lp.ln2_g = leaf(Array<T>({d}, T(1)), true, pre + "ln2.g");
            lp.ln2_b = leaf(Array<T>({d}), true, pre + "ln2.b");
            lp.w1 = leaf(Array<T>({d, dff}), true, pre + "ff.w1");
            lp.b1 = leaf(Array<T>({dff}), true, pre + "ff.b1");
            lp.w2 = leaf(Array<T>({dff, d}), true, pre + "ff.w2");
            lp.b2 = leaf(Array<T>({d}), true, pre + "ff.b2");
        }
        lnf_g_ = leaf(Array<T>({d}, T(1)), true, "ln_f.g");
        lnf_b_ = leaf(Array<T>({d}), true, "ln_f.b");
        if (!cfg.tied_lm_head) head_w_ = leaf(Array<T>({d, V}), true, "head.w");
        head_b_ = leaf(Array<T>({V}), true, "head.b");
    }

    void init_params(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const T std_w = T(0.02);
        for (auto& p : parameters()) {
            if (p->name.find(".g") != std::string::npos && p->value.rank() == 1) continue;  // gains stay 1
            if (p->value.rank() == 2)
                p->value = random_normal<T>(p->value.shape, std_w, rng);
            // biases stay 0
        }
    }

    std::vector<Node<T>> parameters() const {
        std::vector<Node<T>> out{tok_emb_, pos_emb_};
        for (auto& lp : layers_) {
            for (auto& n : {lp.ln1_g, lp.ln1_b, lp.wq, lp.bq, lp.wk, lp.bk, lp.wv, lp.bv,
                            lp.wo, lp.bo, lp.ln2_g, lp.ln2_b, lp.w1, lp.b1, lp.w2, lp.b2})
                out.push_back(n);
        }
        out.push_back(lnf_g_);
        out.push_back(lnf_b_);
        if (head_w_) out.push_back(head_w_);
        out.push_back(head_b_);
        return out;
    }

    /// Weight tying exposes the same storage through embedding and head.
    bool head_shares_embedding() const { return cfg.tied_lm_head; }
    const Node<T>& token_embedding() const { return tok_emb_; }
    const Node<T>& head_param() const { return cfg.tied_lm_head ? tok_emb_ : head_w_; }

    Model clone() const {
        Model m(cfg);
        auto src = parameters();
        auto dst = m.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
        return m;
    }

    // -- differentiable forward (training path) -----------------------------

    GraphOutput<T> forward_graph(const std::vector<int>& tokens, const AttnMask& mask) const {
        const int L = static_cast<int>(tokens.size());
        check(L <= cfg.max_seq_len, "forward_graph: sequence too long");
        check(mask.n == L, "forward_graph: mask size mismatch");
        std::vector<int> pos_ids(L);
        for (int i = 0; i < L; ++i) pos_ids[i] = i;
        Node<T> x = add(embedding(tok_emb_, tokens), embedding(pos_emb_, pos_ids));
        const Array<T> bias = mask_bias<T>(mask);
        const int dh = cfg.head_dim();
        const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
        for (auto& lp : layers_) {
            Node<T> h = layer_norm(x, lp.ln1_g, lp.ln1_b);
            Node<T> q = add_bias(matmul(h, lp.wq), lp.bq);
            Node<T> k = add_bias(matmul(h, lp.wk), lp.bk);
            Node<T> v = add_bias(matmul(h, lp.wv), lp.bv);
            std::vector<Node<T>> heads;
            for (int hh = 0; hh < cfg.n_heads; ++hh) {
                auto qh = slice_cols(q, hh * dh, dh);
                auto kh = slice_cols(k, hh * dh, dh);
                auto vh = slice_cols(v, hh * dh, dh);
                auto s = add_const(mul_scalar(matmul_nt(qh, kh), scale), bias);
                heads.push_back(matmul(softmax(s), vh));
            }
            Node<T> attn = add_bias(matmul(concat_cols(heads), lp.wo), lp.bo);
            x = add(x, attn);
            Node<T> h2 = layer_norm(x, lp.ln2_g, lp.ln2_b);
            Node<T> ff = add_bias(matmul(relu(add_bias(matmul(h2, lp.w1), lp.b1)), lp.w2), lp.b2);
            x = add(x, ff);
        }
        Node<T> hidden = layer_norm(x, lnf_g_, lnf_b_);
        return {lm_head_graph(hidden), hidden};
    }

    Node<T> lm_head_graph(const Node<T>& hidden) const {
        if (cfg.tied_lm_head) return add_bias(matmul_nt(hidden, tok_emb_), head_b_);
        return add_bias(matmul(hidden, head_w_), head_b_);
    }

    // -- plain forward (inference path, no gradients) -----------------------

    /// Affine projection of hidden rows into vocabulary logits. Shared by the
    /// inference forward and by hidden-state buffer reconstruction, so a
    /// stored hidden row reprojects to exactly the logits seen at collection.
    Array<T> lm_head(const Array<T>& hidden) const {
        check(hidden.rank() == 2 && hidden.cols() == static_cast<std::size_t>(cfg.d_model),
              "lm_head: hidden width mismatch");
        Array<T> logits;
        if (cfg.tied_lm_head)
            gemm_nt(hidden, tok_emb_->value, logits, false);
        else
            gemm_nn(hidden, head_w_->value, logits, false);
        for (std::size_t i = 0; i < logits.rows(); ++i)
            for (std::size_t j = 0; j < logits.cols(); ++j)
                logits.at(i, j) += head_b_->value.data[j];
        return logits;
    }

    /// Full-sequence forward without a cache. Logits cover every position.
    ForwardOutput<T> forward(const std::vector<int>& tokens, const AttentionMode& mode) const {
        const int L = static_cast<int>(tokens.size());
        check(L <= cfg.max_seq_len, "forward: sequence too long");
        const AttnMask mask = build_attention_mask(mode, L, tokens);
        Array<T> hidden = run_stack(tokens, 0, L, mask, nullptr, false);
        ForwardOutput<T> out;
        out.last_hidden = std::move(hidden);
        out.logits = lm_head(out.last_hidden);
        out.first_pos = 0;
        return out;
    }

    /// Cached block-causal forward: evaluates only the active block
    /// [cache.frontier, cache.frontier + B). Primes the prompt K/V on first use.
    ForwardOutput<T> forward(const std::vector<int>& tokens, const AttentionMode& mode,
                             KVCache<T>& cache) const {
        check(mode.kind == AttentionMode::Kind::BlockCausal, "cached forward requires BlockCausal");
        check(mode.block_size == cache.block_size && mode.prompt_len == cache.prompt_len,
              "cached forward: mode does not match cache");
        const int L = static_cast<int>(tokens.size());
        check(L <= cfg.max_seq_len, "forward: sequence too long");
        check((L - mode.prompt_len) % mode.block_size == 0,
              "forward: generation span not block-aligned");
        if (cache.frontier == 0) prime_prompt(tokens, cache);
        check((cache.frontier - cache.prompt_len) % cache.block_size == 0,
              "forward: cache frontier misaligned with block boundary");
        const int start = cache.frontier;
        const int B = cache.block_size;
        check(start + B <= L, "forward: active block out of range");
        ForwardOutput<T> out;
        out.last_hidden = run_stack(tokens, start, B, AttnMask{}, &cache, false);
        out.logits = lm_head(out.last_hidden);
        out.first_pos = start;
        return out;
    }

    /// Recomputes K/V for a finalized block from its final token values and
    /// advances the frontier. block_index counts generation blocks from 0.
    void commit_block(KVCache<T>& cache, const std::vector<int>& tokens, int block_index) const {
        check(cache.frontier >= cache.prompt_len, "commit_block: prompt not primed");
        const int expected = cache.committed_blocks();
        check(block_index == expected,
              "commit_block: block " + std::to_string(block_index) +
                  (block_index < expected ? " already committed" : " out of order"));
        const int start = cache.prompt_len + block_index * cache.block_size;
        const int B = cache.block_size;
        check(start + B <= static_cast<int>(tokens.size()), "commit_block: block out of range");
        for (int i = start; i < start + B; ++i)
            check(tokens[i] != tok::MASK, "commit_block: block still contains MASK");
        run_stack(tokens, start, B, AttnMask{}, &cache, true);
        for (int i = start; i < start + B; ++i) cache.key_valid[i] = 1;
        cache.frontier += B;
    }

    // -- checkpoint ---------------------------------------------------------

    void save(const std::string& path) const {
        ByteWriter w;
        w.raw("CDLMCKPT", 8);
        w.u32(1);  // version
        w.u32(static_cast<std::uint32_t>(cfg.vocab_size));
        w.u32(static_cast<std::uint32_t>(cfg.d_model));
        w.u32(static_cast<std::uint32_t>(cfg.n_layers));
        w.u32(static_cast<std::uint32_t>(cfg.n_heads));
        w.u32(static_cast<std::uint32_t>(cfg.d_ff));
        w.u32(static_cast<std::uint32_t>(cfg.max_seq_len));
        w.u32(cfg.tied_lm_head ? 1 : 0);
        auto params = parameters();
        w.u32(static_cast<std::uint32_t>(params.size()));
        for (auto& p : params) {
            w.str(p->name);
            w.u32(static_cast<std::uint32_t>(p->value.rank()));
            for (auto d : p->value.shape) w.u32(static_cast<std::uint32_t>(d));
            for (T x : p->value.data) w.f32(static_cast<float>(x));
        }
        w.u32(crc32(w.buf.data(), w.buf.size()));
        w.save(path);
    }

    static Model load(const std::string& path) {
        ByteReader r = ByteReader::from_file(path);
        if (r.buf.size() < 12) throw IoError("checkpoint truncated: " + path);
        const std::uint32_t stored = crc32(r.buf.data(), r.buf.size() - 4);
        std::uint32_t trail;
        std::memcpy(&trail, r.buf.data() + r.buf.size() - 4, 4);
        if (stored != trail) throw IoError("checkpoint checksum failure: " + path);
        char magic[8];
        r.raw(magic, 8);
        if (std::string(magic, 8) != "CDLMCKPT") throw IoError("bad checkpoint magic: " + path);
        const auto version = r.u32();
        if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
        ModelConfig cfg;
        cfg.vocab_size = static_cast<int>(r.u32());
        cfg.d_model = static_cast<int>(r.u32());
        cfg.n_layers = static_cast<int>(r.u32());
        cfg.n_heads = static_cast<int>(r.u32());
        cfg.d_ff = static_cast<int>(r.u32());
        cfg.max_seq_len = static_cast<int>(r.u32());
        cfg.tied_lm_head = r.u32() != 0;
        Model m(cfg);
        auto params = m.parameters();
        const auto n = r.u32();
        if (n != params.size()) throw IoError("checkpoint parameter count mismatch");
        for (auto& p : params) {
            const std::string name = r.str();
            if (name != p->name) throw IoError("checkpoint parameter order mismatch: " + name);
            const auto rank = r.u32();
            if (rank != p->value.rank()) throw IoError("checkpoint rank mismatch: " + name);
            for (std::size_t d = 0; d < rank; ++d)
                if (r.u32() != p->value.shape[d]) throw IoError("checkpoint shape mismatch: " + name);
            for (auto& x : p->value.data) x = static_cast<T>(r.f32());
        }
        return m;
    }

  private:
    struct LayerParams {
        Node<T> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    Node<T> tok_emb_, pos_emb_;
    std::vector<LayerParams> layers_;
    Node<T> lnf_g_, lnf_b_, head_w_, head_b_;

    static void layer_norm_rows(const Array<T>& in, const Array<T>& g, const Array<T>& b,
                                Array<T>& out) {
        const std::size_t n = in.cols(), m = in.rows();
        out.shape = in.shape;
        out.data.resize(in.size());
        for (std::size_t r = 0; r < m; ++r) {
            const T* x = in.row(r);
            T* o = out.row(r);
            double mean = 0.0;
            for (std::size_t j = 0; j < n; ++j) mean += static_cast<double>(x[j]);
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double d = static_cast<double>(x[j]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const T istd = static_cast<T>(1.0 / std::sqrt(var + 1e-5));
            for (std::size_t j = 0; j < n; ++j)
                o[j] = (x[j] - static_cast<T>(mean)) * istd * g.data[j] + b.data[j];
        }
    }

    static void linear(const Array<T>& x, const Array<T>& w, const Array<T>& b, Array<T>& out) {
        gemm_nn(x, w, out, false);
        for (std::size_t i = 0; i < out.rows(); ++i) {
            T* row = out.row(i);
            for (std::size_t j = 0; j < out.cols(); ++j) row[j] += b.data[j];
        }
    }

    static void softmax_rows(Array<T>& a) {
        const std::size_t n = a.cols();
        for (std::size_t r = 0; r < a.rows(); ++r) {
            T* x = a.row(r);
            T mx = x[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                x[j] = std::exp(x[j] - mx);
                sum += static_cast<double>(x[j]);
            }
            const T inv = static_cast<T>(1.0 / sum);
            for (std::size_t j = 0; j < n; ++j) x[j] *= inv;
        }
    }

    void prime_prompt(const std::vector<int>& tokens, KVCache<T>& cache) const {
        run_stack(tokens, 0, cache.prompt_len, AttnMask{}, &cache, true);
        for (int i = 0; i < cache.prompt_len; ++i)
            cache.key_valid[i] = tokens[i] == tok::PAD ? 0 : 1;
        cache.frontier = cache.prompt_len;
    }

    /// Runs the transformer stack for rows [start, start+count).
    /// Without a cache the full mask governs attention; with a cache the rows
    /// attend to cached keys [0, frontier) plus themselves. When write_kv is
    /// set, per-layer K/V of the rows are stored into the cache.
    Array<T> run_stack(const std::vector<int>& tokens, int start, int count, const AttnMask& mask,
                       KVCache<T>* cache, bool write_kv) const {
        const std::size_t d = static_cast<std::size_t>(cfg.d_model);
        const int dh = cfg.head_dim();
        const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
        const int ctx_cached = cache ? cache->frontier : 0;
        const int ctx = ctx_cached + count;  // keys visible to the rows
        const int n_rows = cache ? count : static_cast<int>(tokens.size());
        check(!cache || (start == ctx_cached), "run_stack: rows must start at the cache frontier");

        Array<T> x({static_cast<std::size_t>(n_rows), d});
        for (int i = 0; i < n_rows; ++i) {
            const int pos = cache ? start + i : i;
            const T* te = tok_emb_->value.row(tokens[pos]);
            const T* pe = pos_emb_->value.row(pos);
            T* o = x.row(i);
            for (std::size_t j = 0; j < d; ++j) o[j] = te[j] + pe[j];
        }

        Array<T> h, q, k, v, attn_out, ff1, ff2;
        Array<T> ctx_k, ctx_v;
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& lp = layers_[l];
            layer_norm_rows(x, lp.ln1_g->value, lp.ln1_b->value, h);
            linear(h, lp.wq->value, lp.bq->value, q);
            linear(h, lp.wk->value, lp.bk->value, k);
            linear(h, lp.wv->value, lp.bv->value, v);

            const Array<T>* keys = &k;
            const Array<T>* vals = &v;
            if (cache) {
                // contiguous context = cached rows + active rows
                ctx_k.shape = {static_cast<std::size_t>(ctx), d};
                ctx_k.data.resize(static_cast<std::size_t>(ctx) * d);
                ctx_v.shape = ctx_k.shape;
                ctx_v.data.resize(ctx_k.data.size());
                for (int i = 0; i < ctx_cached; ++i) {
                    std::copy(cache->k[l].row(i), cache->k[l].row(i) + d, ctx_k.row(i));
                    std::copy(cache->v[l].row(i), cache->v[l].row(i) + d, ctx_v.row(i));
                }
                for (int i = 0; i < count; ++i) {
                    std::copy(k.row(i), k.row(i) + d, ctx_k.row(ctx_cached + i));
                    std::copy(v.row(i), v.row(i) + d, ctx_v.row(ctx_cached + i));
                }
                keys = &ctx_k;
                vals = &ctx_v;
                if (write_kv) {
                    for (int i = 0; i < count; ++i) {
                        std::copy(k.row(i), k.row(i) + d, cache->k[l].row(start + i));
                        std::copy(v.row(i), v.row(i) + d, cache->v[l].row(start + i));
                    }
                }
            }

            attn_out.shape = {static_cast<std::size_t>(n_rows), d};
            attn_out.data.assign(static_cast<std::size_t>(n_rows) * d, T(0));
            Array<T> qh({static_cast<std::size_t>(n_rows), static_cast<std::size_t>(dh)});
            Array<T> kh({keys->rows(), static_cast<std::size_t>(dh)});
            Array<T> vh({vals->rows(), static_cast<std::size_t>(dh)});
            Array<T> scores, oh;
            for (int hh = 0; hh < cfg.n_heads; ++hh) {
                const std::size_t off = static_cast<std::size_t>(hh) * dh;
                for (int i = 0; i < n_rows; ++i)
                    std::copy(q.row(i) + off, q.row(i) + off + dh, qh.row(i));
                for (std::size_t i = 0; i < keys->rows(); ++i) {
                    std::copy(keys->row(i) + off, keys->row(i) + off + dh, kh.row(i));
                    std::copy(vals->row(i) + off, vals->row(i) + off + dh, vh.row(i));
                }
                gemm_nt(qh, kh, scores, false);
                for (auto& s : scores.data) s *= scale;
                if (cache) {
                    for (int i = 0; i < n_rows; ++i) {
                        T* srow = scores.row(i);
                        for (int j = 0; j < ctx_cached; ++j)
                            if (!cache->key_valid[j]) srow[j] = T(-1e30);
                        // in-flight PAD keys only occur while priming the prompt
                        for (int j = ctx_cached; j < ctx; ++j)
                            if (tokens[start + (j - ctx_cached)] == tok::PAD) srow[j] = T(-1e30);
                    }
                } else {
                    for (int i = 0; i < n_rows; ++i) {
                        T* srow = scores.row(i);
                        for (int j = 0; j < static_cast<int>(keys->rows()); ++j)
                            if (!mask.at(i, j)) srow[j] = T(-1e30);
                    }
                }
                softmax_rows(scores);
                // strict single-step key order: appended all-zero probability
                // columns then cannot perturb the sum, so the cached and
                // uncached paths mix to bit-identical values
                oh.shape = {static_cast<std::size_t>(n_rows), static_cast<std::size_t>(dh)};
                oh.data.assign(oh.shape[0] * oh.shape[1], T(0));
                for (int i = 0; i < n_rows; ++i) {
                    const T* srow = scores.row(i);
                    T* orow = oh.row(i);
                    for (std::size_t p = 0; p < vh.rows(); ++p) {
                        const T sv = srow[p];
                        const T* vrow = vh.row(p);
                        for (int j = 0; j < dh; ++j) orow[j] += sv * vrow[j];
                    }
                }
                for (int i = 0; i < n_rows; ++i)
                    std::copy(oh.row(i), oh.row(i) + dh, attn_out.row(i) + off);
            }
            Array<T> proj;
            linear(attn_out, lp.wo->value, lp.bo->value, proj);
            for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];

            layer_norm_rows(x, lp.ln2_g->value, lp.ln2_b->value, h);
            linear(h, lp.w1->value, lp.b1->value, ff1);
            for (auto& t : ff1.data)
                if (t < T(0)) t = T(0);
            linear(ff1, lp.w2->value, lp.b2->value, ff2);
            for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += ff2.data[i];
        }
        Array<T> hidden;
        layer_norm_rows(x, lnf_g_->value, lnf_b_->value, hidden);
        return hidden;
    }
};

}  // namespace cdlm
