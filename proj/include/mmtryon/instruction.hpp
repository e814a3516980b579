#pragma once

// The multi-modal instruction path: prompt templating with [REF#i]
// placeholders, a toy text encoder, a toy image patch encoder (penultimate
// layer output), perceiver-resampler downsampling, and placeholder fusion
// that splices resampled garment tokens into the text embedding.

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmtryon/attention.hpp"
#include "mmtryon/tensor.hpp"
#include "mmtryon/vocab.hpp"

namespace mmtryon::instruction {

// --------------------------------------------------------------------------
// prompt template
// --------------------------------------------------------------------------

struct GarmentSubject {
    std::string category;  // e.g. "top", "pants"
    std::string style;     // optional, e.g. "tucked in"
    int ref_index = 1;     // i of the [REF#i] placeholder
};

struct InstructionPrompt {
    std::vector<GarmentSubject> subjects;
    std::string rendered;
    std::vector<int> ids;                          // tokenized, fixed length
    std::vector<int> placeholder_positions;        // token index per subject
    std::vector<std::pair<int, int>> span_map;     // [begin,end) token range per subject
    std::vector<std::string> span_texts;           // "<garment>[, <style>]" per subject
};

inline bool plural_category(const std::string& c) {
    static const std::set<std::string> plurals = {"pants",    "shoes",  "socks",  "jeans",
                                                  "shorts",   "boots",  "sneakers", "sandals",
                                                  "gloves"};
    return plurals.count(c) > 0;
}

inline std::string join_pieces(const std::vector<std::string>& pieces, size_t b, size_t e) {
    std::string out;
    for (size_t i = b; i < e; ++i) {
        bool punct = (pieces[i] == "," || pieces[i] == ".");
        if (!out.empty() && !punct) out += ' ';
        out += pieces[i];
    }
    return out;
}

// "a person wearing a top, tucked in, [REF#1], pants [REF#2] and shoes [REF#3]"
inline InstructionPrompt build_prompt(const std::vector<GarmentSubject>& subjects,
                                      const Tokenizer& tk, int max_refs = 6) {
    size_t n = subjects.size();
    if (n < 1 || n > static_cast<size_t>(max_refs))
        throw std::invalid_argument("build_prompt: subject count must be in [1," +
                                    std::to_string(max_refs) + "]");
    std::set<int> seen;
    for (const auto& s : subjects) {
        if (s.category.empty()) throw std::invalid_argument("build_prompt: empty category");
        if (s.ref_index < 1 || s.ref_index > Vocabulary::kMaxRefTokens)
            throw std::invalid_argument("build_prompt: ref_index out of range");
        if (!seen.insert(s.ref_index).second)
            throw std::invalid_argument("build_prompt: duplicate ref_index " +
                                        std::to_string(s.ref_index));
    }

    std::vector<std::string> pieces{"a", "person", "wearing"};
    InstructionPrompt p;
    p.subjects = subjects;
    for (size_t i = 0; i < n; ++i) {
        const auto& s = subjects[i];
        size_t span_b = pieces.size();
        if (i == 0 && !plural_category(s.category)) pieces.push_back("a");
        for (const auto& w : Tokenizer::split(s.category)) pieces.push_back(w);
        if (!s.style.empty()) {
            pieces.push_back(",");
            for (const auto& w : Tokenizer::split(s.style)) pieces.push_back(w);
        }
        size_t span_e = pieces.size();
        if (!s.style.empty()) pieces.push_back(",");
        p.placeholder_positions.push_back(static_cast<int>(pieces.size()) + 1);  // +1 for [BOS]
        pieces.push_back("[REF#" + std::to_string(s.ref_index) + "]");
        if (i + 2 == n)
            pieces.push_back("and");
        else if (i + 2 < n)
            pieces.push_back(",");
        p.span_map.emplace_back(static_cast<int>(span_b) + 1, static_cast<int>(span_e) + 1);
        p.span_texts.push_back(join_pieces(pieces, span_b, span_e));
    }

    if (static_cast<int>(pieces.size()) + 2 > tk.max_len())
        throw std::invalid_argument("build_prompt: prompt does not fit sequence length " +
                                    std::to_string(tk.max_len()));
    p.rendered = join_pieces(pieces, 0, pieces.size());
    p.ids = tk.tokenize(p.rendered);
    // tokenization must agree with the piece positions
    for (size_t i = 0; i < n; ++i) {
        int pos = p.placeholder_positions[i];
        if (p.ids[static_cast<size_t>(pos)] != Vocabulary::ref_id(subjects[i].ref_index))
            throw std::logic_error("build_prompt: placeholder position bookkeeping broke");
    }
    return p;
}

// The "<garment>[, <style>]" text used to query the garment encoder.
inline std::string derive_query_span(const InstructionPrompt& p, int subject_index) {
    if (subject_index < 0 || subject_index >= static_cast<int>(p.subjects.size()))
        throw std::invalid_argument("derive_query_span: subject index out of range");
    return p.span_texts[static_cast<size_t>(subject_index)];
}

// --------------------------------------------------------------------------
// sinusoidal positions
// --------------------------------------------------------------------------

template <class S>
Tensor<S> sinusoidal_positions(int64_t length, int64_t dim) {
    Tensor<S> t(Shape{length, dim});
    for (int64_t p = 0; p < length; ++p)
        for (int64_t i = 0; i < dim; ++i) {
            double freq = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
            double angle = p * freq;
            t.data()[p * dim + i] = static_cast<S>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return t;
}

// --------------------------------------------------------------------------
// transformer building blocks
// --------------------------------------------------------------------------

template <class S>
struct FeedForward {
    Tensor<S> w1, b1, w2, b2;

    static FeedForward init(int64_t d, RandomStream& rs) {
        FeedForward f;
        double s1 = 1.0 / std::sqrt(static_cast<double>(d));
        double s2 = 1.0 / std::sqrt(static_cast<double>(4 * d));
        f.w1 = Tensor<S>::randn({d, 4 * d}, rs, s1);
        f.b1 = Tensor<S>::zeros({4 * d});
        f.w2 = Tensor<S>::randn({4 * d, d}, rs, s2);
        f.b2 = Tensor<S>::zeros({d});
        return f;
    }
    Tensor<S> forward(const Tensor<S>& x) const {
        return linear(silu(linear(x, w1, b1)), w2, b2);
    }
    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w1", w1);
        fn(prefix + ".b1", b1);
        fn(prefix + ".w2", w2);
        fn(prefix + ".b2", b2);
    }
};

// pre-LN self-attention + feed-forward
template <class S>
struct TransformerLayer {
    Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
    attention::AttentionParams<S> attn;
    FeedForward<S> ff;

    static TransformerLayer init(int64_t d, int heads, RandomStream& rs) {
        TransformerLayer l;
        l.ln1_g = Tensor<S>::full({d}, S(1));
        l.ln1_b = Tensor<S>::zeros({d});
        l.ln2_g = Tensor<S>::full({d}, S(1));
        l.ln2_b = Tensor<S>::zeros({d});
        l.attn = attention::AttentionParams<S>::init(d, d, heads, rs);
        l.ff = FeedForward<S>::init(d, rs);
        return l;
    }
    Tensor<S> forward(const Tensor<S>& x) const {
        Tensor<S> xn = layer_norm(x, ln1_g, ln1_b);
        Tensor<S> h = add(x, attention::scaled_attention(xn, xn, attn));
        return add(h, ff.forward(layer_norm(h, ln2_g, ln2_b)));
    }
    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".ln1_g", ln1_g);
        fn(prefix + ".ln1_b", ln1_b);
        fn(prefix + ".ln2_g", ln2_g);
        fn(prefix + ".ln2_b", ln2_b);
        attn.visit_params(prefix + ".attn", fn);
        ff.visit_params(prefix + ".ff", fn);
    }
};

// pre-LN cross-attention + feed-forward (for the resampler)
template <class S>
struct CrossAttentionLayer {
    Tensor<S> lnq_g, lnq_b, lnkv_g, lnkv_b, ln2_g, ln2_b;
    attention::AttentionParams<S> attn;
    FeedForward<S> ff;

    static CrossAttentionLayer init(int64_t d, int64_t d_kv, int heads, RandomStream& rs) {
        CrossAttentionLayer l;
        l.lnq_g = Tensor<S>::full({d}, S(1));
        l.lnq_b = Tensor<S>::zeros({d});
        l.lnkv_g = Tensor<S>::full({d_kv}, S(1));
        l.lnkv_b = Tensor<S>::zeros({d_kv});
        l.ln2_g = Tensor<S>::full({d}, S(1));
        l.ln2_b = Tensor<S>::zeros({d});
        l.attn = attention::AttentionParams<S>::init(d, d_kv, heads, rs);
        l.ff = FeedForward<S>::init(d, rs);
        return l;
    }
    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& kv) const {
        Tensor<S> xn = layer_norm(x, lnq_g, lnq_b);
        Tensor<S> kvn = layer_norm(kv, lnkv_g, lnkv_b);
        Tensor<S> h = add(x, attention::scaled_attention(xn, kvn, attn));
        return add(h, ff.forward(layer_norm(h, ln2_g, ln2_b)));
    }
    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".lnq_g", lnq_g);
        fn(prefix + ".lnq_b", lnq_b);
        fn(prefix + ".lnkv_g", lnkv_g);
        fn(prefix + ".lnkv_b", lnkv_b);
        fn(prefix + ".ln2_g", ln2_g);
        fn(prefix + ".ln2_b", ln2_b);
        attn.visit_params(prefix + ".attn", fn);
        ff.visit_params(prefix + ".ff", fn);
    }
};

// --------------------------------------------------------------------------
// text encoder
// --------------------------------------------------------------------------

template <class S>
struct TextEncoder {
    int64_t d_model = 0;
    Tensor<S> tok_emb;  // [V, D]
    std::vector<TransformerLayer<S>> layers;
    Tensor<S> lnf_g, lnf_b;
    Tensor<S> pos;  // fixed sinusoidal table [L, D]

    TextEncoder() = default;
    TextEncoder(int64_t vocab_size, int64_t max_len, int64_t d, int heads, int n_layers,
                RandomStream& rs)
        : d_model(d) {
        tok_emb = Tensor<S>::randn({vocab_size, d}, rs, 0.02);
        for (int i = 0; i < n_layers; ++i) layers.push_back(TransformerLayer<S>::init(d, heads, rs));
        lnf_g = Tensor<S>::full({d}, S(1));
        lnf_b = Tensor<S>::zeros({d});
        pos = sinusoidal_positions<S>(max_len, d);
    }

    // ids must have length <= the position table; returns [L, D]
    Tensor<S> encode(const std::vector<int>& ids) const {
        if (static_cast<int64_t>(ids.size()) > pos.dim(0))
            throw std::invalid_argument("TextEncoder: sequence longer than position table");
        Tensor<S> x = embedding(tok_emb, ids);
        Tensor<S> p = slice0(pos, 0, static_cast<int64_t>(ids.size()));
        x = add(x, p);
        for (const auto& l : layers) x = l.forward(x);
        return layer_norm(x, lnf_g, lnf_b);
    }

    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".tok_emb", tok_emb);
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].visit_params(prefix + ".layer" + std::to_string(i), fn);
        fn(prefix + ".lnf_g", lnf_g);
        fn(prefix + ".lnf_b", lnf_b);
    }
};

// --------------------------------------------------------------------------
// image patch encoder (penultimate-layer tokens)
// --------------------------------------------------------------------------

template <class S>
struct ImageTokenSet {
    Tensor<S> tokens;  // [P, D], from the penultimate layer
    Tensor<S> cls;     // [1, D], from the final layer
};

template <class S>
struct ImagePatchEncoder {
    int64_t img_c = 3, img_h = 0, img_w = 0, patch = 8, d_model = 0;
    Tensor<S> patch_w, patch_b;  // [patch*patch*C, D], [D]
    Tensor<S> cls_tok;           // [1, D]
    std::vector<TransformerLayer<S>> layers;
    Tensor<S> pos;  // [P+1, D]

    ImagePatchEncoder() = default;
    ImagePatchEncoder(int64_t c, int64_t h, int64_t w, int64_t patch_size, int64_t d, int heads,
                      RandomStream& rs)
        : img_c(c), img_h(h), img_w(w), patch(patch_size), d_model(d) {
        if (h % patch_size != 0 || w % patch_size != 0)
            throw std::invalid_argument("ImagePatchEncoder: resolution not divisible by patch");
        int64_t pdim = patch_size * patch_size * c;
        patch_w = Tensor<S>::randn({pdim, d}, rs, 1.0 / std::sqrt(static_cast<double>(pdim)));
        patch_b = Tensor<S>::zeros({d});
        cls_tok = Tensor<S>::randn({1, d}, rs, 0.02);
        for (int i = 0; i < 2; ++i) layers.push_back(TransformerLayer<S>::init(d, heads, rs));
        pos = sinusoidal_positions<S>(n_patches() + 1, d);
    }

    int64_t n_patches() const { return (img_h / patch) * (img_w / patch); }

    // img [C,H,W] at the configured resolution
    ImageTokenSet<S> encode(const Tensor<S>& img) const {
        if (img.ndim() != 3 || img.dim(0) != img_c || img.dim(1) != img_h || img.dim(2) != img_w)
            throw std::invalid_argument("ImagePatchEncoder: resolution mismatch, got " +
                                        shape_str(img.shape()));
        int64_t ph = img_h / patch, pw = img_w / patch, P = ph * pw;
        int64_t pdim = patch * patch * img_c;
        Tensor<S> patches(Shape{P, pdim});
        for (int64_t pi = 0; pi < ph; ++pi)
            for (int64_t pj = 0; pj < pw; ++pj) {
                S* row = patches.data() + (pi * pw + pj) * pdim;
                int64_t k = 0;
                for (int64_t c = 0; c < img_c; ++c)
                    for (int64_t y = 0; y < patch; ++y)
                        for (int64_t x = 0; x < patch; ++x)
                            row[k++] = img.data()[(c * img_h + pi * patch + y) * img_w + pj * patch + x];
            }
        Tensor<S> x = linear(patches, patch_w, patch_b);
        x = concat0<S>({cls_tok, x});
        x = add(x, pos);
        Tensor<S> penultimate = layers[0].forward(x);
        Tensor<S> final_out = layers[1].forward(penultimate);
        return ImageTokenSet<S>{slice0(penultimate, 1, P + 1), slice0(final_out, 0, 1)};
    }

    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".patch_w", patch_w);
        fn(prefix + ".patch_b", patch_b);
        fn(prefix + ".cls_tok", cls_tok);
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].visit_params(prefix + ".layer" + std::to_string(i), fn);
    }
};

// --------------------------------------------------------------------------
// perceiver resampler
// --------------------------------------------------------------------------

template <class S>
struct PerceiverResampler {
    int64_t n_queries = 0, d_model = 0, d_in = 0;
    Tensor<S> queries;  // [N_q, D]
    std::vector<CrossAttentionLayer<S>> layers;
    Tensor<S> out_w, out_b;

    PerceiverResampler() = default;
    PerceiverResampler(int64_t n_q, int64_t d, int64_t d_input, int heads, RandomStream& rs)
        : n_queries(n_q), d_model(d), d_in(d_input) {
        if (n_q < 1) throw std::invalid_argument("PerceiverResampler: n_queries must be >= 1");
        queries = Tensor<S>::randn({n_q, d}, rs, 0.02);
        for (int i = 0; i < 2; ++i)
            layers.push_back(CrossAttentionLayer<S>::init(d, d_input, heads, rs));
        out_w = Tensor<S>::randn({d, d}, rs, 1.0 / std::sqrt(static_cast<double>(d)));
        out_b = Tensor<S>::zeros({d});
    }

    // tokens [P, d_in] -> [N_q, D]
    Tensor<S> resample(const Tensor<S>& tokens) const {
        if (tokens.ndim() != 2 || tokens.dim(1) != d_in)
            throw std::invalid_argument("PerceiverResampler: token dim mismatch");
        Tensor<S> x = queries;
        for (const auto& l : layers) x = l.forward(x, tokens);
        return linear(x, out_w, out_b);
    }

    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".queries", queries);
        for (size_t i = 0; i < layers.size(); ++i)
            layers[i].visit_params(prefix + ".layer" + std::to_string(i), fn);
        fn(prefix + ".out_w", out_w);
        fn(prefix + ".out_b", out_b);
    }
};

// --------------------------------------------------------------------------
// placeholder fusion
// --------------------------------------------------------------------------

template <class S>
struct MultiModalEmbedding {
    Tensor<S> tokens;                           // [L', D]
    std::vector<std::pair<int, int>> span_map;  // per subject, post-fusion indices
};

// Each placeholder row is replaced in-sequence by its N_q resampled tokens;
// every other row is preserved verbatim. L' = L - n + n * N_q.
template <class S>
MultiModalEmbedding<S> fuse(const InstructionPrompt& prompt, const Tensor<S>& text_emb,
                            const std::vector<Tensor<S>>& garment_tokens) {
    if (garment_tokens.size() != prompt.placeholder_positions.size())
        throw std::invalid_argument("fuse: got " + std::to_string(garment_tokens.size()) +
                                    " garment token sets for " +
                                    std::to_string(prompt.placeholder_positions.size()) +
                                    " placeholders");
    if (text_emb.ndim() != 2) throw std::invalid_argument("fuse: text embedding must be [L,D]");
    MultiModalEmbedding<S> out;
    if (garment_tokens.empty()) {
        out.tokens = text_emb;
        out.span_map = prompt.span_map;
        return out;
    }
    int64_t D = text_emb.dim(1);
    std::vector<Tensor<S>> segments;
    int64_t cursor = 0;
    std::vector<int64_t> shift_at;  // cumulative index shift before each placeholder
    int64_t shift = 0;
    for (size_t i = 0; i < garment_tokens.size(); ++i) {
        int64_t p = prompt.placeholder_positions[i];
        const Tensor<S>& g = garment_tokens[i];
        if (g.ndim() != 2 || g.dim(1) != D)
            throw std::invalid_argument("fuse: garment token dim mismatch");
        if (p > cursor) segments.push_back(slice0(text_emb, cursor, p));
        segments.push_back(g);
        cursor = p + 1;
        shift_at.push_back(shift);
        shift += g.dim(0) - 1;
    }
    if (cursor < text_emb.dim(0)) segments.push_back(slice0(text_emb, cursor, text_emb.dim(0)));
    out.tokens = concat0(segments);

    // spans never contain placeholders, so both ends shift together
    for (const auto& [b, e] : prompt.span_map) {
        int64_t sh = 0;
        for (size_t i = 0; i < garment_tokens.size(); ++i)
            if (prompt.placeholder_positions[i] < b) sh += garment_tokens[i].dim(0) - 1;
        out.span_map.emplace_back(static_cast<int>(b + sh), static_cast<int>(e + sh));
    }
    return out;
}

}  // namespace mmtryon::instruction
