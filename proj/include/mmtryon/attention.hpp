#pragma once

// Multi-reference texture attention and instruction cross-attention as
// standalone differentiable operations. Queries come from the target
// feature map; for the multi-reference variant the key/value set is the
// concatenation [target; ref_1; ...; ref_n] along the token axis. The
// output is projected by W_O; residual connections are the caller's job.

#include <cmath>
#include <vector>

#include "mmtryon/rng.hpp"
#include "mmtryon/tensor.hpp"

namespace mmtryon::attention {

template <class S>
struct AttentionParams {
    Tensor<S> w_q;  // [d, d]
    Tensor<S> w_k;  // [dc, d]
    Tensor<S> w_v;  // [dc, d]
    Tensor<S> w_o;  // [d, d]
    int heads = 1;

    int64_t d_model() const { return w_q.dim(0); }
    int64_t d_context() const { return w_k.dim(0); }

    static AttentionParams init(int64_t d, int64_t d_context, int heads, RandomStream& rs) {
        AttentionParams p;
        double s = 1.0 / std::sqrt(static_cast<double>(d));
        double sc = 1.0 / std::sqrt(static_cast<double>(d_context));
        p.w_q = Tensor<S>::randn({d, d}, rs, s);
        p.w_k = Tensor<S>::randn({d_context, d}, rs, sc);
        p.w_v = Tensor<S>::randn({d_context, d}, rs, sc);
        p.w_o = Tensor<S>::randn({d, d}, rs, s);
        p.heads = heads;
        return p;
    }

    void validate() const {
        if (w_q.ndim() != 2 || w_q.dim(0) != w_q.dim(1))
            throw std::invalid_argument("AttentionParams: W_Q must be square [d,d]");
        int64_t d = w_q.dim(0);
        if (w_o.dim(0) != d || w_o.dim(1) != d)
            throw std::invalid_argument("AttentionParams: W_O must be [d,d]");
        if (w_k.dim(1) != d || w_v.dim(1) != d || w_k.dim(0) != w_v.dim(0))
            throw std::invalid_argument("AttentionParams: W_K/W_V must be [d_context,d]");
        if (heads < 1 || d % heads != 0)
            throw std::invalid_argument("AttentionParams: heads must divide d");
        if (!w_q.all_finite() || !w_k.all_finite() || !w_v.all_finite() || !w_o.all_finite())
            throw std::invalid_argument("AttentionParams: non-finite weights");
    }

    template <class Fn>
    void visit_params(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".w_q", w_q);
        fn(prefix + ".w_k", w_k);
        fn(prefix + ".w_v", w_v);
        fn(prefix + ".w_o", w_o);
    }
};

// Flattened spatial feature at one resolution level: tokens [H*W, d].
template <class S>
struct FeatureMap {
    Tensor<S> tokens;
    int level = 0;
};

// q_in [T, d], kv_in [U, d_context] -> [T, d]; multi-head scaled dot-product
// with 1/sqrt(d_head) scaling.
template <class S>
Tensor<S> scaled_attention(const Tensor<S>& q_in, const Tensor<S>& kv_in,
                           const AttentionParams<S>& p) {
    p.validate();
    if (q_in.ndim() != 2 || q_in.dim(1) != p.d_model())
        throw std::invalid_argument("scaled_attention: query dim mismatch, got " +
                                    shape_str(q_in.shape()));
    if (kv_in.ndim() != 2 || kv_in.dim(1) != p.d_context())
        throw std::invalid_argument("scaled_attention: context dim mismatch, got " +
                                    shape_str(kv_in.shape()));
    if (q_in.dim(0) < 1) throw std::invalid_argument("scaled_attention: empty query");

    int64_t d = p.d_model();
    int64_t dh = d / p.heads;
    S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    Tensor<S> q = matmul(q_in, p.w_q);
    Tensor<S> k = matmul(kv_in, p.w_k);
    Tensor<S> v = matmul(kv_in, p.w_v);

    std::vector<Tensor<S>> head_outs;
    head_outs.reserve(static_cast<size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        Tensor<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor<S> scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt_dh);
        Tensor<S> attn = softmax_rows(scores);
        head_outs.push_back(matmul(attn, vh));
    }
    Tensor<S> merged = (p.heads == 1) ? head_outs[0] : concat_cols(head_outs);
    return matmul(merged, p.w_o);
}

// K/V from concat([target; refs...]); reduces to self-attention when refs
// is empty and is invariant to the ordering of refs.
template <class S>
FeatureMap<S> multi_reference_attention(const FeatureMap<S>& target,
                                        const std::vector<FeatureMap<S>>& refs,
                                        const AttentionParams<S>& p) {
    if (!target.tokens.defined() || target.tokens.numel() == 0)
        throw std::invalid_argument("multi_reference_attention: empty target");
    int64_t d = target.tokens.dim(1);
    if (d != p.d_model() || p.d_context() != d)
        throw std::invalid_argument("multi_reference_attention: params expect d_context == d == " +
                                    std::to_string(d));
    std::vector<Tensor<S>> kv_parts{target.tokens};
    for (const auto& r : refs) {
        if (r.tokens.ndim() != 2 || r.tokens.dim(1) != d)
            throw std::invalid_argument("multi_reference_attention: ref channel dim mismatch (" +
                                        shape_str(r.tokens.shape()) + " vs d=" + std::to_string(d) + ")");
        if (r.level != target.level)
            throw std::invalid_argument("multi_reference_attention: ref level mismatch");
        kv_parts.push_back(r.tokens);
    }
    Tensor<S> kv = (kv_parts.size() == 1) ? kv_parts[0] : concat0(kv_parts);
    return FeatureMap<S>{scaled_attention(target.tokens, kv, p), target.level};
}

// Q from the target feature map, K/V from the fused instruction tokens.
template <class S>
FeatureMap<S> cross_attention(const FeatureMap<S>& target, const Tensor<S>& context,
                              const AttentionParams<S>& p) {
    if (!target.tokens.defined() || target.tokens.numel() == 0)
        throw std::invalid_argument("cross_attention: empty target");
    if (target.tokens.dim(1) != p.d_model())
        throw std::invalid_argument("cross_attention: target dim mismatch");
    if (context.ndim() != 2 || context.dim(1) != p.d_context())
        throw std::invalid_argument("cross_attention: context dim mismatch (" +
                                    shape_str(context.shape()) + ")");
    return FeatureMap<S>{scaled_attention(target.tokens, context, p), target.level};
}

}  // namespace mmtryon::attention
