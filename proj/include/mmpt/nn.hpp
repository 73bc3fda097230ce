#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmpt/graph.hpp"

namespace mmpt {

// Owning registry of named parameters. Registration order is the canonical
// iteration order everywhere (optimizer, checkpoints, EMA), which keeps every
// run bit-reproducible.
class ModelState {
  public:
    ModelState() = default;
    ModelState(ModelState&&) = default;
    ModelState& operator=(ModelState&&) = default;

    Param& create(const std::string& name, Tensor init) {
        if (index_.count(name)) throw InvalidState("parameter already registered: " + name);
        owned_.push_back(std::make_unique<Param>(name, std::move(init)));
        index_[name] = owned_.size() - 1;
        return *owned_.back();
    }

    Param& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
        return *owned_[it->second];
    }

    const Param& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
        return *owned_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Param*> params() {
        std::vector<Param*> out;
        out.reserve(owned_.size());
        for (auto& p : owned_) out.push_back(p.get());
        return out;
    }

    std::vector<const Param*> params() const {
        std::vector<const Param*> out;
        out.reserve(owned_.size());
        for (auto& p : owned_) out.push_back(p.get());
        return out;
    }

    void zero_grads() {
        for (auto& p : owned_) p->zero_grad();
    }

    std::size_t size() const { return owned_.size(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (auto& p : owned_) n += p->value.numel();
        return n;
    }

    ModelState clone() const {
        ModelState out;
        for (auto& p : owned_) out.create(p->name, p->value);
        return out;
    }

  private:
    std::vector<std::unique_ptr<Param>> owned_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Parameter-backed layers. Layers hold Param pointers into a ModelState and
// apply themselves onto a Graph.
// ---------------------------------------------------------------------------

struct Linear {
    Param* w = nullptr;
    Param* b = nullptr;

    // fan-in uniform init, zero bias
    static Linear create(ModelState& s, const std::string& prefix, std::size_t in, std::size_t out,
                         Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Linear l;
        l.w = &s.create(prefix + ".w", Tensor::rand_uniform({in, out}, rng, -bound, bound));
        l.b = &s.create(prefix + ".b", Tensor::zeros({1, out}));
        return l;
    }

    static Linear bind(ModelState& s, const std::string& prefix) {
        return Linear{&s.get(prefix + ".w"), &s.get(prefix + ".b")};
    }

    Var apply(Graph& g, Var x) const {
        return g.add(g.matmul(x, g.param(*w)), g.param(*b));
    }
};

struct LayerNormLayer {
    Param* gain = nullptr;
    Param* bias = nullptr;

    static LayerNormLayer create(ModelState& s, const std::string& prefix, std::size_t dim) {
        LayerNormLayer l;
        l.gain = &s.create(prefix + ".g", Tensor::full({dim}, 1.0));
        l.bias = &s.create(prefix + ".b", Tensor::zeros({dim}));
        return l;
    }

    static LayerNormLayer bind(ModelState& s, const std::string& prefix) {
        return LayerNormLayer{&s.get(prefix + ".g"), &s.get(prefix + ".b")};
    }

    Var apply(Graph& g, Var x) const { return g.layer_norm(x, g.param(*gain), g.param(*bias)); }
};

// Multi-head attention over explicit query/context token matrices.
// Self-attention passes the same tokens for both.
inline Var multi_head_attention(Graph& g, Var q_tokens, Var kv_tokens, const Linear& wq,
                                const Linear& wk, const Linear& wv, const Linear& proj,
                                std::size_t heads) {
    const std::size_t dim = g.value(q_tokens).cols();
    if (dim % heads != 0) throw InvalidArgument("attention: dim not divisible by heads");
    const std::size_t dh = dim / heads;
    Var q = wq.apply(g, q_tokens);
    Var k = wk.apply(g, kv_tokens);
    Var v = wv.apply(g, kv_tokens);
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = g.slice_cols(q, h * dh, dh);
        Var kh = g.slice_cols(k, h * dh, dh);
        Var vh = g.slice_cols(v, h * dh, dh);
        Var scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
        head_outs.push_back(g.matmul(g.softmax(scores), vh));
    }
    return proj.apply(g, g.concat_cols(head_outs));
}

// Pre-norm transformer block: x + s*MSA(LN(x)); then x + s*FFN(LN(x)).
// branch_scale carries the stochastic-depth multiplier (1 when disabled,
// a Bernoulli draw during training, 1-p at eval).
struct TransformerBlock {
    LayerNormLayer ln1, ln2;
    Linear wq, wk, wv, proj, fc1, fc2;
    std::size_t heads = 1;

    static TransformerBlock create(ModelState& s, const std::string& prefix, std::size_t dim,
                                   std::size_t heads, std::size_t ffn_ratio, Rng& rng) {
        TransformerBlock b;
        b.heads = heads;
        b.ln1 = LayerNormLayer::create(s, prefix + ".ln1", dim);
        b.wq = Linear::create(s, prefix + ".wq", dim, dim, rng);
        b.wk = Linear::create(s, prefix + ".wk", dim, dim, rng);
        b.wv = Linear::create(s, prefix + ".wv", dim, dim, rng);
        b.proj = Linear::create(s, prefix + ".proj", dim, dim, rng);
        b.ln2 = LayerNormLayer::create(s, prefix + ".ln2", dim);
        b.fc1 = Linear::create(s, prefix + ".fc1", dim, dim * ffn_ratio, rng);
        b.fc2 = Linear::create(s, prefix + ".fc2", dim * ffn_ratio, dim, rng);
        return b;
    }

    Var apply(Graph& g, Var x, double branch_scale = 1.0) const {
        Var h = ln1.apply(g, x);
        Var attn = multi_head_attention(g, h, h, wq, wk, wv, proj, heads);
        if (branch_scale != 1.0) attn = g.scale(attn, branch_scale);
        x = g.add(x, attn);
        Var f = fc2.apply(g, g.gelu(fc1.apply(g, ln2.apply(g, x))));
        if (branch_scale != 1.0) f = g.scale(f, branch_scale);
        return g.add(x, f);
    }

    // Cross-attention variant: queries attend to a fixed context. Queries
    // never attend to each other, so each query's output is a pure function
    // of (query, context).
    Var apply_cross(Graph& g, Var queries, Var context, double branch_scale = 1.0) const {
        Var h = ln1.apply(g, queries);
        Var attn = multi_head_attention(g, h, context, wq, wk, wv, proj, heads);
        if (branch_scale != 1.0) attn = g.scale(attn, branch_scale);
        Var x = g.add(queries, attn);
        Var f = fc2.apply(g, g.gelu(fc1.apply(g, ln2.apply(g, x))));
        if (branch_scale != 1.0) f = g.scale(f, branch_scale);
        return g.add(x, f);
    }
};

// Two-layer pointwise MLP; the shape shared by the patch embedder, the
// positional embedder and all projection heads.
struct TwoLayerMlp {
    Linear fc1, fc2;
    bool use_relu = false;  // relu for PointNet-style nets, gelu elsewhere

    static TwoLayerMlp create(ModelState& s, const std::string& prefix, std::size_t in,
                              std::size_t hidden, std::size_t out, Rng& rng, bool use_relu = false) {
        TwoLayerMlp m;
        m.use_relu = use_relu;
        m.fc1 = Linear::create(s, prefix + ".fc1", in, hidden, rng);
        m.fc2 = Linear::create(s, prefix + ".fc2", hidden, out, rng);
        return m;
    }

    Var apply(Graph& g, Var x) const {
        Var h = fc1.apply(g, x);
        h = use_relu ? g.relu(h) : g.gelu(h);
        return fc2.apply(g, h);
    }
};

// Three stride-2 conv blocks with relu, then global average pooling.
struct ConvEncoder2D {
    Param* w1 = nullptr;
    Param* b1 = nullptr;
    Param* w2 = nullptr;
    Param* b2 = nullptr;
    Param* w3 = nullptr;
    Param* b3 = nullptr;
    std::size_t out_channels = 0;

    static ConvEncoder2D create(ModelState& s, const std::string& prefix, std::size_t c1,
                                std::size_t c2, std::size_t c3, Rng& rng) {
        auto bound = [](std::size_t cin) { return 1.0 / std::sqrt(static_cast<double>(cin * 9)); };
        ConvEncoder2D e;
        e.out_channels = c3;
        e.w1 = &s.create(prefix + ".conv1.w", Tensor::rand_uniform({c1, 1, 3, 3}, rng, -bound(1), bound(1)));
        e.b1 = &s.create(prefix + ".conv1.b", Tensor::zeros({c1}));
        e.w2 = &s.create(prefix + ".conv2.w", Tensor::rand_uniform({c2, c1, 3, 3}, rng, -bound(c1), bound(c1)));
        e.b2 = &s.create(prefix + ".conv2.b", Tensor::zeros({c2}));
        e.w3 = &s.create(prefix + ".conv3.w", Tensor::rand_uniform({c3, c2, 3, 3}, rng, -bound(c2), bound(c2)));
        e.b3 = &s.create(prefix + ".conv3.b", Tensor::zeros({c3}));
        return e;
    }

    // image [1,H,W] -> pooled [1,c3]
    Var apply(Graph& g, Var image) const {
        Var x = g.relu(g.conv2d(image, g.param(*w1), g.param(*b1), 2, 1));
        x = g.relu(g.conv2d(x, g.param(*w2), g.param(*b2), 2, 1));
        x = g.relu(g.conv2d(x, g.param(*w3), g.param(*b3), 2, 1));
        return g.global_avg_pool(x);
    }
};

}  // namespace mmpt
