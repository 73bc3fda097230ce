#pragma once

#include <string>
#include <vector>

#include "mmpt/geometry.hpp"
#include "mmpt/nn.hpp"

namespace mmpt {

struct BackboneConfig {
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_ratio = 4;
    std::size_t decoder_depth = 2;
    double drop_path = 0.1;

    void require_valid() const {
        if (depth < 1) throw InvalidArgument("BackboneConfig: depth must be >= 1");
        if (dim % heads != 0) throw InvalidArgument("BackboneConfig: dim must be divisible by heads");
        if (drop_path < 0.0 || drop_path >= 1.0)
            throw InvalidArgument("BackboneConfig: drop_path must be in [0,1)");
    }

    // Desk-scale defaults are the struct defaults; this is the configuration
    // reported for the full-size model.
    static BackboneConfig paper() {
        BackboneConfig c;
        c.depth = 12;
        c.dim = 384;
        c.heads = 6;
        c.ffn_ratio = 4;
        c.decoder_depth = 4;
        c.drop_path = 0.1;
        return c;
    }
};

struct ModelConfig {
    BackboneConfig bb;
    std::size_t k_neighbors = 16;   // patch size; fixes the reconstruction head width
    std::size_t proj_dim = 32;      // shared projection width for z3d / s3d / z2d
    std::size_t conv_c1 = 8, conv_c2 = 16, conv_c3 = 32;
};

// Token rows plus their positional embeddings. When cls_present, row 0 is
// the class token.
struct TokenBatch {
    Var tokens;
    Var pos;
    bool cls_present = false;
};

// Layer handles for every sub-network, bound by name into one ModelState.
// TLR and PLR run through the same embed/pos/encoder parameters; binding the
// same state twice yields pointers to the identical Param objects.
struct Model {
    ModelConfig cfg;
    TwoLayerMlp patch_embed;            // shared mini-PointNet MLP (pointwise)
    TwoLayerMlp pos_embed;              // center/query coordinate -> dim
    Param* cls_token = nullptr;
    Param* cls_pos = nullptr;
    std::vector<TransformerBlock> enc_blocks;
    LayerNormLayer enc_ln;
    Param* mask_token = nullptr;
    std::vector<TransformerBlock> dec_blocks;
    LayerNormLayer dec_ln;
    Linear rec_head;                    // dim -> 3K
    TransformerBlock plr_ca;            // one-layer cross-attention decoder
    LayerNormLayer plr_ln;              // final norm before the logit head
    TwoLayerMlp plr_head;               // dim -> 1 logit
    TwoLayerMlp s3d_head;               // CLS encoding -> proj_dim
    TwoLayerMlp g3d;                    // pooled 2*dim -> proj_dim
    ConvEncoder2D f2d;
    TwoLayerMlp g2d;                    // conv channels -> proj_dim

    static Model register_params(ModelState& s, const ModelConfig& cfg, Rng& rng) {
        cfg.bb.require_valid();
        Model m;
        m.cfg = cfg;
        const std::size_t d = cfg.bb.dim;
        m.patch_embed = TwoLayerMlp::create(s, "embed", 3, d, d, rng, /*use_relu=*/true);
        m.pos_embed = TwoLayerMlp::create(s, "pos", 3, d, d, rng);
        m.cls_token = &s.create("cls.token", Tensor::randn({1, d}, rng, 0.02));
        m.cls_pos = &s.create("cls.pos", Tensor::randn({1, d}, rng, 0.02));
        for (std::size_t i = 0; i < cfg.bb.depth; ++i)
            m.enc_blocks.push_back(
                TransformerBlock::create(s, "enc.b" + std::to_string(i), d, cfg.bb.heads, cfg.bb.ffn_ratio, rng));
        m.enc_ln = LayerNormLayer::create(s, "enc.ln", d);
        m.mask_token = &s.create("dec.mask_token", Tensor::randn({1, d}, rng, 0.02));
        for (std::size_t i = 0; i < cfg.bb.decoder_depth; ++i)
            m.dec_blocks.push_back(
                TransformerBlock::create(s, "dec.b" + std::to_string(i), d, cfg.bb.heads, cfg.bb.ffn_ratio, rng));
        m.dec_ln = LayerNormLayer::create(s, "dec.ln", d);
        m.rec_head = Linear::create(s, "rec_head", d, 3 * cfg.k_neighbors, rng);
        m.plr_ca = TransformerBlock::create(s, "plr.ca", d, cfg.bb.heads, cfg.bb.ffn_ratio, rng);
        m.plr_ln = LayerNormLayer::create(s, "plr.ln", d);
        m.plr_head = TwoLayerMlp::create(s, "plr.head", d, d / 2, 1, rng);
        m.s3d_head = TwoLayerMlp::create(s, "s3d", d, d, cfg.proj_dim, rng);
        m.g3d = TwoLayerMlp::create(s, "g3d", 2 * d, 2 * d, cfg.proj_dim, rng);
        m.f2d = ConvEncoder2D::create(s, "img", cfg.conv_c1, cfg.conv_c2, cfg.conv_c3, rng);
        m.g2d = TwoLayerMlp::create(s, "g2d", cfg.conv_c3, cfg.conv_c3, cfg.proj_dim, rng);
        return m;
    }

    static Model bind(ModelState& s, const ModelConfig& cfg) {
        Model m;
        m.cfg = cfg;
        m.patch_embed.fc1 = Linear::bind(s, "embed.fc1");
        m.patch_embed.fc2 = Linear::bind(s, "embed.fc2");
        m.patch_embed.use_relu = true;
        m.pos_embed.fc1 = Linear::bind(s, "pos.fc1");
        m.pos_embed.fc2 = Linear::bind(s, "pos.fc2");
        m.cls_token = &s.get("cls.token");
        m.cls_pos = &s.get("cls.pos");
        for (std::size_t i = 0; i < cfg.bb.depth; ++i) m.enc_blocks.push_back(bind_block(s, "enc.b" + std::to_string(i), cfg.bb.heads));
        m.enc_ln = LayerNormLayer::bind(s, "enc.ln");
        m.mask_token = &s.get("dec.mask_token");
        for (std::size_t i = 0; i < cfg.bb.decoder_depth; ++i) m.dec_blocks.push_back(bind_block(s, "dec.b" + std::to_string(i), cfg.bb.heads));
        m.dec_ln = LayerNormLayer::bind(s, "dec.ln");
        m.rec_head = Linear::bind(s, "rec_head");
        m.plr_ca = bind_block(s, "plr.ca", cfg.bb.heads);
        m.plr_ln = LayerNormLayer::bind(s, "plr.ln");
        m.plr_head.fc1 = Linear::bind(s, "plr.head.fc1");
        m.plr_head.fc2 = Linear::bind(s, "plr.head.fc2");
        m.s3d_head.fc1 = Linear::bind(s, "s3d.fc1");
        m.s3d_head.fc2 = Linear::bind(s, "s3d.fc2");
        m.g3d.fc1 = Linear::bind(s, "g3d.fc1");
        m.g3d.fc2 = Linear::bind(s, "g3d.fc2");
        m.f2d.w1 = &s.get("img.conv1.w");
        m.f2d.b1 = &s.get("img.conv1.b");
        m.f2d.w2 = &s.get("img.conv2.w");
        m.f2d.b2 = &s.get("img.conv2.b");
        m.f2d.w3 = &s.get("img.conv3.w");
        m.f2d.b3 = &s.get("img.conv3.b");
        m.f2d.out_channels = cfg.conv_c3;
        m.g2d.fc1 = Linear::bind(s, "g2d.fc1");
        m.g2d.fc2 = Linear::bind(s, "g2d.fc2");
        return m;
    }

    // Parameter names making up the s3d path; this is the scope mirrored by
    // the momentum key encoder.
    static bool in_key_scope(const std::string& name) {
        return name.rfind("embed.", 0) == 0 || name.rfind("pos.", 0) == 0 ||
               name.rfind("cls.", 0) == 0 || name.rfind("enc.", 0) == 0 ||
               name.rfind("s3d.", 0) == 0;
    }

    // Binds only the s3d path (embed, pos, cls, encoder, s3d head) from a
    // state that holds just those parameters, e.g. the momentum key copy.
    // Unbound members stay null and must not be applied.
    static Model bind_key_scope(ModelState& s, const ModelConfig& cfg) {
        Model m;
        m.cfg = cfg;
        m.patch_embed.fc1 = Linear::bind(s, "embed.fc1");
        m.patch_embed.fc2 = Linear::bind(s, "embed.fc2");
        m.patch_embed.use_relu = true;
        m.pos_embed.fc1 = Linear::bind(s, "pos.fc1");
        m.pos_embed.fc2 = Linear::bind(s, "pos.fc2");
        m.cls_token = &s.get("cls.token");
        m.cls_pos = &s.get("cls.pos");
        for (std::size_t i = 0; i < cfg.bb.depth; ++i)
            m.enc_blocks.push_back(bind_block(s, "enc.b" + std::to_string(i), cfg.bb.heads));
        m.enc_ln = LayerNormLayer::bind(s, "enc.ln");
        m.s3d_head.fc1 = Linear::bind(s, "s3d.fc1");
        m.s3d_head.fc2 = Linear::bind(s, "s3d.fc2");
        return m;
    }

  private:
    static TransformerBlock bind_block(ModelState& s, const std::string& prefix, std::size_t heads) {
        TransformerBlock b;
        b.heads = heads;
        b.ln1 = LayerNormLayer::bind(s, prefix + ".ln1");
        b.wq = Linear::bind(s, prefix + ".wq");
        b.wk = Linear::bind(s, prefix + ".wk");
        b.wv = Linear::bind(s, prefix + ".wv");
        b.proj = Linear::bind(s, prefix + ".proj");
        b.ln2 = LayerNormLayer::bind(s, prefix + ".ln2");
        b.fc1 = Linear::bind(s, prefix + ".fc1");
        b.fc2 = Linear::bind(s, prefix + ".fc2");
        return b;
    }
};

// ---------------------------------------------------------------------------
// Backbone operations
// ---------------------------------------------------------------------------

inline Tensor patch_tensor(const std::vector<Vec3>& patch) {
    Tensor t({patch.size(), 3});
    for (std::size_t i = 0; i < patch.size(); ++i) {
        t.data[i * 3 + 0] = patch[i].x;
        t.data[i * 3 + 1] = patch[i].y;
        t.data[i * 3 + 2] = patch[i].z;
    }
    return t;
}

inline Tensor centers_tensor(const std::vector<Vec3>& centers) { return patch_tensor(centers); }

// Mini-PointNet: pointwise two-layer MLP then max-pool over the K points of
// each patch. Output row per patch.
inline Var embed_patches(Graph& g, const Model& m, const std::vector<Tensor>& patches) {
    if (patches.empty()) throw InvalidArgument("embed_patches: no patches");
    std::vector<Var> tokens;
    tokens.reserve(patches.size());
    for (const Tensor& p : patches) {
        Var pts = g.constant(p);
        tokens.push_back(g.max_rows(m.patch_embed.apply(g, pts)));
    }
    return tokens.size() == 1 ? tokens[0] : g.concat_rows(tokens);
}

// Center (or query) coordinates -> positional embeddings, one row each.
inline Var embed_positions(Graph& g, const Model& m, Var coords) {
    return m.pos_embed.apply(g, coords);
}

inline Var embed_positions(Graph& g, const Model& m, const Tensor& coords) {
    return embed_positions(g, m, g.constant(coords));
}

// Pre-norm encoder; the positional embedding is re-added to the token input
// of every block. depth 0 degenerates to the identity.
inline Var encode_tokens(Graph& g, const Model& m, Var tokens, Var pos,
                         const std::vector<double>& branch_scales) {
    if (branch_scales.size() != m.enc_blocks.size())
        throw InvalidArgument("encode_tokens: branch_scales size mismatch");
    Var x = tokens;
    for (std::size_t i = 0; i < m.enc_blocks.size(); ++i) {
        x = g.add(x, pos);
        x = m.enc_blocks[i].apply(g, x, branch_scales[i]);
    }
    if (!m.enc_blocks.empty()) x = m.enc_ln.apply(g, x);
    return x;
}

inline Var encode_tokens(Graph& g, const Model& m, Var tokens, Var pos) {
    return encode_tokens(g, m, tokens, pos, std::vector<double>(m.enc_blocks.size(), 1.0));
}

inline Var encode(Graph& g, const Model& m, const TokenBatch& batch,
                  const std::vector<double>& branch_scales) {
    return encode_tokens(g, m, batch.tokens, batch.pos, branch_scales);
}

// Asymmetric TLR decoder: the shared mask token is replicated mask_count
// times, appended after the encoded visible tokens, run through the decoder
// blocks with the full positional table (visible rows first, masked rows
// after), and the mask-token rows are returned.
inline Var decode_tlr(Graph& g, const Model& m, Var enc_visible, std::size_t mask_count,
                      Var pos_all, const std::vector<double>& branch_scales) {
    if (mask_count < 1) throw InvalidArgument("decode_tlr: mask_count must be >= 1");
    if (branch_scales.size() != m.dec_blocks.size())
        throw InvalidArgument("decode_tlr: branch_scales size mismatch");
    const std::size_t visible = g.value(enc_visible).rows();
    Var masks = g.repeat_rows(g.param(*m.mask_token), mask_count);
    Var x = g.concat_rows({enc_visible, masks});
    for (std::size_t i = 0; i < m.dec_blocks.size(); ++i) {
        x = g.add(x, pos_all);
        x = m.dec_blocks[i].apply(g, x, branch_scales[i]);
    }
    if (!m.dec_blocks.empty()) x = m.dec_ln.apply(g, x);
    return g.slice_rows(x, visible, mask_count);
}

inline Var decode_tlr(Graph& g, const Model& m, Var enc_visible, std::size_t mask_count, Var pos_all) {
    return decode_tlr(g, m, enc_visible, mask_count, pos_all,
                      std::vector<double>(m.dec_blocks.size(), 1.0));
}

// FC reconstruction head: one row per decoded mask token -> K predicted
// center-relative points. Output shape [mask_count, K, 3].
inline Var reconstruct_head(Graph& g, const Model& m, Var h_mask) {
    const std::size_t rows = g.value(h_mask).rows();
    Var flat = m.rec_head.apply(g, h_mask);
    return g.reshape(flat, {rows, m.cfg.k_neighbors, 3});
}

// CLS ⊕ max-pool global feature over an encoded (CLS-bearing) token matrix.
inline Var pooled_global_feature(Graph& g, Var enc_with_cls) {
    const std::size_t rows = g.value(enc_with_cls).rows();
    if (rows < 2) throw InvalidArgument("pooled_global_feature: need CLS plus at least one token");
    Var cls = g.slice_rows(enc_with_cls, 0, 1);
    Var pooled = g.max_rows(g.slice_rows(enc_with_cls, 1, rows - 1));
    return g.concat_cols({cls, pooled});
}

}  // namespace mmpt
