#pragma once

// Dual-branch segmentation model. Both branches run the SAME encoder weights:
// non-overlapping patch embedding, then per stage a stack of transformer
// blocks whose attention sublayer couples the branches (cia); positional
// encodings are recomputed per stage grid and added to the tokens before
// every block. Per-stage branch outputs are fused (sum or gated mix) and a
// small all-linear decoder projects, upsamples, concatenates, and classifies.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rgbdseg/attention.hpp"
#include "rgbdseg/config.hpp"
#include "rgbdseg/fusion.hpp"
#include "rgbdseg/posenc.hpp"
#include "rgbdseg/rng.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

struct ModelConfig {
  int image_side = 64;
  int patch_size = 4;
  std::vector<int> stage_channels{32, 64};
  std::vector<int> stage_blocks{2, 2};
  std::vector<int> stage_heads{1, 2};
  int num_classes = 4;
  PeMode pe_mode = PeMode::three_d;
  SwapMode swap_mode = SwapMode::cross_k;
  FusionKind fusion = FusionKind::attention_mix;
  BranchMode branches = BranchMode::dual;
  double pe_scale = 512.0;
  int decoder_dim = 64;
  int mlp_ratio = 4;

  static ModelConfig from_run_config(const RunConfig& rc) {
    ModelConfig mc;
    mc.image_side = rc.image_side;
    mc.patch_size = rc.patch_size;
    mc.stage_channels = rc.stage_channels;
    mc.stage_blocks = rc.stage_blocks;
    mc.stage_heads = rc.stage_heads;
    mc.num_classes = rc.num_classes;
    mc.pe_mode = rc.pe_mode;
    mc.swap_mode = rc.swap_mode;
    mc.fusion = rc.fusion;
    mc.branches = rc.branches;
    mc.pe_scale = rc.pe_scale;
    mc.decoder_dim = rc.decoder_dim;
    mc.mlp_ratio = rc.mlp_ratio;
    mc.validate();
    return mc;
  }

  int num_stages() const { return static_cast<int>(stage_channels.size()); }

  int stage_side(int stage) const {
    int side = image_side / patch_size;
    for (int s = 0; s < stage; ++s) side /= 2;
    return side;
  }

  void validate() const {
    const int s = num_stages();
    if (s < 1) throw std::invalid_argument("model: need at least one stage");
    if (static_cast<int>(stage_blocks.size()) != s || static_cast<int>(stage_heads.size()) != s)
      throw std::invalid_argument("model: stage channel/block/head lists must share length");
    if (image_side < 4 || (image_side & (image_side - 1)) != 0)
      throw std::invalid_argument("model: image_side must be a power of two");
    if (patch_size < 1) throw std::invalid_argument("model: patch_size must be positive");
    int divisor = patch_size;
    for (int i = 1; i < s; ++i) divisor *= 2;
    if (image_side % divisor != 0 || image_side / divisor < 1)
      throw std::invalid_argument(
          "model: image_side must be divisible by patch_size * 2^(stages-1)");
    for (int i = 0; i < s; ++i) {
      const int c = stage_channels[static_cast<std::size_t>(i)];
      const int h = stage_heads[static_cast<std::size_t>(i)];
      const int b = stage_blocks[static_cast<std::size_t>(i)];
      if (c < 2 || c % 2 != 0)
        throw std::invalid_argument("model: stage channels must be even and >= 2");
      if (h < 1 || c % h != 0)
        throw std::invalid_argument("model: stage channels must divide evenly into heads");
      if (b < 1) throw std::invalid_argument("model: every stage needs at least one block");
    }
    if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
    if (decoder_dim < 1 || mlp_ratio < 1)
      throw std::invalid_argument("model: decoder_dim and mlp_ratio must be positive");
    if (!(pe_scale > 1.0)) throw std::invalid_argument("model: pe_scale must exceed 1");
  }
};

struct BlockParams {
  Tensor norm1_gain, norm1_bias;
  AttentionParams attn;
  Tensor norm2_gain, norm2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct StageParams {
  Tensor embed_weight, embed_bias;
  Tensor embed_norm_gain, embed_norm_bias;
  std::vector<BlockParams> blocks;
  Tensor out_norm_gain, out_norm_bias;
  AmParams mix;  // defined only under attention_mix fusion
};

struct SegModel {
  ModelConfig cfg;
  std::vector<StageParams> stages;
  std::vector<Tensor> dec_proj_weight, dec_proj_bias;
  Tensor dec_fuse_weight, dec_fuse_bias;
  Tensor dec_cls_weight, dec_cls_bias;

  static SegModel init(ModelConfig cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x5EED0ull));
    auto linear_w = [&rng](int in, int out) {
      return Tensor::randn({in, out}, rng, std::sqrt(1.0 / in), true);
    };
    auto zeros = [](Shape shape) { return Tensor::zeros(std::move(shape), true); };
    auto ones = [](int n) {
      return Tensor::from_data({n}, std::vector<double>(static_cast<std::size_t>(n), 1.0), true);
    };

    SegModel m;
    m.cfg = cfg;
    const int s_count = cfg.num_stages();
    for (int s = 0; s < s_count; ++s) {
      const int c = cfg.stage_channels[static_cast<std::size_t>(s)];
      const int in_dim = s == 0 ? 3 * cfg.patch_size * cfg.patch_size
                                : 4 * cfg.stage_channels[static_cast<std::size_t>(s - 1)];
      StageParams sp;
      sp.embed_weight = linear_w(in_dim, c);
      sp.embed_bias = zeros({c});
      sp.embed_norm_gain = ones(c);
      sp.embed_norm_bias = zeros({c});
      const int blocks = cfg.stage_blocks[static_cast<std::size_t>(s)];
      for (int b = 0; b < blocks; ++b) {
        BlockParams bp;
        bp.norm1_gain = ones(c);
        bp.norm1_bias = zeros({c});
        bp.attn = AttentionParams::init(c, cfg.stage_heads[static_cast<std::size_t>(s)], rng);
        bp.norm2_gain = ones(c);
        bp.norm2_bias = zeros({c});
        const int hidden = cfg.mlp_ratio * c;
        bp.mlp_w1 = linear_w(c, hidden);
        bp.mlp_b1 = zeros({hidden});
        bp.mlp_w2 = linear_w(hidden, c);
        bp.mlp_b2 = zeros({c});
        sp.blocks.push_back(std::move(bp));
      }
      sp.out_norm_gain = ones(c);
      sp.out_norm_bias = zeros({c});
      if (cfg.fusion == FusionKind::attention_mix) sp.mix = AmParams::init(c, rng);
      m.stages.push_back(std::move(sp));
    }
    for (int s = 0; s < s_count; ++s) {
      m.dec_proj_weight.push_back(
          linear_w(cfg.stage_channels[static_cast<std::size_t>(s)], cfg.decoder_dim));
      m.dec_proj_bias.push_back(zeros({cfg.decoder_dim}));
    }
    m.dec_fuse_weight = linear_w(s_count * cfg.decoder_dim, cfg.decoder_dim);
    m.dec_fuse_bias = zeros({cfg.decoder_dim});
    // Zero-init classifier: initial logits are exactly uniform.
    m.dec_cls_weight = zeros({cfg.decoder_dim, cfg.num_classes});
    m.dec_cls_bias = zeros({cfg.num_classes});
    return m;
  }
};

inline std::vector<std::pair<std::string, Tensor>> named_params(const SegModel& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    const auto& sp = m.stages[s];
    const std::string prefix = "stage" + std::to_string(s) + ".";
    out.emplace_back(prefix + "embed.weight", sp.embed_weight);
    out.emplace_back(prefix + "embed.bias", sp.embed_bias);
    out.emplace_back(prefix + "embed_norm.gain", sp.embed_norm_gain);
    out.emplace_back(prefix + "embed_norm.bias", sp.embed_norm_bias);
    for (std::size_t b = 0; b < sp.blocks.size(); ++b) {
      const auto& bp = sp.blocks[b];
      const std::string bpfx = prefix + "block" + std::to_string(b) + ".";
      out.emplace_back(bpfx + "norm1.gain", bp.norm1_gain);
      out.emplace_back(bpfx + "norm1.bias", bp.norm1_bias);
      out.emplace_back(bpfx + "attn.w_q", bp.attn.w_q);
      out.emplace_back(bpfx + "attn.w_k", bp.attn.w_k);
      out.emplace_back(bpfx + "attn.w_v", bp.attn.w_v);
      out.emplace_back(bpfx + "attn.w_o", bp.attn.w_o);
      out.emplace_back(bpfx + "norm2.gain", bp.norm2_gain);
      out.emplace_back(bpfx + "norm2.bias", bp.norm2_bias);
      out.emplace_back(bpfx + "mlp.w1", bp.mlp_w1);
      out.emplace_back(bpfx + "mlp.b1", bp.mlp_b1);
      out.emplace_back(bpfx + "mlp.w2", bp.mlp_w2);
      out.emplace_back(bpfx + "mlp.b2", bp.mlp_b2);
    }
    out.emplace_back(prefix + "out_norm.gain", sp.out_norm_gain);
    out.emplace_back(prefix + "out_norm.bias", sp.out_norm_bias);
    if (m.cfg.fusion == FusionKind::attention_mix) {
      out.emplace_back(prefix + "mix.weight", sp.mix.weight);
      out.emplace_back(prefix + "mix.bias", sp.mix.bias);
    }
  }
  for (std::size_t s = 0; s < m.dec_proj_weight.size(); ++s) {
    out.emplace_back("decoder.proj" + std::to_string(s) + ".weight", m.dec_proj_weight[s]);
    out.emplace_back("decoder.proj" + std::to_string(s) + ".bias", m.dec_proj_bias[s]);
  }
  out.emplace_back("decoder.fuse.weight", m.dec_fuse_weight);
  out.emplace_back("decoder.fuse.bias", m.dec_fuse_bias);
  out.emplace_back("decoder.classify.weight", m.dec_cls_weight);
  out.emplace_back("decoder.classify.bias", m.dec_cls_bias);
  return out;
}

inline std::vector<Tensor> param_list(const SegModel& m) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params(m)) out.push_back(t);
  return out;
}

inline std::int64_t count_params(const SegModel& m) {
  std::int64_t n = 0;
  for (const auto& [name, t] : named_params(m)) n += t.size();
  return n;
}

inline Tensor build_depth_input(const std::vector<double>& disparity_norm, int h, int w) {
  if (disparity_norm.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("build_depth_input: map size does not match extent");
  std::vector<double> data(disparity_norm.size() * 3);
  for (std::size_t i = 0; i < disparity_norm.size(); ++i) {
    const double d = disparity_norm[i];
    if (!(d >= 0.0 && d <= 1.0))
      throw std::invalid_argument("build_depth_input: disparity must be normalized to [0, 1]");
    data[3 * i] = data[3 * i + 1] = data[3 * i + 2] = d;
  }
  return Tensor::from_data({h, w, 3}, std::move(data));
}

struct ForwardTrace {
  std::vector<Tensor> color_stage;  // [g,g,C] per stage; empty vector when branch inactive
  std::vector<Tensor> depth_stage;
  std::vector<Tensor> fused_stage;  // [g,g,C] per stage, decoder input
  Tensor logits;                    // [H,W,num_classes]
};

// General entry taking both branch inputs explicitly; pe_override replaces the
// per-stage PE matrices when given (paired-run equivalence experiments).
inline ForwardTrace forward_branch_inputs(const SegModel& m, const Tensor& color_in,
                                          const Tensor& depth_in,
                                          const std::vector<double>& disparity_norm,
                                          const std::vector<Tensor>* pe_override = nullptr) {
  const ModelConfig& cfg = m.cfg;
  const int side = cfg.image_side;
  const bool use_color = cfg.branches != BranchMode::depth_only;
  const bool use_depth = cfg.branches != BranchMode::rgb_only;
  const Shape want{side, side, 3};
  if (use_color && (!color_in.defined() || color_in.shape() != want))
    throw std::invalid_argument("forward: color input must be [side, side, 3]");
  if (use_depth && (!depth_in.defined() || depth_in.shape() != want))
    throw std::invalid_argument("forward: depth input must be [side, side, 3]");
  if (cfg.pe_mode == PeMode::three_d &&
      disparity_norm.size() != static_cast<std::size_t>(side) * side)
    throw std::invalid_argument("forward: disparity map size does not match resolution");
  if (pe_override && static_cast<int>(pe_override->size()) != cfg.num_stages())
    throw std::invalid_argument("forward: pe_override needs one matrix per stage");

  auto linear = [](const Tensor& t, const Tensor& w, const Tensor& b) {
    return add(matmul(t, w), b);
  };

  std::vector<Tensor> tokens;  // active branches, color first
  if (use_color) tokens.push_back(color_in);
  if (use_depth) tokens.push_back(depth_in);

  ForwardTrace trace;
  std::vector<Tensor> decoder_in;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const auto& sp = m.stages[static_cast<std::size_t>(s)];
    const int g = cfg.stage_side(s);
    const int c = cfg.stage_channels[static_cast<std::size_t>(s)];
    const int n = g * g;

    // Embed: stage 0 consumes image patches, later stages 2x2 token patches.
    const int p = s == 0 ? cfg.patch_size : 2;
    for (auto& t : tokens)
      t = layer_norm(linear(extract_patches(t, p), sp.embed_weight, sp.embed_bias),
                     sp.embed_norm_gain, sp.embed_norm_bias);

    Tensor pe;
    if (pe_override) {
      pe = (*pe_override)[static_cast<std::size_t>(s)];
      if (pe.shape() != Shape{n, c})
        throw std::invalid_argument("forward: pe_override matrix has the wrong shape");
    } else {
      TokenCoords coords = grid_coords(g, g);
      if (cfg.pe_mode == PeMode::three_d)
        coords.d = avg_pool_map(disparity_norm, side, side, side / g);
      pe = pe_matrix(coords, PeSpec{c, cfg.pe_scale}, cfg.pe_mode);
    }

    for (const auto& bp : sp.blocks) {
      for (auto& t : tokens) t = add(t, pe);
      if (tokens.size() == 2) {
        const Tensor qc = layer_norm(tokens[0], bp.norm1_gain, bp.norm1_bias);
        const Tensor qd = layer_norm(tokens[1], bp.norm1_gain, bp.norm1_bias);
        const auto [ac, ad] = cia(qc, qd, bp.attn, cfg.swap_mode);
        tokens[0] = add(tokens[0], ac);
        tokens[1] = add(tokens[1], ad);
      } else {
        const Tensor q = layer_norm(tokens[0], bp.norm1_gain, bp.norm1_bias);
        tokens[0] = add(tokens[0], multi_head(q, q, q, bp.attn));
      }
      for (auto& t : tokens) {
        const Tensor h = layer_norm(t, bp.norm2_gain, bp.norm2_bias);
        t = add(t, linear(gelu(linear(h, bp.mlp_w1, bp.mlp_b1)), bp.mlp_w2, bp.mlp_b2));
      }
    }

    std::vector<Tensor> grids;
    for (auto& t : tokens) {
      t = layer_norm(t, sp.out_norm_gain, sp.out_norm_bias);
      grids.push_back(reshape(t, {g, g, c}));
    }
    if (use_color) trace.color_stage.push_back(grids[0]);
    if (use_depth) trace.depth_stage.push_back(grids[use_color ? 1 : 0]);

    Tensor fused;
    if (grids.size() == 2)
      fused = cfg.fusion == FusionKind::attention_mix ? attention_mix(grids[0], grids[1], sp.mix)
                                                      : add(grids[0], grids[1]);
    else
      fused = grids[0];
    trace.fused_stage.push_back(fused);
    decoder_in.push_back(fused);

    // Branches continue from their own (pre-fusion) outputs.
    for (auto& t : tokens) t = reshape(t, {g, g, c});
  }

  const int g0 = cfg.stage_side(0);
  std::vector<Tensor> upsampled;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const int g = cfg.stage_side(s);
    const int c = cfg.stage_channels[static_cast<std::size_t>(s)];
    Tensor proj = linear(reshape(decoder_in[static_cast<std::size_t>(s)], {g * g, c}),
                         m.dec_proj_weight[static_cast<std::size_t>(s)],
                         m.dec_proj_bias[static_cast<std::size_t>(s)]);
    proj = reshape(proj, {g, g, cfg.decoder_dim});
    if (g != g0) proj = upsample_bilinear(proj, g0 / g);
    upsampled.push_back(proj);
  }
  Tensor dec = concat(upsampled, 2);
  dec = linear(reshape(dec, {g0 * g0, cfg.num_stages() * cfg.decoder_dim}), m.dec_fuse_weight,
               m.dec_fuse_bias);
  Tensor logits = linear(dec, m.dec_cls_weight, m.dec_cls_bias);
  logits = reshape(logits, {g0, g0, cfg.num_classes});
  trace.logits = upsample_bilinear(logits, cfg.patch_size);
  return trace;
}

inline ForwardTrace forward_trace(const SegModel& m, const Tensor& rgb,
                                  const std::vector<double>& disparity_norm,
                                  const std::vector<Tensor>* pe_override = nullptr) {
  Tensor depth_in;
  if (m.cfg.branches != BranchMode::rgb_only)
    depth_in = build_depth_input(disparity_norm, m.cfg.image_side, m.cfg.image_side);
  return forward_branch_inputs(m, rgb, depth_in, disparity_norm, pe_override);
}

inline Tensor forward(const SegModel& m, const Tensor& rgb,
                      const std::vector<double>& disparity_norm,
                      const std::vector<Tensor>* pe_override = nullptr) {
  return forward_trace(m, rgb, disparity_norm, pe_override).logits;
}

// The nine training configurations of the ablation table, derived from a base
// run configuration. Ids are stable machine names; labels are table rows.
struct AblationRow {
  std::string id;
  std::string label;
  RunConfig config;
};

inline std::vector<AblationRow> ablation_rows(const RunConfig& base) {
  auto make = [&base](const char* id, const char* label, BranchMode branches, PeMode pe,
                      SwapMode swap, FusionKind fusion) {
    RunConfig c = base;
    c.branches = branches;
    c.pe_mode = pe;
    c.swap_mode = swap;
    c.fusion = fusion;
    return AblationRow{id, label, std::move(c)};
  };
  return {
      make("rgb_baseline", "RGB Baseline", BranchMode::rgb_only, PeMode::two_d, SwapMode::none,
           FusionKind::sum),
      make("depth_baseline", "Depth Baseline", BranchMode::depth_only, PeMode::two_d,
           SwapMode::none, FusionKind::sum),
      make("rgbd", "RGBD", BranchMode::dual, PeMode::two_d, SwapMode::none, FusionKind::sum),
      make("pe3d", "3D PE", BranchMode::rgb_only, PeMode::three_d, SwapMode::none,
           FusionKind::sum),
      make("cross_v", "cross-V", BranchMode::dual, PeMode::two_d, SwapMode::cross_v,
           FusionKind::sum),
      make("cross_q", "cross-Q", BranchMode::dual, PeMode::two_d, SwapMode::cross_q,
           FusionKind::sum),
      make("cross_k", "cross-K", BranchMode::dual, PeMode::two_d, SwapMode::cross_k,
           FusionKind::sum),
      make("attn_mix", "attn-mix", BranchMode::dual, PeMode::two_d, SwapMode::none,
           FusionKind::attention_mix),
      make("total", "Total", BranchMode::dual, PeMode::three_d, SwapMode::cross_k,
           FusionKind::attention_mix),
  };
}

}  // namespace rgbdseg
