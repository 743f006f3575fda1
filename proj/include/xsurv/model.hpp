#pragma once

#include <json.hpp>

#include "xsurv/blocks.hpp"

namespace xsurv {

using Json = nlohmann::json;

enum class Ablation {
  kFull,
  kEarlyFusion,
  kLateFusion,
  kPetOnly,
  kCtOnly,
  kSingleBranchPt,
  kSingleBranchMln,
  kSingleBranchJoint,
  kDualNoAg,
  kDualVanillaAg,
};

inline const std::vector<std::pair<Ablation, std::string>>& ablation_names() {
  static const std::vector<std::pair<Ablation, std::string>> names{
      {Ablation::kFull, "full"},
      {Ablation::kEarlyFusion, "early_fusion"},
      {Ablation::kLateFusion, "late_fusion"},
      {Ablation::kPetOnly, "pet_only"},
      {Ablation::kCtOnly, "ct_only"},
      {Ablation::kSingleBranchPt, "single_branch_pt"},
      {Ablation::kSingleBranchMln, "single_branch_mln"},
      {Ablation::kSingleBranchJoint, "single_branch_joint"},
      {Ablation::kDualNoAg, "dual_no_ag"},
      {Ablation::kDualVanillaAg, "dual_vanilla_ag"},
  };
  return names;
}

inline std::string to_string(Ablation a) {
  for (const auto& [k, n] : ablation_names())
    if (k == a) return n;
  throw Error("unknown ablation");
}

inline Ablation parse_ablation(const std::string& s) {
  for (const auto& [k, n] : ablation_names())
    if (n == s) return k;
  throw Error("unknown ablation mode '" + s + "'");
}

// Number of encoder branches (1 for early fusion and single-modality inputs).
inline int encoder_branches(Ablation a) {
  return (a == Ablation::kEarlyFusion || a == Ablation::kPetOnly || a == Ablation::kCtOnly) ? 1 : 2;
}

inline int decoder_branches(Ablation a) {
  return (a == Ablation::kSingleBranchPt || a == Ablation::kSingleBranchMln || a == Ablation::kSingleBranchJoint)
             ? 1
             : 2;
}

enum class StageKind { kConv, kSelf, kCross };

namespace detail {

inline void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  if (!j.is_object()) throw Error(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw Error(std::string(where) + ": unknown key '" + key + "'");
}

template <typename V>
void read_if(const Json& j, const char* key, V& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

struct ModelConfig {
  std::vector<int64_t> C_e{8, 16, 32, 64, 128};
  std::vector<int64_t> C_d{128, 64, 32, 16, 8};
  int N_conv = 1, N_self = 1, N_cross = 3;
  std::vector<int> n_conv{2, 3, 3, 4, 4};
  std::vector<int> n_trans{0, 2, 2, 2, 2};
  std::vector<int64_t> heads{0, 2, 4, 8, 16};
  Dims3 window{5, 5, 5};
  int N_intervals = 10;
  Ablation ablation = Ablation::kFull;
  int64_t surv_hidden = 64;
  double dropout = 0.3;

  size_t stages() const { return C_e.size(); }

  StageKind stage_kind(size_t s) const {
    const auto si = static_cast<int>(s);
    if (si < N_conv) return StageKind::kConv;
    if (si < N_conv + N_self || ablation == Ablation::kLateFusion) return StageKind::kSelf;
    return StageKind::kCross;
  }

  void validate() const {
    const size_t S = C_e.size();
    const auto need = [&](bool ok, const std::string& msg) {
      if (!ok) throw Error("ModelConfig: " + msg);
    };
    need(S >= 2, "at least two stages are required");
    need(N_conv >= 0 && N_self >= 0 && N_cross >= 0, "stage counts must be non-negative");
    need(static_cast<size_t>(N_conv + N_self + N_cross) == S, "N_conv + N_self + N_cross must equal length(C_e)");
    need(C_d.size() == S && n_conv.size() == S && n_trans.size() == S && heads.size() == S,
         "C_e, C_d, n_conv, n_trans and heads must have the same length");
    need(N_intervals >= 2, "N_intervals must be >= 2");
    need(surv_hidden >= 1, "surv_hidden must be >= 1");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    for (int a = 0; a < 3; ++a) need(window[a] >= 1, "window must be positive");
    for (size_t s = 0; s < S; ++s) {
      const auto tag = " at stage " + std::to_string(s);
      need(C_e[s] >= 1 && C_d[s] >= 1, "channels must be positive" + tag);
      need(n_conv[s] >= 1, "n_conv must be >= 1" + tag);
      need((heads[s] == 0) == (n_trans[s] == 0), "heads must be 0 iff n_trans is 0" + tag);
      const bool transformer = static_cast<int>(s) >= N_conv;
      need(!transformer || n_trans[s] > 0, "HPSA/HPCA stages need n_trans > 0" + tag);
      BlockConfig{C_e[s], C_e[s], n_conv[s], transformer ? n_trans[s] : 0, transformer ? heads[s] : 0, window}
          .validate();
    }
    need(encoder_branches(ablation) == 2 || N_cross == 0,
         to_string(ablation) + " has a single encoder branch and cannot use cross-attention stages");
  }

  Json to_json() const {
    return Json{{"C_e", C_e},
                {"C_d", C_d},
                {"N_conv", N_conv},
                {"N_self", N_self},
                {"N_cross", N_cross},
                {"n_conv", n_conv},
                {"n_trans", n_trans},
                {"heads", heads},
                {"window", window},
                {"N_intervals", N_intervals},
                {"ablation", to_string(ablation)},
                {"surv_hidden", surv_hidden},
                {"dropout", dropout}};
  }

  static ModelConfig from_json(const Json& j) {
    detail::reject_unknown_keys(j,
                                {"C_e", "C_d", "N_conv", "N_self", "N_cross", "n_conv", "n_trans", "heads",
                                 "window", "N_intervals", "ablation", "surv_hidden", "dropout"},
                                "model");
    ModelConfig c;
    detail::read_if(j, "C_e", c.C_e);
    detail::read_if(j, "C_d", c.C_d);
    detail::read_if(j, "N_conv", c.N_conv);
    detail::read_if(j, "N_self", c.N_self);
    detail::read_if(j, "N_cross", c.N_cross);
    detail::read_if(j, "n_conv", c.n_conv);
    detail::read_if(j, "n_trans", c.n_trans);
    detail::read_if(j, "heads", c.heads);
    detail::read_if(j, "window", c.window);
    detail::read_if(j, "N_intervals", c.N_intervals);
    if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
    detail::read_if(j, "surv_hidden", c.surv_hidden);
    detail::read_if(j, "dropout", c.dropout);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// The reduced configuration used by the fast test and acceptance runs.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.C_e = {4, 8, 16, 32};
  c.C_d = {32, 16, 8, 4};
  c.N_conv = 1;
  c.N_self = 1;
  c.N_cross = 2;
  c.n_conv = {1, 1, 1, 1};
  c.n_trans = {0, 2, 2, 2};
  c.heads = {0, 2, 4, 8};
  c.window = {3, 3, 3};
  return c;
}

// Derives an ablation variant from a base configuration. Single-branch
// encoders double C_e and turn cross-attention stages into self-attention
// stages; single-branch decoders double C_d.
inline ModelConfig ablation_config(ModelConfig base, Ablation mode) {
  base.ablation = mode;
  if (encoder_branches(mode) == 1) {
    for (auto& c : base.C_e) c *= 2;
    base.N_self += base.N_cross;
    base.N_cross = 0;
  }
  if (decoder_branches(mode) == 1)
    for (auto& c : base.C_d) c *= 2;
  base.validate();
  return base;
}

template <typename T>
struct AttentionMaps {
  Tensor<T> alpha_pt, alpha_mln, alpha_bg;  // alpha_bg is absent for vanilla gates
};

template <typename T>
struct ForwardOutput {
  Tensor<T> pt_prob;   // [N,1,D,H,W]; absent for single_branch_mln
  Tensor<T> mln_prob;  // [N,1,D,H,W]; absent for single_branch_pt
  Tensor<T> s_pred;    // [N, N_intervals]
  Tensor<T> deep_features;
  std::vector<AttentionMaps<T>> attention_maps;  // one per decoder scale, coarse to fine
  std::vector<Tensor<T>> encoder_outputs;        // [s * branches + b]
  std::vector<Tensor<T>> decoder_outputs;        // [j * branches + b]
};

template <typename T>
class XSurvModel {
 public:
  explicit XSurvModel(const ModelConfig& cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    BuildContext<T> ctx{params_, rng};
    build_encoder(ctx);
    build_decoder(ctx);
  }

  XSurvModel(const XSurvModel&) = delete;
  XSurvModel& operator=(const XSurvModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  int64_t deep_feature_size() const { return surv_head_.features(); }
  int64_t size_multiple() const { return int64_t{1} << (cfg_.stages() - 1); }

  // pet, ct: [N,1,D,H,W]. ct may be absent for pet_only and pet for ct_only.
  ForwardOutput<T> forward(const Tensor<T>& pet, const Tensor<T>& ct, bool train, std::mt19937_64* rng) const {
    const Ablation ab = cfg_.ablation;
    const Tensor<T>& ref = ab == Ablation::kCtOnly ? ct : pet;
    if (!ref) throw Error("forward: missing input modality");
    detail::require_5d(ref.shape(), "forward");
    if (ref.dim(1) != 1) throw ShapeError("forward", 1, ref.dim(1), 1);
    const bool needs_both = ab != Ablation::kPetOnly && ab != Ablation::kCtOnly;
    if (needs_both) {
      if (!pet || !ct) throw Error("forward: both PET and CT are required");
      for (int a = 0; a < 5; ++a)
        if (ct.dim(a) != pet.dim(a)) throw ShapeError("forward(ct)", a, ct.dim(a), pet.dim(a));
    }
    const Dims3 orig = spatial_dims(ref.shape());
    Dims3 padded{};
    for (int a = 0; a < 3; ++a) padded[a] = (orig[a] + size_multiple() - 1) / size_multiple() * size_multiple();
    const auto prep = [&](const Tensor<T>& x) { return padded == orig ? x : pad_spatial(x, padded); };

    std::vector<Tensor<T>> branch;
    switch (ab) {
      case Ablation::kEarlyFusion: branch = {concat<T>({prep(pet), prep(ct)}, 1)}; break;
      case Ablation::kPetOnly: branch = {prep(pet)}; break;
      case Ablation::kCtOnly: branch = {prep(ct)}; break;
      default: branch = {prep(pet), prep(ct)};
    }

    ForwardOutput<T> out;
    const size_t S = cfg_.stages();
    std::vector<Tensor<T>> skips(S);
    for (size_t s = 0; s < S; ++s) {
      for (size_t b = 0; b < branch.size(); ++b) branch[b] = enc_[b][s].entry(branch[b]);
      switch (cfg_.stage_kind(s)) {
        case StageKind::kConv:
          for (size_t b = 0; b < branch.size(); ++b) branch[b] = enc_[b][s].conv(branch[b]);
          break;
        case StageKind::kSelf:
          for (size_t b = 0; b < branch.size(); ++b) branch[b] = enc_[b][s].hpsa(branch[b]);
          break;
        case StageKind::kCross: {
          auto pet_out = enc_[0][s].hpca(branch[0], branch[1]);
          auto ct_out = enc_[1][s].hpca(branch[1], branch[0]);
          branch = {pet_out, ct_out};
          break;
        }
      }
      out.encoder_outputs.insert(out.encoder_outputs.end(), branch.begin(), branch.end());
      skips[s] = skip_fuse_[s](branch.size() == 1 ? branch[0] : concat<T>(branch, 1));
    }

    const int nb = decoder_branches(ab);
    std::vector<Tensor<T>> prev(static_cast<size_t>(nb));
    std::vector<Tensor<T>> gap;
    for (size_t j = 0; j < S; ++j) {
      const auto& x_skip = skips[S - 1 - j];
      std::vector<Tensor<T>> gated(static_cast<size_t>(nb));
      const Tensor<T>& g_pt = j == 0 ? x_skip : prev[0];
      const Tensor<T>& g_mln = j == 0 ? x_skip : prev[static_cast<size_t>(nb - 1)];
      if (nb == 1 || ab == Ablation::kDualNoAg) {
        for (auto& g : gated) g = x_skip;
      } else if (ab == Ablation::kDualVanillaAg) {
        auto [a_pt, x_pt] = ag_pt_[j](x_skip, g_pt);
        auto [a_mln, x_mln] = ag_mln_[j](x_skip, g_mln);
        gated = {x_pt, x_mln};
        out.attention_maps.push_back({a_pt, a_mln, Tensor<T>()});
      } else {
        auto r = rag_[j](x_skip, g_pt, g_mln);
        gated = {r.x_pt, r.x_mln};
        out.attention_maps.push_back({r.alpha_pt, r.alpha_mln, r.alpha_bg});
      }
      for (int b = 0; b < nb; ++b) {
        const auto bi = static_cast<size_t>(b);
        Tensor<T> in = j == 0 ? gated[bi] : concat<T>({upsample2x(prev[bi]), gated[bi]}, 1);
        prev[bi] = dec_[bi][j](in);
      }
      out.decoder_outputs.insert(out.decoder_outputs.end(), prev.begin(), prev.end());
      if (j >= 1)
        for (const auto& p : prev) gap.push_back(global_avg_pool(p));
    }

    const auto crop = [&](const Tensor<T>& x) { return padded == orig ? x : crop_spatial(x, orig); };
    switch (ab) {
      case Ablation::kSingleBranchPt: out.pt_prob = crop(seg_pt_(prev[0])); break;
      case Ablation::kSingleBranchMln: out.mln_prob = crop(seg_mln_(prev[0])); break;
      case Ablation::kSingleBranchJoint: {
        auto both = crop(seg_pt_(prev[0]));
        out.pt_prob = slice(both, 1, 0, 1);
        out.mln_prob = slice(both, 1, 1, 1);
        break;
      }
      default:
        out.pt_prob = crop(seg_pt_(prev[0]));
        out.mln_prob = crop(seg_mln_(prev[1]));
    }
    for (size_t j = 0; j < out.attention_maps.size(); ++j) {
      const int64_t f = int64_t{1} << (S - 1 - j);
      const Dims3 want{(orig[0] + f - 1) / f, (orig[1] + f - 1) / f, (orig[2] + f - 1) / f};
      for (auto* a : {&out.attention_maps[j].alpha_pt, &out.attention_maps[j].alpha_mln,
                      &out.attention_maps[j].alpha_bg})
        if (*a && spatial_dims(a->shape()) != want) *a = crop_spatial(*a, want);
    }
    out.deep_features = concat<T>(gap, 1);
    out.s_pred = surv_head_(out.deep_features, train, rng);
    return out;
  }

 private:
  struct EncoderStage {
    ConvNormAct<T> entry;
    ConvBlock<T> conv;
    HpsaBlock<T> hpsa;
    HpcaBlock<T> hpca;
  };

  void build_encoder(BuildContext<T>& ctx) {
    const size_t S = cfg_.stages();
    const int nb = encoder_branches(cfg_.ablation);
    const int64_t in_ch = cfg_.ablation == Ablation::kEarlyFusion ? 2 : 1;
    const char* names[] = {"pet", "ct"};
    std::string single = "fused";
    if (cfg_.ablation == Ablation::kPetOnly) single = "pet";
    if (cfg_.ablation == Ablation::kCtOnly) single = "ct";
    enc_.resize(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      const std::string bname = nb == 1 ? single : names[b];
      for (size_t s = 0; s < S; ++s) {
        const std::string p = "enc." + bname + ".s" + std::to_string(s);
        EncoderStage st;
        st.entry = ConvNormAct<T>(ctx, p + (s == 0 ? ".stem" : ".down"), s == 0 ? in_ch : cfg_.C_e[s - 1],
                                  cfg_.C_e[s], s == 0 ? 1 : 2);
        const auto kind = cfg_.stage_kind(s);
        BlockConfig bc{cfg_.C_e[s], cfg_.C_e[s], cfg_.n_conv[s], 0, 0, cfg_.window};
        if (kind != StageKind::kConv) {
          bc.n_trans = cfg_.n_trans[s];
          bc.num_heads = cfg_.heads[s];
        }
        switch (kind) {
          case StageKind::kConv: st.conv = ConvBlock<T>(ctx, p + ".conv", bc); break;
          case StageKind::kSelf: st.hpsa = HpsaBlock<T>(ctx, p + ".hpsa", bc); break;
          case StageKind::kCross: st.hpca = HpcaBlock<T>(ctx, p + ".hpca", bc); break;
        }
        enc_[static_cast<size_t>(b)].push_back(std::move(st));
      }
    }
    for (size_t s = 0; s < S; ++s)
      skip_fuse_.emplace_back(ctx, "skip.s" + std::to_string(s), nb * cfg_.C_e[s], cfg_.C_d[S - 1 - s], 1);
  }

  void build_decoder(BuildContext<T>& ctx) {
    const size_t S = cfg_.stages();
    const Ablation ab = cfg_.ablation;
    const int nb = decoder_branches(ab);
    const auto& cd = cfg_.C_d;
    for (size_t j = 0; j < S; ++j) {
      const std::string p = "dec.j" + std::to_string(j);
      const int64_t gate_ch = j == 0 ? cd[0] : cd[j - 1];
      if (nb == 2 && ab == Ablation::kDualVanillaAg) {
        const int64_t inter = std::max<int64_t>(1, cd[j] / 2);
        ag_pt_.emplace_back(ctx, p + ".ag_pt", cd[j], gate_ch, inter);
        ag_mln_.emplace_back(ctx, p + ".ag_mln", cd[j], gate_ch, inter);
      } else if (nb == 2 && ab != Ablation::kDualNoAg) {
        rag_.emplace_back(ctx, p + ".rag", cd[j], gate_ch, gate_ch, cd[j]);
      }
    }
    std::vector<std::string> names;
    switch (ab) {
      case Ablation::kSingleBranchPt: names = {"pt"}; break;
      case Ablation::kSingleBranchMln: names = {"mln"}; break;
      case Ablation::kSingleBranchJoint: names = {"joint"}; break;
      default: names = {"pt", "mln"};
    }
    dec_.resize(names.size());
    int64_t feat = 0;
    for (size_t b = 0; b < names.size(); ++b)
      for (size_t j = 0; j < S; ++j) {
        const int64_t cin = j == 0 ? cd[0] : cd[j - 1] + cd[j];
        dec_[b].emplace_back(ctx, "dec." + names[b] + ".j" + std::to_string(j),
                             BlockConfig{cin, cd[j], cfg_.n_conv[S - 1 - j], 0, 0, cfg_.window});
        if (j >= 1) feat += cd[j];
      }
    if (ab == Ablation::kSingleBranchMln) {
      seg_mln_ = SegmentationHead<T>(ctx, "head.seg_mln", cd[S - 1]);
    } else {
      seg_pt_ = SegmentationHead<T>(ctx, ab == Ablation::kSingleBranchJoint ? "head.seg_joint" : "head.seg_pt",
                                    cd[S - 1], ab == Ablation::kSingleBranchJoint ? 2 : 1);
      if (nb == 2) seg_mln_ = SegmentationHead<T>(ctx, "head.seg_mln", cd[S - 1]);
    }
    surv_head_ = SurvivalHead<T>(ctx, "head.surv", feat, cfg_.surv_hidden, cfg_.N_intervals, cfg_.dropout);
  }

  ModelConfig cfg_;
  ParameterSet<T> params_;
  std::vector<std::vector<EncoderStage>> enc_;
  std::vector<Conv3dLayer<T>> skip_fuse_;
  std::vector<RagBlock<T>> rag_;
  std::vector<VanillaAttentionGate<T>> ag_pt_, ag_mln_;
  std::vector<std::vector<ConvBlock<T>>> dec_;
  SegmentationHead<T> seg_pt_, seg_mln_;
  SurvivalHead<T> surv_head_;
};

}  // namespace xsurv
