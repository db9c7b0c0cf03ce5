#pragma once

#include <string>
#include <utility>
#include <vector>

#include "genad/numkit/params.hpp"
#include "genad/numkit/tensor.hpp"
#include "genad/tokenizer.hpp"

namespace genad::generator {

using numkit::Tensor;
using tokenizer::SemanticToken;

struct GenConfig {
  int c = 3;     // codebook layers per token
  int w = 1024;  // codes per layer
  int k = 10;    // (poi, creative) pairs per target sequence
  int d_model = 64;
  int n_heads = 2;
  int ffn = 128;
  int blocks = 3;
  int max_hist = 64;  // history items the position table accommodates
  // Creative conditioning. joint_mtp=false drops the current POI from the
  // creative decoder's view entirely (plain next-token prediction over the
  // creative stream). offset_mtp=true pairs creative t with POI t+1 instead
  // of its own step's POI.
  bool joint_mtp = true;
  bool offset_mtp = false;
};

// One (poi token, creative token) pair; used for history items and targets.
struct TokenPair {
  SemanticToken poi;
  SemanticToken img;
  bool operator==(const TokenPair& o) const { return poi == o.poi && img == o.img; }
};
using History = std::vector<TokenPair>;
using TargetSeq = std::vector<TokenPair>;

// Output of the history encoder. Rows at index >= valid are padding and are
// masked out of all downstream cross-attention.
struct EncodedContext {
  Tensor s_e;  // [len, d_model]
  int valid = 0;
};

struct PretrainStats {
  double l_ntp = 0.0;  // per-step next-POI loss, summed over codebook layers
  double l_mtp = 0.0;  // per-step creative loss, same convention
  double l_total = 0.0;
};

class Generator {
 public:
  Generator(GenConfig cfg, uint64_t seed);

  // Bidirectional self-attention over the interleaved (poi, img) history
  // tokens. pad_to_items > history size appends masked padding items.
  // An empty history encodes as a single BOS position.
  EncodedContext encode_history(const History& hist, int pad_to_items = 0) const;

  // Logits for the next POI token, one row per codebook layer. Layer j is
  // conditioned on the greedy argmax of layers < j within the same step.
  Tensor decode_poi_step(const TargetSeq& prefix, const EncodedContext& ctx) const;
  // Same for the creative token of the step whose POI token is a_poi.
  Tensor decode_creative_step(const TargetSeq& prefix, const SemanticToken& a_poi,
                              const EncodedContext& ctx) const;

  // Single-layer variants used by beam search: logits for codebook layer
  // |partial| given the codes already fixed within the step.
  Tensor poi_layer_logits(const TargetSeq& prefix, const std::vector<int>& partial,
                          const EncodedContext& ctx) const;
  Tensor creative_layer_logits(const TargetSeq& prefix, const SemanticToken& a_poi,
                               const std::vector<int>& partial, const EncodedContext& ctx) const;
  // The decoder state feeding that POI head, [1, d_model]; lets callers swap
  // in their own readout layer.
  Tensor poi_layer_state(const TargetSeq& prefix, const std::vector<int>& partial,
                         const EncodedContext& ctx) const;

  // Teacher-forced logits for every step and layer: first element rows are
  // poi predictions ordered (t, layer), second element the creative ones.
  std::pair<Tensor, Tensor> teacher_logits(const History& hist, const TargetSeq& y) const;

  // log P(y | hist) summed over all tokens; each term clamped at ln(1e-12).
  double joint_log_prob(const History& hist, const TargetSeq& y) const;

  PretrainStats eval_losses(const std::vector<std::pair<History, TargetSeq>>& batch) const;
  // Gradients of the batch pretrain loss without applying an update.
  numkit::GradMap loss_grads(const std::vector<std::pair<History, TargetSeq>>& batch,
                             PretrainStats* stats) const;
  // One teacher-forced Adam step; returns the losses at the visited point.
  PretrainStats pretrain_step(const std::vector<std::pair<History, TargetSeq>>& batch);

  const GenConfig& config() const { return cfg_; }
  numkit::ParamStore& params() { return params_; }
  const numkit::ParamStore& params() const { return params_; }
  numkit::Adam& optimizer() { return opt_; }
  const numkit::Adam& optimizer() const { return opt_; }

  void save(const std::string& path) const;
  static Generator load(const std::string& path);

 private:
  GenConfig cfg_;
  numkit::ParamStore params_;
  numkit::Adam opt_;

  friend struct GeneratorForward;
};

}  // namespace genad::generator
