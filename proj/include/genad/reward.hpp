#pragma once

#include <string>
#include <utility>
#include <vector>

#include "genad/numkit/params.hpp"
#include "genad/numkit/tensor.hpp"

namespace genad::reward {

using numkit::Tensor;

struct RmConfig {
  int k = 10;        // slots per scored sequence
  int d_token = 16;  // token-embedding slice of each item
  int d_poi = 16;    // raw POI-embedding slice
  int d_pos = 8;     // learned slot-position slice
  int d_att = 64;    // attention projection width
  // tower hidden sizes
  int h1 = 128;
  int h2 = 32;
  int h3 = 10;
  // One tower over the summed sequence state instead of per-slot towers;
  // every slot then reports the same (sequence-level) estimate.
  bool pooled_towers = false;
};

// One display slot as the reward model sees it, plus the bookkeeping needed
// to turn click estimates into money. Organic rows keep bid = 0 and carry an
// expected-GMV weight instead.
struct RmItem {
  Tensor a_tok;  // [d_token]
  Tensor e_poi;  // [d_poi]
  bool is_ad = false;
  double bid = 0.0;
  double gmv = 0.0;
};
using RmSequence = std::vector<RmItem>;

struct RewardEstimates {
  std::vector<double> pctr_poi;  // k entries, strictly inside (0,1)
  std::vector<double> pctr_img;
  std::vector<double> pcvr;
  double sequence_reward = 0.0;  // blend_reward at lambda_ux = 1
};

struct SlotLabels {
  std::vector<int> click;  // k entries in {0,1}
  std::vector<int> conv;
};

using RmBatch = std::vector<std::pair<RmSequence, SlotLabels>>;

// Ad revenue term plus lambda_ux times the organic user-value term, both
// weighted by the POI click estimates.
double blend_reward(const RmSequence& seq, const RewardEstimates& est, double lambda_ux);

// Listwise scorer: items are enriched with a learned position code, mixed by
// one self-attention layer, and read out by per-slot sigmoid towers for POI
// clicks, creative clicks, and conversions.
class RewardModel {
 public:
  RewardModel(RmConfig cfg, uint64_t seed);

  RewardEstimates score_sequence(const RmSequence& seq) const;
  double reward_of(const RmSequence& seq, double lambda_ux = 1.0) const;

  // Mean binary cross-entropy across slots, heads, and batch.
  double eval_loss(const RmBatch& batch) const;
  numkit::GradMap loss_grads(const RmBatch& batch, double* loss) const;
  // One Adam step; returns the loss at the visited point.
  double rm_train_step(const RmBatch& batch);

  const RmConfig& config() const { return cfg_; }
  numkit::ParamStore& params() { return params_; }
  const numkit::ParamStore& params() const { return params_; }
  numkit::Adam& optimizer() { return opt_; }
  const numkit::Adam& optimizer() const { return opt_; }

  void save(const std::string& path) const;
  static RewardModel load(const std::string& path);

 private:
  RmConfig cfg_;
  numkit::ParamStore params_;
  numkit::Adam opt_;

  friend struct RewardForward;
};

}  // namespace genad::reward
