#pragma once

#include <string>
#include <vector>

#include "genad/generator.hpp"
#include "genad/numkit/params.hpp"
#include "genad/numkit/tensor.hpp"
#include "genad/reward.hpp"
#include "genad/tokenizer.hpp"

namespace genad::auction {

using generator::EncodedContext;
using generator::TargetSeq;
using numkit::Tensor;
using tokenizer::SemanticToken;

struct BidParams {
  double alpha = 1.2;
  double beta = 2.0;
  // average the bids sharing a token instead of taking their max
  bool mean_aggregation = false;
};

// (max bids)^alpha + beta; an empty list stands for an organic-only token and
// uses bid 0, so the weight degrades to exactly beta.
double token_bid_weight(const std::vector<double>& bids, double alpha, double beta,
                        bool mean_aggregation = false);

// Per-request aggregated bid weight for every POI token layer and code.
// Codes no candidate item can produce stay masked at weight 0.
class TokenBidTable {
 public:
  TokenBidTable(int layers, int codes);

  void set(int layer, int code, double weight, double max_bid);
  double weight(int layer, int code) const { return w_.at(layer, code); }
  double max_bid(int layer, int code) const { return b_.at(layer, code); }
  const Tensor& weights() const { return w_; }
  int layers() const { return w_.shape[0]; }
  int codes() const { return w_.shape[1]; }

 private:
  Tensor w_, b_;
};

// Bid-weighted softmax per layer row: z = w exp(logit) / sum w exp(logit).
// Masked codes get z = 0; a fully masked layer is an allocation error.
Tensor allocation_probs(const Tensor& logits, const TokenBidTable& table);

// One sellable thing in a request: an ad with a live bid or an organic item
// queued by upstream rank. Embedding features ride along for reward scoring.
struct CandidateItem {
  int poi_id = 0;
  bool is_ad = false;
  double bid = 0.0;  // ads only
  double gmv = 0.0;  // organics only: user-value weight in the reward blend
  int pre_rank = 0;  // organics only: upstream order, 0 first
  SemanticToken poi_token;
  Tensor e_poi;
  std::vector<int> creative_ids;
  std::vector<SemanticToken> creative_tokens;
  std::vector<Tensor> creative_feats;  // reward-model token features
};

struct AuctionRequest {
  EncodedContext ctx;  // encoded user history
  std::vector<CandidateItem> items;
  int k = 1;  // display slots
};

struct BeamCandidate {
  TargetSeq tokens;
  double log_score = 0.0;  // cumulative log z over all token layers
  std::vector<int> item_idx;  // request-local resolution, one per slot
  std::vector<int> cr_slot;   // creative index within the resolved item
  std::vector<int> poi_ids;
  std::vector<int> creative_ids;
  std::vector<int> is_ad;
  std::vector<double> bids;
  std::vector<double> slot_z;  // per-slot product of POI-layer z values
};

struct AllocationOutcome {
  BeamCandidate winner;
  reward::RewardEstimates estimates;
  double winner_reward = 0.0;  // blended reward that won the selection
  double revenue = 0.0;        // bid-weighted click estimate only
};

// Generative allocator: beam search over the generator's token space with
// bid-weighted softmax scoring, plus the policy-gradient post-training loop.
// The generator trunk stays frozen; the trainable surface is one readout
// layer per POI codebook layer, initialized from the generator's own heads.
class AllocationPolicy {
 public:
  AllocationPolicy(const generator::Generator& gen, BidParams bid);

  TokenBidTable build_bid_table(const AuctionRequest& req) const;
  std::vector<BeamCandidate> beam_generate(const AuctionRequest& req, int n_s) const;
  AllocationOutcome select_winner(const std::vector<BeamCandidate>& beams,
                                  const AuctionRequest& req, const reward::RewardModel& rm,
                                  double lambda_ux = 1.0) const;
  AllocationOutcome run_auction(const AuctionRequest& req, int n_s,
                                const reward::RewardModel& rm, double lambda_ux = 1.0) const;

  // Revenue of the winning sequence minus the best revenue attainable with
  // the given slot's item removed from the candidate set.
  double marginal_contribution(const AuctionRequest& req, const AllocationOutcome& out, int slot,
                               int n_s, const reward::RewardModel& rm,
                               double lambda_ux = 1.0) const;

  // REINFORCE over ad slots of each request's winner: pushes up log z of
  // tokens whose items carry positive marginal contribution. Returns the
  // mean objective value (to minimize).
  double pg_train_step(const std::vector<AuctionRequest>& batch, int n_s,
                       const reward::RewardModel& rm, double lambda_ux = 1.0);

  const BidParams& bid_params() const { return bid_; }
  // Whether the objective multiplies log z across all token layers (default)
  // or keeps only the first layer's.
  bool pg_layer_product() const { return pg_layer_product_; }
  void set_pg_layer_product(bool v) { pg_layer_product_ = v; }
  const generator::Generator& gen() const { return *gen_; }
  numkit::ParamStore& params() { return params_; }
  const numkit::ParamStore& params() const { return params_; }
  numkit::Adam& optimizer() { return opt_; }
  const numkit::Adam& optimizer() const { return opt_; }

  void save(const std::string& path) const;
  static AllocationPolicy load(const std::string& path, const generator::Generator& gen);

 private:
  const generator::Generator* gen_;
  BidParams bid_;
  bool pg_layer_product_ = true;
  numkit::ParamStore params_;
  numkit::Adam opt_;

  void validate_request(const AuctionRequest& req, int banned) const;
  TokenBidTable bid_table(const AuctionRequest& req, int banned) const;
  std::vector<BeamCandidate> beam_search(const AuctionRequest& req, int n_s, int banned) const;
  reward::RmSequence rm_sequence(const AuctionRequest& req, const BeamCandidate& beam) const;
  Tensor poi_logits(const AuctionRequest& req, const TargetSeq& prefix,
                    const std::vector<int>& partial) const;
};

}  // namespace genad::auction
