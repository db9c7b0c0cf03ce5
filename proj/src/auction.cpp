#include "genad/auction.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "genad/checkpoint.hpp"
#include "genad/errors.hpp"
#include "genad/numkit/tape.hpp"

namespace genad::auction {

using numkit::Binder;
using numkit::GradMap;
using numkit::Tape;
using numkit::Var;

double token_bid_weight(const std::vector<double>& bids, double alpha, double beta,
                        bool mean_aggregation) {
  if (alpha <= 0.0) throw ConfigError("alpha must be positive");
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  double b = 0.0;
  if (!bids.empty()) {
    double acc = mean_aggregation ? 0.0 : bids[0];
    for (double bid : bids) {
      if (bid < 0.0) throw NumericError("negative bid");
      acc = mean_aggregation ? acc + bid : std::max(acc, bid);
    }
    b = mean_aggregation ? acc / static_cast<double>(bids.size()) : acc;
  }
  return std::pow(b, alpha) + beta;
}

TokenBidTable::TokenBidTable(int layers, int codes)
    : w_(Tensor::zeros({layers, codes})), b_(Tensor::zeros({layers, codes})) {}

void TokenBidTable::set(int layer, int code, double weight, double max_bid) {
  if (layer < 0 || layer >= layers() || code < 0 || code >= codes()) {
    throw IndexError("bid table entry out of range");
  }
  w_.at(layer, code) = weight;
  b_.at(layer, code) = max_bid;
}

Tensor allocation_probs(const Tensor& logits, const TokenBidTable& table) {
  if (logits.rank() != 2 || logits.shape[0] != table.layers() || logits.shape[1] != table.codes()) {
    throw ShapeError("allocation logits must be [" + std::to_string(table.layers()) + "," +
                     std::to_string(table.codes()) + "]");
  }
  for (int j = 0; j < table.layers(); ++j) {
    bool any = false;
    for (int c = 0; c < table.codes() && !any; ++c) any = table.weight(j, c) > 0.0;
    if (!any) throw AllocationError("token layer " + std::to_string(j) + " is fully masked");
  }
  return numkit::weighted_softmax_lastaxis(logits, table.weights());
}

namespace {

// Search-time beam with the bookkeeping the public BeamCandidate drops.
struct Beam {
  BeamCandidate out;
  std::vector<int> poi_partial;
  std::vector<int> cr_partial;
  std::vector<char> used;
  size_t organic_pos = 0;  // cursor into the pre_rank ordering
  double cur_z = 1.0;      // POI-layer z product of the step in progress
  std::vector<int> trace;  // every emitted code, for deterministic ordering
};

bool beam_before(const Beam& a, const Beam& b) {
  if (a.out.log_score != b.out.log_score) return a.out.log_score > b.out.log_score;
  return a.trace < b.trace;
}

void prune(std::vector<Beam>& beams, int n_s) {
  std::sort(beams.begin(), beams.end(), beam_before);
  if (static_cast<int>(beams.size()) > n_s) beams.resize(static_cast<size_t>(n_s));
}

bool prefix_matches(const SemanticToken& tok, const std::vector<int>& partial) {
  for (size_t j = 0; j < partial.size(); ++j) {
    if (tok.codes[j] != partial[j]) return false;
  }
  return true;
}

bool tokens_before(const TargetSeq& a, const TargetSeq& b) {
  for (size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (!(a[i].poi == b[i].poi)) return a[i].poi < b[i].poi;
    if (!(a[i].img == b[i].img)) return a[i].img < b[i].img;
  }
  return a.size() < b.size();
}

// Unused ads plus the single next organic: upstream organic order is fixed,
// so only the head of the remaining organic queue is ever placeable.
std::vector<int> feasible_items(const std::vector<CandidateItem>& items, const Beam& b,
                                const std::vector<int>& organic_order) {
  std::vector<int> out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].is_ad && !b.used[i]) out.push_back(static_cast<int>(i));
  }
  if (b.organic_pos < organic_order.size()) out.push_back(organic_order[b.organic_pos]);
  return out;
}

}  // namespace

AllocationPolicy::AllocationPolicy(const generator::Generator& gen, BidParams bid)
    : gen_(&gen), bid_(bid) {
  if (bid_.alpha <= 0.0) throw ConfigError("alpha must be positive");
  if (bid_.beta <= 0.0) throw ConfigError("beta must be positive");
  // Trainable readout starts as a copy of the generator's own POI heads, so
  // an untrained policy allocates exactly like the frozen generator.
  const auto& gcfg = gen.config();
  for (int j = 0; j < gcfg.c; ++j) {
    std::string src = "head.poi." + std::to_string(j);
    std::string dst = "alloc.poi." + std::to_string(j);
    params_.add(dst, gen.params().get(src));
    params_.add(dst + ".b", gen.params().get(src + ".b"));
  }
}

void AllocationPolicy::validate_request(const AuctionRequest& req, int banned) const {
  const auto& gcfg = gen_->config();
  if (req.k < 1) throw ConfigError("request needs at least one slot");
  if (req.k > gcfg.k) throw ConfigError("request asks for more slots than the generator supports");
  int avail = static_cast<int>(req.items.size()) - (banned >= 0 ? 1 : 0);
  if (avail < req.k) throw AllocationError("fewer resolvable items than display slots");
  for (const auto& it : req.items) {
    if (static_cast<int>(it.poi_token.codes.size()) != gcfg.c) {
      throw TokenError("item POI token must have " + std::to_string(gcfg.c) + " layers");
    }
    for (int code : it.poi_token.codes) {
      if (code < 0 || code >= gcfg.w) throw TokenError("item POI code out of range");
    }
    if (it.creative_tokens.empty()) throw TokenError("item has no creatives");
    if (it.creative_ids.size() != it.creative_tokens.size()) {
      throw ConfigError("creative ids and tokens misaligned");
    }
    for (const auto& ct : it.creative_tokens) {
      if (static_cast<int>(ct.codes.size()) != gcfg.c) {
        throw TokenError("creative token must have " + std::to_string(gcfg.c) + " layers");
      }
      for (int code : ct.codes) {
        if (code < 0 || code >= gcfg.w) throw TokenError("creative code out of range");
      }
    }
    if (it.is_ad && it.bid < 0.0) throw NumericError("negative bid");
  }
}

TokenBidTable AllocationPolicy::build_bid_table(const AuctionRequest& req) const {
  return bid_table(req, -1);
}

// A banned item drops out of the aggregation entirely: the masked re-search
// models a counterfactual where it never competed.
TokenBidTable AllocationPolicy::bid_table(const AuctionRequest& req, int banned) const {
  validate_request(req, banned);
  const auto& gcfg = gen_->config();
  TokenBidTable table(gcfg.c, gcfg.w);
  for (int j = 0; j < gcfg.c; ++j) {
    std::map<int, std::vector<double>> bids;  // code -> ad bids sharing it
    for (size_t idx = 0; idx < req.items.size(); ++idx) {
      if (static_cast<int>(idx) == banned) continue;
      const auto& it = req.items[idx];
      auto& list = bids[it.poi_token.codes[j]];
      if (it.is_ad) list.push_back(it.bid);
    }
    for (const auto& [code, list] : bids) {
      double w = token_bid_weight(list, bid_.alpha, bid_.beta, bid_.mean_aggregation);
      double b = 0.0;
      if (!list.empty()) {
        if (bid_.mean_aggregation) {
          for (double x : list) b += x;
          b /= static_cast<double>(list.size());
        } else {
          b = *std::max_element(list.begin(), list.end());
        }
      }
      table.set(j, code, w, b);
    }
  }
  return table;
}

Tensor AllocationPolicy::poi_logits(const AuctionRequest& req, const TargetSeq& prefix,
                                    const std::vector<int>& partial) const {
  Tensor state = gen_->poi_layer_state(prefix, partial, req.ctx);
  std::string p = "alloc.poi." + std::to_string(partial.size());
  Tensor logits = numkit::add_row(numkit::matmul(state, params_.get(p)), params_.get(p + ".b"));
  return Tensor({gen_->config().w}, logits.data);
}

std::vector<BeamCandidate> AllocationPolicy::beam_search(const AuctionRequest& req, int n_s,
                                                         int banned) const {
  if (n_s < 1) throw ConfigError("beam width must be at least 1");
  const auto& gcfg = gen_->config();
  const TokenBidTable table = bid_table(req, banned);

  std::vector<int> organic_order;
  for (size_t i = 0; i < req.items.size(); ++i) {
    if (!req.items[i].is_ad && static_cast<int>(i) != banned) {
      organic_order.push_back(static_cast<int>(i));
    }
  }
  std::stable_sort(organic_order.begin(), organic_order.end(),
                   [&](int a, int b) { return req.items[a].pre_rank < req.items[b].pre_rank; });

  Beam root;
  root.used.assign(req.items.size(), 0);
  if (banned >= 0) root.used[static_cast<size_t>(banned)] = 1;
  std::vector<Beam> beams{root};

  for (int step = 0; step < req.k; ++step) {
    // POI token, one codebook layer at a time.
    for (int j = 0; j < gcfg.c; ++j) {
      std::vector<Beam> next;
      for (const Beam& b : beams) {
        std::set<int> allowed;
        for (int i : feasible_items(req.items, b, organic_order)) {
          const auto& tok = req.items[static_cast<size_t>(i)].poi_token;
          if (prefix_matches(tok, b.poi_partial)) allowed.insert(tok.codes[j]);
        }
        Tensor logits = poi_logits(req, b.out.tokens, b.poi_partial);
        Tensor w = Tensor::zeros({gcfg.w});
        for (int c : allowed) w.at(c) = table.weight(j, c);
        Tensor z = numkit::weighted_softmax_lastaxis(logits, w);
        for (int c : allowed) {
          Beam child = b;
          child.poi_partial.push_back(c);
          child.trace.push_back(c);
          child.cur_z *= z.at(c);
          child.out.log_score += std::log(z.at(c));
          next.push_back(std::move(child));
        }
      }
      prune(next, n_s);
      beams.swap(next);
    }
    // Creative token: every consistent creative competes at uniform weight,
    // since bids act at POI granularity only.
    for (int j = 0; j < gcfg.c; ++j) {
      std::vector<Beam> next;
      for (const Beam& b : beams) {
        SemanticToken a_poi{b.poi_partial};
        std::set<int> allowed;
        for (int i : feasible_items(req.items, b, organic_order)) {
          const auto& item = req.items[static_cast<size_t>(i)];
          if (!(item.poi_token == a_poi)) continue;
          for (const auto& ct : item.creative_tokens) {
            if (prefix_matches(ct, b.cr_partial)) allowed.insert(ct.codes[j]);
          }
        }
        Tensor logits = gen_->creative_layer_logits(b.out.tokens, a_poi, b.cr_partial, req.ctx);
        Tensor w = Tensor::zeros({gcfg.w});
        for (int c : allowed) w.at(c) = 1.0;
        Tensor z = numkit::weighted_softmax_lastaxis(logits, w);
        for (int c : allowed) {
          Beam child = b;
          child.cr_partial.push_back(c);
          child.trace.push_back(c);
          child.out.log_score += std::log(z.at(c));
          next.push_back(std::move(child));
        }
      }
      prune(next, n_s);
      beams.swap(next);
    }
    // Commit the finished step: resolve the token pair to one concrete item.
    for (Beam& b : beams) {
      SemanticToken a_poi{b.poi_partial};
      SemanticToken a_cr{b.cr_partial};
      int pick = -1;
      for (int i : feasible_items(req.items, b, organic_order)) {
        const auto& item = req.items[static_cast<size_t>(i)];
        if (!(item.poi_token == a_poi)) continue;
        bool has_cr = false;
        for (const auto& ct : item.creative_tokens) has_cr = has_cr || ct == a_cr;
        if (!has_cr) continue;
        if (pick < 0) {
          pick = i;
        } else {
          const auto& best = req.items[static_cast<size_t>(pick)];
          if (item.is_ad && (!best.is_ad || item.bid > best.bid)) pick = i;
        }
      }
      if (pick < 0) throw AllocationError("beam token resolves to no item");
      const auto& item = req.items[static_cast<size_t>(pick)];
      int cr_slot = -1;
      for (size_t ci = 0; ci < item.creative_tokens.size() && cr_slot < 0; ++ci) {
        if (item.creative_tokens[ci] == a_cr) cr_slot = static_cast<int>(ci);
      }
      b.used[static_cast<size_t>(pick)] = 1;
      if (!item.is_ad) ++b.organic_pos;
      b.out.tokens.push_back({a_poi, a_cr});
      b.out.item_idx.push_back(pick);
      b.out.cr_slot.push_back(cr_slot);
      b.out.poi_ids.push_back(item.poi_id);
      b.out.creative_ids.push_back(item.creative_ids[static_cast<size_t>(cr_slot)]);
      b.out.is_ad.push_back(item.is_ad ? 1 : 0);
      b.out.bids.push_back(item.is_ad ? item.bid : 0.0);
      b.out.slot_z.push_back(b.cur_z);
      b.poi_partial.clear();
      b.cr_partial.clear();
      b.cur_z = 1.0;
    }
  }

  std::vector<BeamCandidate> out;
  out.reserve(beams.size());
  for (Beam& b : beams) out.push_back(std::move(b.out));
  return out;
}

std::vector<BeamCandidate> AllocationPolicy::beam_generate(const AuctionRequest& req,
                                                           int n_s) const {
  return beam_search(req, n_s, -1);
}

reward::RmSequence AllocationPolicy::rm_sequence(const AuctionRequest& req,
                                                 const BeamCandidate& beam) const {
  reward::RmSequence seq;
  for (size_t s = 0; s < beam.item_idx.size(); ++s) {
    const auto& item = req.items[static_cast<size_t>(beam.item_idx[s])];
    reward::RmItem ri;
    ri.a_tok = item.creative_feats.at(static_cast<size_t>(beam.cr_slot[s]));
    ri.e_poi = item.e_poi;
    ri.is_ad = item.is_ad;
    ri.bid = beam.bids[s];
    ri.gmv = item.is_ad ? 0.0 : item.gmv;
    seq.push_back(std::move(ri));
  }
  return seq;
}

AllocationOutcome AllocationPolicy::select_winner(const std::vector<BeamCandidate>& beams,
                                                  const AuctionRequest& req,
                                                  const reward::RewardModel& rm,
                                                  double lambda_ux) const {
  if (beams.empty()) throw ConfigError("no beams to select from");
  int best = -1;
  double best_reward = 0.0;
  reward::RewardEstimates best_est;
  for (size_t i = 0; i < beams.size(); ++i) {
    reward::RmSequence seq = rm_sequence(req, beams[i]);
    reward::RewardEstimates est = rm.score_sequence(seq);
    double r = reward::blend_reward(seq, est, lambda_ux);
    bool take = best < 0 || r > best_reward;
    if (!take && r == best_reward) {
      const auto& cur = beams[static_cast<size_t>(best)];
      if (beams[i].log_score != cur.log_score) {
        take = beams[i].log_score > cur.log_score;
      } else {
        take = tokens_before(beams[i].tokens, cur.tokens);
      }
    }
    if (take) {
      best = static_cast<int>(i);
      best_reward = r;
      best_est = std::move(est);
    }
  }
  AllocationOutcome out;
  out.winner = beams[static_cast<size_t>(best)];
  out.estimates = std::move(best_est);
  out.winner_reward = best_reward;
  out.revenue = 0.0;
  for (size_t s = 0; s < out.winner.bids.size(); ++s) {
    out.revenue += out.winner.bids[s] * out.estimates.pctr_poi[s];
  }
  return out;
}

AllocationOutcome AllocationPolicy::run_auction(const AuctionRequest& req, int n_s,
                                                const reward::RewardModel& rm,
                                                double lambda_ux) const {
  return select_winner(beam_generate(req, n_s), req, rm, lambda_ux);
}

double AllocationPolicy::marginal_contribution(const AuctionRequest& req,
                                               const AllocationOutcome& out, int slot, int n_s,
                                               const reward::RewardModel& rm,
                                               double lambda_ux) const {
  if (slot < 0 || slot >= static_cast<int>(out.winner.item_idx.size())) {
    throw IndexError("slot out of range");
  }
  double alt_revenue = 0.0;
  try {
    auto beams = beam_search(req, n_s, out.winner.item_idx[static_cast<size_t>(slot)]);
    alt_revenue = select_winner(beams, req, rm, lambda_ux).revenue;
  } catch (const AllocationError&) {
    // No feasible list without this item: the whole revenue rides on it.
  }
  return out.revenue - alt_revenue;
}

double AllocationPolicy::pg_train_step(const std::vector<AuctionRequest>& batch, int n_s,
                                       const reward::RewardModel& rm, double lambda_ux) {
  if (batch.empty()) throw ConfigError("empty batch");
  const auto& gcfg = gen_->config();
  Tape tape;
  Binder bind(tape, params_);
  std::vector<Var> terms;
  for (const AuctionRequest& req : batch) {
    AllocationOutcome out = run_auction(req, n_s, rm, lambda_ux);
    const BeamCandidate& win = out.winner;
    const TokenBidTable table = build_bid_table(req);
    std::vector<int> organic_order;
    for (size_t i = 0; i < req.items.size(); ++i) {
      if (!req.items[i].is_ad) organic_order.push_back(static_cast<int>(i));
    }
    std::stable_sort(organic_order.begin(), organic_order.end(),
                     [&](int a, int b) { return req.items[a].pre_rank < req.items[b].pre_rank; });
    // Replay the winner's POI choices against the live heads, rebuilding the
    // exact per-layer masks the search saw.
    Beam state;
    state.used.assign(req.items.size(), 0);
    TargetSeq prefix;
    for (size_t s = 0; s < win.item_idx.size(); ++s) {
      double r = marginal_contribution(req, out, static_cast<int>(s), n_s, rm, lambda_ux);
      std::vector<int> partial;
      int n_layers = pg_layer_product_ ? gcfg.c : 1;
      for (int j = 0; j < gcfg.c; ++j) {
        int code = win.tokens[s].poi.codes[static_cast<size_t>(j)];
        if (j < n_layers) {
          std::set<int> allowed;
          for (int i : feasible_items(req.items, state, organic_order)) {
            const auto& tok = req.items[static_cast<size_t>(i)].poi_token;
            if (prefix_matches(tok, partial)) allowed.insert(tok.codes[j]);
          }
          Tensor w = Tensor::zeros({1, gcfg.w});
          for (int c : allowed) w.at(0, c) = table.weight(j, c);
          Tensor dec = gen_->poi_layer_state(prefix, partial, req.ctx);
          std::string p = "alloc.poi." + std::to_string(j);
          Var logits = numkit::linear(tape, tape.constant(dec), bind(p), bind(p + ".b"));
          Var logz = tape.weighted_log_softmax(logits, w);
          terms.push_back(tape.scale(tape.pick(logz, code), r));
        }
        partial.push_back(code);
      }
      int idx = win.item_idx[s];
      state.used[static_cast<size_t>(idx)] = 1;
      if (!req.items[static_cast<size_t>(idx)].is_ad) ++state.organic_pos;
      prefix.push_back(win.tokens[s]);
    }
  }
  Var loss = tape.scale(tape.vsum(terms), -1.0 / static_cast<double>(batch.size()));
  tape.backward(loss);
  opt_.step(params_, bind.grads());
  return tape.val(loss).at(0);
}

void AllocationPolicy::save(const std::string& path) const {
  Checkpoint ck;
  ck.manifest["kind"] = "alloc";
  ck.manifest["alpha"] = bid_.alpha;
  ck.manifest["beta"] = bid_.beta;
  ck.manifest["mean_aggregation"] = bid_.mean_aggregation;
  ck.manifest["pg_layer_product"] = pg_layer_product_;
  ck.manifest["c"] = gen_->config().c;
  ck.manifest["w"] = gen_->config().w;
  ck.manifest["d_model"] = gen_->config().d_model;
  ck.put_params("p.", params_);
  ck.put_adam("opt.", opt_);
  ck.save(path);
}

AllocationPolicy AllocationPolicy::load(const std::string& path, const generator::Generator& gen) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "alloc") {
    throw IncompatibilityError(path + " is not an allocation checkpoint");
  }
  if (ck.manifest.at("c").get<int>() != gen.config().c ||
      ck.manifest.at("w").get<int>() != gen.config().w ||
      ck.manifest.at("d_model").get<int>() != gen.config().d_model) {
    throw IncompatibilityError("allocation heads were trained for a different generator shape");
  }
  BidParams bid;
  bid.alpha = ck.manifest.at("alpha").get<double>();
  bid.beta = ck.manifest.at("beta").get<double>();
  bid.mean_aggregation = ck.manifest.at("mean_aggregation").get<bool>();
  AllocationPolicy policy(gen, bid);
  policy.pg_layer_product_ = ck.manifest.at("pg_layer_product").get<bool>();
  ck.read_params("p.", policy.params_);
  ck.read_adam("opt.", policy.opt_);
  return policy;
}

}  // namespace genad::auction
