#include "genad/reward.hpp"

#include <cmath>
#include <string>

#include "genad/checkpoint.hpp"
#include "genad/errors.hpp"
#include "genad/numkit/tape.hpp"
#include "genad/rng.hpp"

namespace genad::reward {

using numkit::Adam;
using numkit::Binder;
using numkit::GradMap;
using numkit::Tape;
using numkit::Var;

struct RewardForward {
  const RewardModel& m;
  Tape& t;
  mutable Binder bind;

  RewardForward(const RewardModel& model, Tape& tape)
      : m(model), t(tape), bind(tape, model.params_) {}

  Tensor item_matrix(const RmSequence& seq) const {
    const RmConfig& cfg = m.cfg_;
    if (static_cast<int>(seq.size()) != cfg.k) {
      throw ShapeError("sequence has " + std::to_string(seq.size()) + " items, model scores " +
                       std::to_string(cfg.k));
    }
    Tensor x = Tensor::zeros({cfg.k, cfg.d_token + cfg.d_poi});
    for (int i = 0; i < cfg.k; ++i) {
      const RmItem& item = seq[static_cast<size_t>(i)];
      if (static_cast<int>(item.a_tok.data.size()) != cfg.d_token) {
        throw ShapeError("item token embedding has wrong size");
      }
      if (static_cast<int>(item.e_poi.data.size()) != cfg.d_poi) {
        throw ShapeError("item POI embedding has wrong size");
      }
      for (int j = 0; j < cfg.d_token; ++j) x.at(i, j) = item.a_tok.data[static_cast<size_t>(j)];
      for (int j = 0; j < cfg.d_poi; ++j) {
        x.at(i, cfg.d_token + j) = item.e_poi.data[static_cast<size_t>(j)];
      }
    }
    return x;
  }

  // [k, d_att] sequence state after enrichment and one attention mix.
  Var sequence_state(const RmSequence& seq) const {
    Var h = t.concat_cols(t.constant(item_matrix(seq)), bind("pos.emb"));
    Var q = t.matmul(h, bind("att.q"));
    Var k = t.matmul(h, bind("att.k"));
    Var v = t.matmul(h, bind("att.v"));
    return numkit::attention(t, q, k, v);
  }

  // Per-slot click/conversion probabilities, [k, 1] (or [1, 1] pooled).
  Var tower(const std::string& head, Var h_f) const {
    std::string p = "tower." + head;
    if (m.cfg_.pooled_towers) h_f = t.scale(t.mean_rows(h_f), m.cfg_.k);
    Var x = t.relu(numkit::linear(t, h_f, bind(p + ".w1"), bind(p + ".b1")));
    x = t.relu(numkit::linear(t, x, bind(p + ".w2"), bind(p + ".b2")));
    x = t.relu(numkit::linear(t, x, bind(p + ".w3"), bind(p + ".b3")));
    return t.sigmoid(numkit::linear(t, x, bind(p + ".out"), bind(p + ".ob")));
  }

  // Pooled towers emit one row; training compares it against every slot label.
  Var slotwise(Var pred) const {
    if (!m.cfg_.pooled_towers) return pred;
    return t.gather_rows(pred, std::vector<int>(static_cast<size_t>(m.cfg_.k), 0));
  }
};

namespace {

std::vector<double> read_col(const Tensor& col, int k) {
  std::vector<double> out(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    // pooled towers emit one row for the whole sequence
    out[static_cast<size_t>(i)] = col.data[col.data.size() == 1 ? 0 : static_cast<size_t>(i)];
  }
  return out;
}

Tensor label_col(const std::vector<int>& labels, int k) {
  if (static_cast<int>(labels.size()) != k) throw ShapeError("label list has wrong length");
  Tensor t = Tensor::zeros({k, 1});
  for (int i = 0; i < k; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y != 0 && y != 1) throw ShapeError("labels must be 0 or 1");
    t.at(i, 0) = y;
  }
  return t;
}

}  // namespace

double blend_reward(const RmSequence& seq, const RewardEstimates& est, double lambda_ux) {
  if (seq.size() != est.pctr_poi.size()) throw ShapeError("estimates do not match the sequence");
  double revenue = 0.0, user_value = 0.0;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (seq[i].is_ad) {
      revenue += seq[i].bid * est.pctr_poi[i];
    } else {
      user_value += seq[i].gmv * est.pctr_poi[i];
    }
  }
  return revenue + lambda_ux * user_value;
}

RewardModel::RewardModel(RmConfig cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg_.k < 1) throw ConfigError("need at least one slot");
  if (cfg_.d_token < 1 || cfg_.d_poi < 1 || cfg_.d_pos < 1 || cfg_.d_att < 1) {
    throw ConfigError("embedding slices must be positive");
  }
  if (cfg_.h1 < 1 || cfg_.h2 < 1 || cfg_.h3 < 1) throw ConfigError("tower sizes must be positive");

  Rng rng(Rng::derive(seed, 0x72));
  int d_h = cfg_.d_token + cfg_.d_poi + cfg_.d_pos;

  auto near_zero = [&rng](std::vector<int> shape, double sd) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = sd * rng.normal();
    return t;
  };

  params_.add("pos.emb", near_zero({cfg_.k, cfg_.d_pos}, 0.02));
  params_.add("att.q", Tensor::xavier(d_h, cfg_.d_att, rng));
  params_.add("att.k", Tensor::xavier(d_h, cfg_.d_att, rng));
  params_.add("att.v", Tensor::xavier(d_h, cfg_.d_att, rng));
  for (const char* head : {"pctr_poi", "pctr_img", "pcvr"}) {
    std::string p = std::string("tower.") + head;
    params_.add(p + ".w1", Tensor::xavier(cfg_.d_att, cfg_.h1, rng));
    params_.add(p + ".b1", Tensor::zeros({cfg_.h1}));
    params_.add(p + ".w2", Tensor::xavier(cfg_.h1, cfg_.h2, rng));
    params_.add(p + ".b2", Tensor::zeros({cfg_.h2}));
    params_.add(p + ".w3", Tensor::xavier(cfg_.h2, cfg_.h3, rng));
    params_.add(p + ".b3", Tensor::zeros({cfg_.h3}));
    // zero output layer: every head starts at exactly 0.5, so the initial
    // training loss is exactly ln 2 whatever the labels
    params_.add(p + ".out", Tensor::zeros({cfg_.h3, 1}));
    params_.add(p + ".ob", Tensor::zeros({1}));
  }
}

RewardEstimates RewardModel::score_sequence(const RmSequence& seq) const {
  Tape tape;
  RewardForward f(*this, tape);
  Var h_f = f.sequence_state(seq);
  RewardEstimates est;
  est.pctr_poi = read_col(tape.val(f.tower("pctr_poi", h_f)), cfg_.k);
  est.pctr_img = read_col(tape.val(f.tower("pctr_img", h_f)), cfg_.k);
  est.pcvr = read_col(tape.val(f.tower("pcvr", h_f)), cfg_.k);
  est.sequence_reward = blend_reward(seq, est, 1.0);
  return est;
}

double RewardModel::reward_of(const RmSequence& seq, double lambda_ux) const {
  return blend_reward(seq, score_sequence(seq), lambda_ux);
}

GradMap RewardModel::loss_grads(const RmBatch& batch, double* loss) const {
  if (batch.empty()) throw ConfigError("empty reward batch");
  Tape tape;
  RewardForward f(*this, tape);
  std::vector<Var> terms;
  for (const auto& [seq, labels] : batch) {
    Var h_f = f.sequence_state(seq);
    terms.push_back(
        tape.bce(f.slotwise(f.tower("pctr_poi", h_f)), label_col(labels.click, cfg_.k)));
    terms.push_back(
        tape.bce(f.slotwise(f.tower("pctr_img", h_f)), label_col(labels.click, cfg_.k)));
    terms.push_back(tape.bce(f.slotwise(f.tower("pcvr", h_f)), label_col(labels.conv, cfg_.k)));
  }
  Var total = tape.scale(tape.vsum(terms), 1.0 / static_cast<double>(terms.size()));
  if (loss != nullptr) *loss = tape.val(total).data[0];
  tape.backward(total);
  return f.bind.grads();
}

double RewardModel::eval_loss(const RmBatch& batch) const {
  if (batch.empty()) throw ConfigError("empty reward batch");
  Tape tape;
  RewardForward f(*this, tape);
  double total = 0.0;
  for (const auto& [seq, labels] : batch) {
    Var h_f = f.sequence_state(seq);
    total += tape.val(tape.bce(f.slotwise(f.tower("pctr_poi", h_f)),
                               label_col(labels.click, cfg_.k)))
                 .data[0];
    total += tape.val(tape.bce(f.slotwise(f.tower("pctr_img", h_f)),
                               label_col(labels.click, cfg_.k)))
                 .data[0];
    total +=
        tape.val(tape.bce(f.slotwise(f.tower("pcvr", h_f)), label_col(labels.conv, cfg_.k)))
            .data[0];
  }
  return total / (3.0 * static_cast<double>(batch.size()));
}

double RewardModel::rm_train_step(const RmBatch& batch) {
  double loss = 0.0;
  GradMap grads = loss_grads(batch, &loss);
  opt_.step(params_, grads);
  return loss;
}

void RewardModel::save(const std::string& path) const {
  Checkpoint ck;
  ck.manifest["kind"] = "reward";
  ck.manifest["k"] = cfg_.k;
  ck.manifest["d_token"] = cfg_.d_token;
  ck.manifest["d_poi"] = cfg_.d_poi;
  ck.manifest["d_pos"] = cfg_.d_pos;
  ck.manifest["d_att"] = cfg_.d_att;
  ck.manifest["h1"] = cfg_.h1;
  ck.manifest["h2"] = cfg_.h2;
  ck.manifest["h3"] = cfg_.h3;
  ck.manifest["pooled_towers"] = cfg_.pooled_towers;
  ck.put_params("p.", params_);
  ck.put_adam("opt.", opt_);
  ck.save(path);
}

RewardModel RewardModel::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "reward") {
    throw IncompatibilityError(path + " is not a reward-model checkpoint");
  }
  RmConfig cfg;
  cfg.k = ck.manifest.at("k").get<int>();
  cfg.d_token = ck.manifest.at("d_token").get<int>();
  cfg.d_poi = ck.manifest.at("d_poi").get<int>();
  cfg.d_pos = ck.manifest.at("d_pos").get<int>();
  cfg.d_att = ck.manifest.at("d_att").get<int>();
  cfg.h1 = ck.manifest.at("h1").get<int>();
  cfg.h2 = ck.manifest.at("h2").get<int>();
  cfg.h3 = ck.manifest.at("h3").get<int>();
  cfg.pooled_towers = ck.manifest.at("pooled_towers").get<bool>();
  RewardModel m(cfg, 0);
  ck.read_params("p.", m.params_);
  ck.read_adam("opt.", m.opt_);
  return m;
}

}  // namespace genad::reward
