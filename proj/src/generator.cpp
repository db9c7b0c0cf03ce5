#include "genad/generator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "genad/checkpoint.hpp"
#include "genad/errors.hpp"
#include "genad/numkit/tape.hpp"
#include "genad/rng.hpp"

namespace genad::generator {

using numkit::Adam;
using numkit::AdamConfig;
using numkit::Binder;
using numkit::GradMap;
using numkit::ParamStore;
using numkit::Tape;
using numkit::Var;

namespace {

std::string bname(const std::string& stack, int block, const std::string& leaf) {
  return stack + ".b" + std::to_string(block) + "." + leaf;
}

}  // namespace

// All sequence assembly and forward passes live here so the public methods
// stay thin. Token streams are row indices into the flat embedding table:
// segment (kind, layer) holds W code rows plus BOS and PAD.
struct GeneratorForward {
  const Generator& g;
  Tape& t;
  mutable Binder bind;  // parameter binding memoizes tape inputs

  GeneratorForward(const Generator& gen, Tape& tape)
      : g(gen), t(tape), bind(tape, gen.params_) {}

  int C() const { return g.cfg_.c; }
  int W() const { return g.cfg_.w; }
  int vocab() const { return g.cfg_.w + 2; }
  int bos() const { return g.cfg_.w; }
  int pad() const { return g.cfg_.w + 1; }

  int tok_row(int kind, int layer, int code) const {
    return (kind * C() + layer) * vocab() + code;
  }

  void check_token(const SemanticToken& tok, const char* what) const {
    if (static_cast<int>(tok.codes.size()) != C()) {
      throw TokenError(std::string(what) + " has " + std::to_string(tok.codes.size()) +
                       " layers, expected " + std::to_string(C()));
    }
    for (int code : tok.codes) {
      if (code < 0 || code >= W()) {
        throw TokenError(std::string(what) + " code " + std::to_string(code) +
                         " out of range [0," + std::to_string(W()) + ")");
      }
    }
  }

  void append_token(std::vector<int>& rows, int kind, const SemanticToken& tok) const {
    for (int j = 0; j < C(); ++j) rows.push_back(tok_row(kind, j, tok.codes[static_cast<size_t>(j)]));
  }

  // ---- streams ----

  std::vector<int> enc_rows(const History& hist, int pad_to_items) const {
    std::vector<int> rows;
    if (hist.empty()) {
      rows.push_back(tok_row(0, 0, bos()));
      return rows;
    }
    for (const auto& item : hist) {
      check_token(item.poi, "history poi token");
      check_token(item.img, "history img token");
      append_token(rows, 0, item.poi);
      append_token(rows, 1, item.img);
    }
    for (int i = static_cast<int>(hist.size()); i < pad_to_items; ++i) {
      for (int kind = 0; kind < 2; ++kind) {
        for (int j = 0; j < C(); ++j) rows.push_back(tok_row(kind, j, pad()));
      }
    }
    return rows;
  }

  // BOS + per step: poi layers then img layers.
  std::vector<int> joint_rows(const TargetSeq& y) const {
    std::vector<int> rows{tok_row(0, 0, bos())};
    for (const auto& pair : y) {
      check_token(pair.poi, "target poi token");
      check_token(pair.img, "target img token");
      append_token(rows, 0, pair.poi);
      append_token(rows, 1, pair.img);
    }
    return rows;
  }

  // Creative stream for the configured conditioning mode, teacher-forced.
  std::vector<int> creative_rows(const TargetSeq& y) const {
    if (g.cfg_.joint_mtp && !g.cfg_.offset_mtp) return joint_rows(y);
    std::vector<int> rows{tok_row(0, 0, bos())};
    int K = static_cast<int>(y.size());
    for (int s = 0; s < K; ++s) {
      if (!g.cfg_.joint_mtp) {
        append_token(rows, 1, y[static_cast<size_t>(s)].img);
        continue;
      }
      // offset mode: creative s sits next to the POI of step s+1 (last step
      // has no successor, so its slot is PAD)
      if (s + 1 < K) {
        append_token(rows, 0, y[static_cast<size_t>(s + 1)].poi);
      } else {
        for (int j = 0; j < C(); ++j) rows.push_back(tok_row(0, j, pad()));
      }
      append_token(rows, 1, y[static_cast<size_t>(s)].img);
    }
    return rows;
  }

  int poi_hidden_pos(int step, int layer) const { return step * 2 * C() + layer; }
  int img_hidden_pos(int step, int layer) const {
    if (!g.cfg_.joint_mtp) return step * C() + layer;
    return step * 2 * C() + C() + layer;
  }

  // ---- model pieces ----

  Var embed(const std::vector<int>& rows, const std::string& pos_table) const {
    Var tok = t.gather_rows(bind("emb.tok"), rows);
    std::vector<int> pos(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) pos[i] = static_cast<int>(i);
    return t.add(tok, t.gather_rows(bind(pos_table), pos));
  }

  Var mha(const std::string& p, Var q_in, Var kv_in, const Tensor& mask, bool causal) const {
    std::vector<Var> heads;
    for (int h = 0; h < g.cfg_.n_heads; ++h) {
      std::string hs = std::to_string(h);
      Var q = t.matmul(q_in, bind(p + ".q" + hs));
      Var k = t.matmul(kv_in, bind(p + ".k" + hs));
      Var v = t.matmul(kv_in, bind(p + ".v" + hs));
      heads.push_back(numkit::attention(t, q, k, v, mask, causal));
    }
    Var cat = heads[0];
    for (size_t h = 1; h < heads.size(); ++h) cat = t.concat_cols(cat, heads[h]);
    return numkit::linear(t, cat, bind(p + ".o"), bind(p + ".ob"));
  }

  Var ln(const std::string& p, Var x) const { return t.layer_norm(x, bind(p + ".g"), bind(p + ".b")); }

  Var ffn(const std::string& p, Var x) const {
    Var h = t.relu(numkit::linear(t, x, bind(p + ".w1"), bind(p + ".b1")));
    return numkit::linear(t, h, bind(p + ".w2"), bind(p + ".b2"));
  }

  // Pre-LN block; cross-attention only when ctx is valid.
  Var block(const std::string& stack, int i, Var x, bool causal, const Tensor& self_mask,
            Var ctx, const Tensor& cross_mask, bool has_ctx) const {
    Var nx = ln(bname(stack, i, "ln1"), x);
    Var a = mha(bname(stack, i, "att"), nx, nx, self_mask, causal);
    x = t.add(x, a);
    if (has_ctx) {
      Var c = mha(bname(stack, i, "xat"), ln(bname(stack, i, "ln2"), x), ctx, cross_mask, false);
      x = t.add(x, c);
    }
    Var f = ffn(bname(stack, i, "ffn"), ln(bname(stack, i, "ln3"), x));
    return t.add(x, f);
  }

  Var encoder(const std::vector<int>& rows, int valid) const {
    int n = static_cast<int>(rows.size());
    Tensor mask;
    if (valid < n) {
      mask = Tensor::zeros({n, n});
      for (int i = 0; i < n; ++i) {
        for (int j = valid; j < n; ++j) mask.at(i, j) = -1e30;
      }
    }
    Var x = embed(rows, "pos.enc");
    for (int i = 0; i < g.cfg_.blocks; ++i) {
      x = block("enc", i, x, false, mask, Var{}, Tensor{}, false);
    }
    return ln("enc.lnf", x);
  }

  Var decoder(const std::string& stack, const std::vector<int>& rows, Var ctx, int ctx_valid) const {
    int n = static_cast<int>(rows.size());
    int m = t.val(ctx).shape[0];
    Tensor cross_mask;
    if (ctx_valid < m) {
      cross_mask = Tensor::zeros({n, m});
      for (int i = 0; i < n; ++i) {
        for (int j = ctx_valid; j < m; ++j) cross_mask.at(i, j) = -1e30;
      }
    }
    Var x = embed(rows, "pos.dec");
    for (int i = 0; i < g.cfg_.blocks; ++i) {
      x = block(stack, i, x, true, Tensor{}, ctx, cross_mask, true);
    }
    return ln(stack + ".lnf", x);
  }

  Var head(const char* kind, int layer, Var h_rows) const {
    std::string p = std::string("head.") + kind + "." + std::to_string(layer);
    return numkit::linear(t, h_rows, bind(p), bind(p + ".b"));
  }

  // ---- teacher-forced forward over one example ----

  struct TF {
    std::vector<Var> poi_by_layer;  // C entries of [K, W] logits
    std::vector<Var> img_by_layer;
    std::vector<std::vector<int>> poi_targets;
    std::vector<std::vector<int>> img_targets;
    int steps = 0;
  };

  TF teacher(const History& hist, const TargetSeq& y) const {
    if (y.empty()) throw ConfigError("target sequence is empty");
    if (static_cast<int>(y.size()) > g.cfg_.k) {
      throw TruncationError("target has " + std::to_string(y.size()) + " steps, model limit is " +
                            std::to_string(g.cfg_.k));
    }
    if (static_cast<int>(hist.size()) > g.cfg_.max_hist) {
      throw ConfigError("history longer than max_hist");
    }
    std::vector<int> rows = enc_rows(hist, 0);
    int valid = static_cast<int>(rows.size());
    return teacher_with_ctx(encoder(rows, valid), valid, y);
  }

  TF teacher_with_ctx(Var ctx, int ctx_valid, const TargetSeq& y) const {
    int K = static_cast<int>(y.size());
    TF out;
    out.steps = K;
    Var h_poi = decoder("pd", joint_rows(y), ctx, ctx_valid);
    Var h_img = decoder("cd", creative_rows(y), ctx, ctx_valid);
    for (int j = 0; j < C(); ++j) {
      std::vector<int> poi_pos, img_pos, poi_tgt, img_tgt;
      for (int s = 0; s < K; ++s) {
        poi_pos.push_back(poi_hidden_pos(s, j));
        img_pos.push_back(img_hidden_pos(s, j));
        poi_tgt.push_back(y[static_cast<size_t>(s)].poi.codes[static_cast<size_t>(j)]);
        img_tgt.push_back(y[static_cast<size_t>(s)].img.codes[static_cast<size_t>(j)]);
      }
      out.poi_by_layer.push_back(head("poi", j, t.gather_rows(h_poi, poi_pos)));
      out.img_by_layer.push_back(head("img", j, t.gather_rows(h_img, img_pos)));
      out.poi_targets.push_back(std::move(poi_tgt));
      out.img_targets.push_back(std::move(img_tgt));
    }
    return out;
  }

  // Per-step losses (sum over layers, mean over steps) for one example.
  std::pair<Var, Var> losses(const TF& tf) const {
    std::vector<Var> poi_terms, img_terms;
    for (int j = 0; j < C(); ++j) {
      poi_terms.push_back(t.cross_entropy(tf.poi_by_layer[static_cast<size_t>(j)],
                                          tf.poi_targets[static_cast<size_t>(j)]));
      img_terms.push_back(t.cross_entropy(tf.img_by_layer[static_cast<size_t>(j)],
                                          tf.img_targets[static_cast<size_t>(j)]));
    }
    return {t.vsum(poi_terms), t.vsum(img_terms)};
  }
};

namespace {

Tensor near_zero(std::vector<int> shape, Rng& rng, double s) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = s * rng.normal();
  return t;
}

}  // namespace

Generator::Generator(GenConfig cfg, uint64_t seed) : cfg_(cfg), opt_(AdamConfig{}) {
  if (cfg_.c < 1 || cfg_.w < 2 || cfg_.k < 1) throw ConfigError("need c >= 1, w >= 2, k >= 1");
  if (cfg_.d_model % cfg_.n_heads != 0) throw ConfigError("n_heads must divide d_model");
  if (cfg_.blocks < 1 || cfg_.max_hist < 1) throw ConfigError("need blocks >= 1, max_hist >= 1");
  if (cfg_.offset_mtp && !cfg_.joint_mtp) {
    throw ConfigError("offset_mtp requires joint creative conditioning");
  }
  int d = cfg_.d_model;
  int dh = d / cfg_.n_heads;
  Rng rng(Rng::derive(seed, 0x61));

  params_.add("emb.tok", near_zero({2 * cfg_.c * (cfg_.w + 2), d}, rng, 0.02));
  params_.add("pos.enc", near_zero({std::max(1, cfg_.max_hist * 2 * cfg_.c), d}, rng, 0.01));
  params_.add("pos.dec", near_zero({1 + cfg_.k * 2 * cfg_.c, d}, rng, 0.01));

  auto add_ln = [&](const std::string& p) {
    params_.add(p + ".g", Tensor::full({d}, 1.0));
    params_.add(p + ".b", Tensor::zeros({d}));
  };
  auto add_attn = [&](const std::string& p) {
    for (int h = 0; h < cfg_.n_heads; ++h) {
      std::string hs = std::to_string(h);
      params_.add(p + ".q" + hs, Tensor::xavier(d, dh, rng));
      params_.add(p + ".k" + hs, Tensor::xavier(d, dh, rng));
      params_.add(p + ".v" + hs, Tensor::xavier(d, dh, rng));
    }
    params_.add(p + ".o", Tensor::xavier(d, d, rng));
    params_.add(p + ".ob", Tensor::zeros({d}));
  };
  auto add_stack = [&](const std::string& s, bool cross) {
    for (int i = 0; i < cfg_.blocks; ++i) {
      add_ln(bname(s, i, "ln1"));
      add_attn(bname(s, i, "att"));
      if (cross) {
        add_ln(bname(s, i, "ln2"));
        add_attn(bname(s, i, "xat"));
      }
      add_ln(bname(s, i, "ln3"));
      params_.add(bname(s, i, "ffn") + ".w1", Tensor::xavier(d, cfg_.ffn, rng));
      params_.add(bname(s, i, "ffn") + ".b1", Tensor::zeros({cfg_.ffn}));
      params_.add(bname(s, i, "ffn") + ".w2", Tensor::xavier(cfg_.ffn, d, rng));
      params_.add(bname(s, i, "ffn") + ".b2", Tensor::zeros({d}));
    }
    add_ln(s + ".lnf");
  };
  add_stack("enc", false);
  add_stack("pd", true);
  add_stack("cd", true);

  // Heads start at zero so the first logits are exactly uniform; the initial
  // loss then equals C·ln(W) per step by construction.
  for (int j = 0; j < cfg_.c; ++j) {
    for (const char* kind : {"poi", "img"}) {
      std::string p = std::string("head.") + kind + "." + std::to_string(j);
      params_.add(p, Tensor::zeros({d, cfg_.w}));
      params_.add(p + ".b", Tensor::zeros({cfg_.w}));
    }
  }
}

EncodedContext Generator::encode_history(const History& hist, int pad_to_items) const {
  if (pad_to_items > cfg_.max_hist || static_cast<int>(hist.size()) > cfg_.max_hist) {
    throw ConfigError("history longer than max_hist");
  }
  Tape tape;
  GeneratorForward f(*this, tape);
  std::vector<int> rows = f.enc_rows(hist, pad_to_items);
  int valid = hist.empty() ? 1 : static_cast<int>(hist.size()) * 2 * cfg_.c;
  Var s_e = f.encoder(rows, valid);
  return {tape.val(s_e), valid};
}

Tensor Generator::poi_layer_state(const TargetSeq& prefix, const std::vector<int>& partial,
                                  const EncodedContext& ctx) const {
  if (static_cast<int>(prefix.size()) >= cfg_.k) throw ConfigError("prefix already has k steps");
  if (static_cast<int>(partial.size()) >= cfg_.c) throw ConfigError("token already complete");
  Tape tape;
  GeneratorForward f(*this, tape);
  std::vector<int> rows = f.joint_rows(prefix);
  for (size_t j = 0; j < partial.size(); ++j) {
    int code = partial[j];
    if (code < 0 || code >= cfg_.w) throw TokenError("partial code out of range");
    rows.push_back(f.tok_row(0, static_cast<int>(j), code));
  }
  Var ctx_var = tape.constant(ctx.s_e);
  Var h = f.decoder("pd", rows, ctx_var, ctx.valid);
  return tape.val(tape.gather_rows(h, {static_cast<int>(rows.size()) - 1}));
}

Tensor Generator::poi_layer_logits(const TargetSeq& prefix, const std::vector<int>& partial,
                                   const EncodedContext& ctx) const {
  Tensor state = poi_layer_state(prefix, partial, ctx);
  std::string p = "head.poi." + std::to_string(partial.size());
  Tensor logits = numkit::add_row(numkit::matmul(state, params_.get(p)), params_.get(p + ".b"));
  return Tensor({cfg_.w}, logits.data);
}

Tensor Generator::creative_layer_logits(const TargetSeq& prefix, const SemanticToken& a_poi,
                                        const std::vector<int>& partial,
                                        const EncodedContext& ctx) const {
  if (static_cast<int>(prefix.size()) >= cfg_.k) throw ConfigError("prefix already has k steps");
  if (static_cast<int>(partial.size()) >= cfg_.c) throw ConfigError("token already complete");
  Tape tape;
  GeneratorForward f(*this, tape);
  f.check_token(a_poi, "conditioning poi token");
  std::vector<int> rows;
  if (cfg_.joint_mtp && !cfg_.offset_mtp) {
    rows = f.joint_rows(prefix);
    f.append_token(rows, 0, a_poi);
  } else if (!cfg_.joint_mtp) {
    rows.push_back(f.tok_row(0, 0, f.bos()));
    for (const auto& pair : prefix) f.append_token(rows, 1, pair.img);
  } else {
    // offset mode: block s is [poi of step s+1, img of step s] and a_poi is
    // the successor POI of the current step. The final prefix block's POI
    // slot is not derivable from the arguments, so it degrades to PAD.
    rows.push_back(f.tok_row(0, 0, f.bos()));
    int n_prefix = static_cast<int>(prefix.size());
    for (int s = 0; s < n_prefix; ++s) {
      if (s + 1 < n_prefix) {
        f.append_token(rows, 0, prefix[static_cast<size_t>(s + 1)].poi);
      } else {
        for (int j = 0; j < cfg_.c; ++j) rows.push_back(f.tok_row(0, j, f.pad()));
      }
      f.append_token(rows, 1, prefix[static_cast<size_t>(s)].img);
    }
    f.append_token(rows, 0, a_poi);
  }
  for (size_t j = 0; j < partial.size(); ++j) {
    int code = partial[j];
    if (code < 0 || code >= cfg_.w) throw TokenError("partial code out of range");
    rows.push_back(f.tok_row(1, static_cast<int>(j), code));
  }
  Var ctx_var = tape.constant(ctx.s_e);
  Var h = f.decoder("cd", rows, ctx_var, ctx.valid);
  Var logits = f.head("img", static_cast<int>(partial.size()),
                      tape.gather_rows(h, {static_cast<int>(rows.size()) - 1}));
  return Tensor({cfg_.w}, tape.val(logits).data);
}

namespace {

int argmax_row(const Tensor& row) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(row.data.size()); ++i) {
    if (row.data[static_cast<size_t>(i)] > row.data[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace

Tensor Generator::decode_poi_step(const TargetSeq& prefix, const EncodedContext& ctx) const {
  Tensor out = Tensor::zeros({cfg_.c, cfg_.w});
  std::vector<int> partial;
  for (int j = 0; j < cfg_.c; ++j) {
    Tensor logits = poi_layer_logits(prefix, partial, ctx);
    for (int i = 0; i < cfg_.w; ++i) out.at(j, i) = logits.at(i);
    partial.push_back(argmax_row(logits));
  }
  return out;
}

Tensor Generator::decode_creative_step(const TargetSeq& prefix, const SemanticToken& a_poi,
                                       const EncodedContext& ctx) const {
  Tensor out = Tensor::zeros({cfg_.c, cfg_.w});
  std::vector<int> partial;
  for (int j = 0; j < cfg_.c; ++j) {
    Tensor logits = creative_layer_logits(prefix, a_poi, partial, ctx);
    for (int i = 0; i < cfg_.w; ++i) out.at(j, i) = logits.at(i);
    partial.push_back(argmax_row(logits));
  }
  return out;
}

std::pair<Tensor, Tensor> Generator::teacher_logits(const History& hist, const TargetSeq& y) const {
  Tape tape;
  GeneratorForward f(*this, tape);
  GeneratorForward::TF tf = f.teacher(hist, y);
  int K = tf.steps;
  Tensor poi = Tensor::zeros({K * cfg_.c, cfg_.w});
  Tensor img = Tensor::zeros({K * cfg_.c, cfg_.w});
  for (int j = 0; j < cfg_.c; ++j) {
    const Tensor& pj = tape.val(tf.poi_by_layer[static_cast<size_t>(j)]);
    const Tensor& ij = tape.val(tf.img_by_layer[static_cast<size_t>(j)]);
    for (int s = 0; s < K; ++s) {
      for (int w = 0; w < cfg_.w; ++w) {
        poi.at(s * cfg_.c + j, w) = pj.at(s, w);
        img.at(s * cfg_.c + j, w) = ij.at(s, w);
      }
    }
  }
  return {poi, img};
}

double Generator::joint_log_prob(const History& hist, const TargetSeq& y) const {
  auto [poi, img] = teacher_logits(hist, y);
  auto log_pick = [this](const Tensor& logits, int row, int code) {
    double mx = -1e300;
    for (int w = 0; w < cfg_.w; ++w) mx = std::max(mx, logits.at(row, w));
    double z = 0.0;
    for (int w = 0; w < cfg_.w; ++w) z += std::exp(logits.at(row, w) - mx);
    double lp = logits.at(row, code) - mx - std::log(z);
    return std::max(lp, std::log(1e-12));
  };
  double total = 0.0;
  for (int s = 0; s < static_cast<int>(y.size()); ++s) {
    for (int j = 0; j < cfg_.c; ++j) {
      total += log_pick(poi, s * cfg_.c + j, y[static_cast<size_t>(s)].poi.codes[static_cast<size_t>(j)]);
      total += log_pick(img, s * cfg_.c + j, y[static_cast<size_t>(s)].img.codes[static_cast<size_t>(j)]);
    }
  }
  return total;
}

GradMap Generator::loss_grads(const std::vector<std::pair<History, TargetSeq>>& batch,
                              PretrainStats* stats) const {
  if (batch.empty()) throw ConfigError("empty pretrain batch");
  Tape tape;
  GeneratorForward f(*this, tape);
  std::vector<Var> ntp_terms, mtp_terms;
  for (const auto& [hist, y] : batch) {
    GeneratorForward::TF tf = f.teacher(hist, y);
    auto [l_ntp, l_mtp] = f.losses(tf);
    ntp_terms.push_back(l_ntp);
    mtp_terms.push_back(l_mtp);
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  Var l_ntp = tape.scale(tape.vsum(ntp_terms), inv);
  Var l_mtp = tape.scale(tape.vsum(mtp_terms), inv);
  Var loss = tape.add(l_ntp, l_mtp);
  if (stats) {
    stats->l_ntp = tape.val(l_ntp).item();
    stats->l_mtp = tape.val(l_mtp).item();
    stats->l_total = tape.val(loss).item();
  }
  tape.backward(loss);
  return f.bind.grads();
}

PretrainStats Generator::eval_losses(const std::vector<std::pair<History, TargetSeq>>& batch) const {
  if (batch.empty()) throw ConfigError("empty pretrain batch");
  Tape tape;
  GeneratorForward f(*this, tape);
  PretrainStats stats;
  for (const auto& [hist, y] : batch) {
    GeneratorForward::TF tf = f.teacher(hist, y);
    auto [l_ntp, l_mtp] = f.losses(tf);
    stats.l_ntp += tape.val(l_ntp).item();
    stats.l_mtp += tape.val(l_mtp).item();
  }
  stats.l_ntp /= static_cast<double>(batch.size());
  stats.l_mtp /= static_cast<double>(batch.size());
  stats.l_total = stats.l_ntp + stats.l_mtp;
  return stats;
}

PretrainStats Generator::pretrain_step(const std::vector<std::pair<History, TargetSeq>>& batch) {
  PretrainStats stats;
  GradMap grads = loss_grads(batch, &stats);
  opt_.step(params_, grads);
  return stats;
}

void Generator::save(const std::string& path) const {
  Checkpoint ck;
  ck.manifest["kind"] = "generator";
  ck.manifest["c"] = cfg_.c;
  ck.manifest["w"] = cfg_.w;
  ck.manifest["k"] = cfg_.k;
  ck.manifest["d_model"] = cfg_.d_model;
  ck.manifest["n_heads"] = cfg_.n_heads;
  ck.manifest["ffn"] = cfg_.ffn;
  ck.manifest["blocks"] = cfg_.blocks;
  ck.manifest["max_hist"] = cfg_.max_hist;
  ck.manifest["joint_mtp"] = cfg_.joint_mtp;
  ck.manifest["offset_mtp"] = cfg_.offset_mtp;
  ck.put_params("p.", params_);
  ck.put_adam("opt.", opt_);
  ck.save(path);
}

Generator Generator::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "generator") {
    throw IncompatibilityError(path + " is not a generator checkpoint");
  }
  GenConfig cfg;
  cfg.c = ck.manifest.at("c").get<int>();
  cfg.w = ck.manifest.at("w").get<int>();
  cfg.k = ck.manifest.at("k").get<int>();
  cfg.d_model = ck.manifest.at("d_model").get<int>();
  cfg.n_heads = ck.manifest.at("n_heads").get<int>();
  cfg.ffn = ck.manifest.at("ffn").get<int>();
  cfg.blocks = ck.manifest.at("blocks").get<int>();
  cfg.max_hist = ck.manifest.at("max_hist").get<int>();
  cfg.joint_mtp = ck.manifest.at("joint_mtp").get<bool>();
  cfg.offset_mtp = ck.manifest.at("offset_mtp").get<bool>();
  Generator g(cfg, 0);
  ck.read_params("p.", g.params_);
  ck.read_adam("opt.", g.opt_);
  return g;
}

}  // namespace genad::generator
