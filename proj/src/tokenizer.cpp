#include "genad/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "genad/checkpoint.hpp"
#include "genad/errors.hpp"
#include "genad/numkit/tape.hpp"
#include "genad/rng.hpp"

namespace genad::tokenizer {

using numkit::Adam;
using numkit::AdamConfig;
using numkit::Binder;
using numkit::GradMap;
using numkit::ParamStore;
using numkit::Tape;
using numkit::Var;

namespace {

constexpr double kCommitWeight = 0.25;
constexpr double kEmaDecay = 0.99;
constexpr int kDeadAfterSteps = 50;
constexpr int kBatch = 64;

Tensor mlp2_fast(const ParamStore& p, const std::string& prefix, const Tensor& x) {
  Tensor h = numkit::tanh_t(numkit::add_row(numkit::matmul(x, p.get(prefix + ".w1")),
                                            p.get(prefix + ".b1")));
  return numkit::add_row(numkit::matmul(h, p.get(prefix + ".w2")), p.get(prefix + ".b2"));
}

Var mlp2_tape(Tape& t, Binder& bind, const std::string& prefix, Var x) {
  Var h = t.tanh_(t.add_row(t.matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
  return t.add_row(t.matmul(h, bind(prefix + ".w2")), bind(prefix + ".b2"));
}

int nearest_code(const Tensor& codebook, const double* residual, int d) {
  int best = 0;
  double best_dist = 1e300;
  int w = codebook.shape[0];
  for (int k = 0; k < w; ++k) {
    const double* code = codebook.data.data() + static_cast<size_t>(k) * d;
    double dist = 0.0;
    for (int j = 0; j < d; ++j) {
      double diff = residual[j] - code[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {  // strict: ties keep the lowest index
      best_dist = dist;
      best = k;
    }
  }
  return best;
}

// One k-means++ seeding followed by Lloyd passes; returns centers and SSE.
std::pair<Tensor, double> kmeans_once(const Tensor& points, int w, Rng& rng) {
  int n = points.shape[0], d = points.shape[1];
  Tensor centers = Tensor::zeros({w, d});
  std::vector<double> min_dist(static_cast<size_t>(n), 1e300);
  int first = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
  for (int i = 0; i < d; ++i) centers.at(0, i) = points.at(first, i);
  for (int k = 1; k < w; ++k) {
    double total = 0.0;
    for (int p = 0; p < n; ++p) {
      double dist = 0.0;
      for (int i = 0; i < d; ++i) {
        double diff = points.at(p, i) - centers.at(k - 1, i);
        dist += diff * diff;
      }
      min_dist[static_cast<size_t>(p)] = std::min(min_dist[static_cast<size_t>(p)], dist);
      total += min_dist[static_cast<size_t>(p)];
    }
    double r = rng.uniform() * total;
    double acc = 0.0;
    int pick = n - 1;
    for (int p = 0; p < n; ++p) {
      acc += min_dist[static_cast<size_t>(p)];
      if (r <= acc) {
        pick = p;
        break;
      }
    }
    for (int i = 0; i < d; ++i) centers.at(k, i) = points.at(pick, i);
  }
  double sse = 0.0;
  for (int pass = 0; pass < 12; ++pass) {
    Tensor sums = Tensor::zeros({w, d});
    std::vector<int> counts(static_cast<size_t>(w), 0);
    sse = 0.0;
    for (int p = 0; p < n; ++p) {
      const double* row = points.data.data() + static_cast<size_t>(p) * d;
      int k = nearest_code(centers, row, d);
      counts[static_cast<size_t>(k)]++;
      for (int i = 0; i < d; ++i) {
        sums.at(k, i) += row[i];
        double diff = row[i] - centers.at(k, i);
        sse += diff * diff;
      }
    }
    for (int k = 0; k < w; ++k) {
      if (counts[static_cast<size_t>(k)] == 0) continue;
      for (int i = 0; i < d; ++i) centers.at(k, i) = sums.at(k, i) / counts[static_cast<size_t>(k)];
    }
  }
  return {centers, sse};
}

// Warm-start for one codebook: several k-means++ restarts, keep the lowest
// SSE so a bad Lloyd basin on one seeding cannot pollute the codebook.
Tensor kmeans_codes(const Tensor& points, int w, Rng& rng) {
  Tensor best;
  double best_sse = 1e300;
  for (int restart = 0; restart < 6; ++restart) {
    auto [centers, sse] = kmeans_once(points, w, rng);
    if (sse < best_sse) {
      best_sse = sse;
      best = centers;
    }
  }
  return best;
}

}  // namespace

Tensor TokenizerModel::standardize(const Tensor& x) const {
  Tensor x2 = x.rank() == 1 ? Tensor({1, x.shape[0]}, x.data) : x;
  for (int i = 0; i < x2.shape[0]; ++i) {
    for (int j = 0; j < d; ++j) {
      x2.at(i, j) = (x2.at(i, j) - in_mean.at(j)) / in_scale.at(j);
    }
  }
  return x2;
}

Tensor TokenizerModel::encode_latent(const Tensor& x) const {
  return mlp2_fast(mlp, "enc", standardize(x));
}

SemanticToken TokenizerModel::encode(const Tensor& embedding) const {
  if (codebooks.empty()) throw TokenError("tokenizer has no trained codebooks");
  Tensor z = encode_latent(embedding);
  std::vector<double> residual(z.data.begin(), z.data.begin() + d);
  SemanticToken tok;
  for (int j = 0; j < C; ++j) {
    int k = nearest_code(codebooks[static_cast<size_t>(j)], residual.data(), d);
    tok.codes.push_back(k);
    const double* code = codebooks[static_cast<size_t>(j)].data.data() + static_cast<size_t>(k) * d;
    for (int i = 0; i < d; ++i) residual[static_cast<size_t>(i)] -= code[i];
  }
  return tok;
}

std::vector<double> TokenizerModel::residual_norms(const Tensor& embedding) const {
  Tensor z = encode_latent(embedding);
  std::vector<double> residual(z.data.begin(), z.data.begin() + d);
  std::vector<double> norms;
  for (int j = 0; j < C; ++j) {
    int k = nearest_code(codebooks[static_cast<size_t>(j)], residual.data(), d);
    const double* code = codebooks[static_cast<size_t>(j)].data.data() + static_cast<size_t>(k) * d;
    double norm = 0.0;
    for (int i = 0; i < d; ++i) {
      residual[static_cast<size_t>(i)] -= code[i];
      norm += residual[static_cast<size_t>(i)] * residual[static_cast<size_t>(i)];
    }
    norms.push_back(std::sqrt(norm));
  }
  return norms;
}

Tensor TokenizerModel::code_vector_sum(const SemanticToken& token) const {
  if (static_cast<int>(token.codes.size()) != C) {
    throw TokenError("token has " + std::to_string(token.codes.size()) + " layers, expected " +
                     std::to_string(C));
  }
  Tensor sum = Tensor::zeros({1, d});
  for (int j = 0; j < C; ++j) {
    int k = token.codes[static_cast<size_t>(j)];
    if (k < 0 || k >= W) {
      throw TokenError("code index " + std::to_string(k) + " out of range [0," + std::to_string(W) +
                       ") at layer " + std::to_string(j + 1));
    }
    const double* code = codebooks[static_cast<size_t>(j)].data.data() + static_cast<size_t>(k) * d;
    for (int i = 0; i < d; ++i) sum.data[static_cast<size_t>(i)] += code[i];
  }
  return sum;
}

Tensor TokenizerModel::decode_latent(const Tensor& latent_sum) const {
  Tensor x2 = latent_sum.rank() == 1 ? Tensor({1, latent_sum.shape[0]}, latent_sum.data) : latent_sum;
  Tensor out = mlp2_fast(mlp, "dec", x2);
  for (int j = 0; j < d; ++j) {
    out.data[static_cast<size_t>(j)] = out.data[static_cast<size_t>(j)] * in_scale.at(j) + in_mean.at(j);
  }
  return Tensor({d}, out.data);
}

Tensor TokenizerModel::decode(const SemanticToken& token) const {
  return decode_latent(code_vector_sum(token));
}

TokenizerModel train_rqvae(uint64_t seed, const Tensor& embeddings, int C, int W, int epochs,
                           double lr, TrainReport* report) {
  if (embeddings.rank() != 2) throw ShapeError("embeddings must be [n,d]");
  int n = embeddings.shape[0];
  int d = embeddings.shape[1];
  if (C < 1 || W < 2) throw ConfigError("need C >= 1 and W >= 2");

  TrainReport local;
  TrainReport& rep = report ? *report : local;

  int eff_w = W;
  if (n < W) {
    eff_w = std::max(2, n);
    rep.warnings.push_back("only " + std::to_string(n) + " embeddings for codebook size " +
                           std::to_string(W) + "; reduced to " + std::to_string(eff_w));
    std::cerr << "tokenizer: " << rep.warnings.back() << "\n";
  }

  Rng rng(Rng::derive(seed, 0x51));
  TokenizerModel model;
  model.C = C;
  model.W = eff_w;
  model.d = d;
  // Center per-dim but scale isotropically: a single global scale keeps tanh
  // in range without warping cluster geometry the way per-dim scaling would.
  model.in_mean = Tensor::zeros({d});
  model.in_scale = Tensor::full({d}, 1.0);
  double total_var = 0.0;
  for (int j = 0; j < d; ++j) {
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      mean += embeddings.at(i, j);
      sq += embeddings.at(i, j) * embeddings.at(i, j);
    }
    mean /= n;
    total_var += std::max(sq / n - mean * mean, 0.0);
    model.in_mean.at(j) = mean;
  }
  double global_scale = std::sqrt(total_var / d) + 1e-6;
  for (int j = 0; j < d; ++j) model.in_scale.at(j) = global_scale;
  // near-identity init: the latent starts as a lightly squashed copy of the
  // standardized input, so cluster geometry survives into codebook space
  auto near_identity = [&rng, d](double gain) {
    Tensor t = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) t.at(i, j) = (i == j ? gain : 0.0) + 0.02 * rng.normal();
    }
    return t;
  };
  model.mlp.add("enc.w1", near_identity(0.5));
  model.mlp.add("enc.b1", Tensor::zeros({d}));
  model.mlp.add("enc.w2", near_identity(2.16));
  model.mlp.add("enc.b2", Tensor::zeros({d}));
  model.mlp.add("dec.w1", near_identity(0.5));
  model.mlp.add("dec.b1", Tensor::zeros({d}));
  model.mlp.add("dec.w2", near_identity(2.16));
  model.mlp.add("dec.b2", Tensor::zeros({d}));

  // warm-start each codebook on the residuals entering its layer
  Tensor residual0 = model.encode_latent(embeddings);
  std::vector<Tensor> ema_sum, ema_count;
  std::vector<std::vector<int>> since_used(static_cast<size_t>(C),
                                           std::vector<int>(static_cast<size_t>(eff_w), 0));
  for (int j = 0; j < C; ++j) {
    Tensor cb = kmeans_codes(residual0, eff_w, rng);
    for (int p = 0; p < n; ++p) {
      double* r = residual0.data.data() + static_cast<size_t>(p) * d;
      int k = nearest_code(cb, r, d);
      for (int i = 0; i < d; ++i) r[i] -= cb.at(k, i);
    }
    model.codebooks.push_back(cb);
    ema_sum.push_back(model.codebooks.back());
    ema_count.push_back(Tensor::full({eff_w}, 1.0));
  }

  Adam opt(AdamConfig{.lr = lr});
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  // Full-catalog loss under the current parameters (recon MSE + commitment),
  // evaluated without a tape. Used to accept or roll back whole epochs.
  auto full_loss = [&]() {
    Tensor x = model.standardize(embeddings);
    Tensor z = mlp2_fast(model.mlp, "enc", x);
    Tensor q = Tensor::zeros({n, d});
    Tensor residual = z;
    for (int j = 0; j < C; ++j) {
      for (int b = 0; b < n; ++b) {
        double* r = residual.data.data() + static_cast<size_t>(b) * d;
        int k = nearest_code(model.codebooks[static_cast<size_t>(j)], r, d);
        const double* code =
            model.codebooks[static_cast<size_t>(j)].data.data() + static_cast<size_t>(k) * d;
        for (int i = 0; i < d; ++i) {
          q.at(b, i) += code[i];
          r[i] -= code[i];
        }
      }
    }
    Tensor recon = mlp2_fast(model.mlp, "dec", q);
    double lrec = 0.0, lcom = 0.0;
    for (size_t idx = 0; idx < z.data.size(); ++idx) {
      double dr = recon.data[idx] - x.data[idx];
      double dc = z.data[idx] - q.data[idx];
      lrec += dr * dr;
      lcom += dc * dc;
    }
    return (lrec + kCommitWeight * lcom) / static_cast<double>(z.data.size());
  };

  double prev_loss = full_loss();
  double lr_mult = 1.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // linear decay settles the tail; lr_mult shrinks whenever an epoch is
    // rolled back, so the recorded loss sequence is non-increasing
    double frac = epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 0.0;
    opt.set_lr(lr * lr_mult * (1.0 - 0.9 * frac));
    ParamStore mlp_snap = model.mlp;
    std::vector<Tensor> cb_snap = model.codebooks;
    std::vector<Tensor> ema_sum_snap = ema_sum;
    std::vector<Tensor> ema_count_snap = ema_count;
    std::vector<std::vector<int>> used_snap = since_used;
    Adam opt_snap = opt;
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int start = 0; start < n; start += kBatch) {
      int bs = std::min(kBatch, n - start);
      std::vector<int> rows(order.begin() + start, order.begin() + start + bs);
      Tensor x = model.standardize(numkit::gather_rows(embeddings, rows));

      Tape tape;
      Binder bind(tape, model.mlp);
      Var xv = tape.constant(x);
      Var z = mlp2_tape(tape, bind, "enc", xv);
      const Tensor& z_val = tape.val(z);

      // greedy residual quantization (no gradient through the code choice)
      Tensor q_val = Tensor::zeros({bs, d});
      std::vector<Tensor> layer_resid;  // residuals entering each layer
      std::vector<std::vector<int>> layer_assign;
      Tensor residual = z_val;
      for (int j = 0; j < C; ++j) {
        layer_resid.push_back(residual);
        std::vector<int> assign(static_cast<size_t>(bs));
        for (int b = 0; b < bs; ++b) {
          double* r = residual.data.data() + static_cast<size_t>(b) * d;
          int k = nearest_code(model.codebooks[static_cast<size_t>(j)], r, d);
          assign[static_cast<size_t>(b)] = k;
          const double* code =
              model.codebooks[static_cast<size_t>(j)].data.data() + static_cast<size_t>(k) * d;
          for (int i = 0; i < d; ++i) {
            q_val.at(b, i) += code[i];
            r[i] -= code[i];
          }
        }
        layer_assign.push_back(std::move(assign));
      }

      // straight-through: decoder sees z + stopgrad(q - z)
      Var ste = tape.add_const(z, numkit::sub(q_val, z_val));
      Var recon = mlp2_tape(tape, bind, "dec", ste);
      Var diff = tape.add_const(recon, numkit::scale(x, -1.0));
      Var loss_rec = tape.mean(tape.mul(diff, diff));
      Var commit = tape.add_const(z, numkit::scale(q_val, -1.0));
      Var loss_commit = tape.mean(tape.mul(commit, commit));
      Var loss = tape.add(loss_rec, tape.scale(loss_commit, kCommitWeight));
      tape.backward(loss);
      opt.step(model.mlp, bind.grads());

      // EMA codebook update + dead-code reinit
      for (int j = 0; j < C; ++j) {
        Tensor& cb = model.codebooks[static_cast<size_t>(j)];
        Tensor& msum = ema_sum[static_cast<size_t>(j)];
        Tensor& mcount = ema_count[static_cast<size_t>(j)];
        std::vector<double> batch_count(static_cast<size_t>(eff_w), 0.0);
        Tensor batch_sum = Tensor::zeros({eff_w, d});
        const Tensor& rin = layer_resid[static_cast<size_t>(j)];
        for (int b = 0; b < bs; ++b) {
          int k = layer_assign[static_cast<size_t>(j)][static_cast<size_t>(b)];
          batch_count[static_cast<size_t>(k)] += 1.0;
          for (int i = 0; i < d; ++i) batch_sum.at(k, i) += rin.at(b, i);
        }
        for (int k = 0; k < eff_w; ++k) {
          mcount.at(k) = kEmaDecay * mcount.at(k) + (1.0 - kEmaDecay) * batch_count[static_cast<size_t>(k)];
          for (int i = 0; i < d; ++i) {
            msum.at(k, i) = kEmaDecay * msum.at(k, i) + (1.0 - kEmaDecay) * batch_sum.at(k, i);
            cb.at(k, i) = msum.at(k, i) / std::max(mcount.at(k), 1e-5);
          }
          auto& used = since_used[static_cast<size_t>(j)][static_cast<size_t>(k)];
          used = batch_count[static_cast<size_t>(k)] > 0.0 ? 0 : used + 1;
          if (used >= kDeadAfterSteps) {
            int row = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(bs)));
            for (int i = 0; i < d; ++i) {
              cb.at(k, i) = rin.at(row, i);
              msum.at(k, i) = rin.at(row, i);
            }
            mcount.at(k) = 1.0;
            used = 0;
          }
        }
      }
    }
    double cur = full_loss();
    if (cur <= prev_loss + 1e-12) {
      prev_loss = cur;
    } else {
      // the epoch hurt: restore everything and take smaller steps from now on
      model.mlp = std::move(mlp_snap);
      model.codebooks = std::move(cb_snap);
      ema_sum = std::move(ema_sum_snap);
      ema_count = std::move(ema_count_snap);
      since_used = std::move(used_snap);
      opt = std::move(opt_snap);
      lr_mult *= 0.5;
    }
    rep.epoch_loss.push_back(prev_loss);
  }

  std::vector<double> avg_norms(static_cast<size_t>(C), 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor row = numkit::gather_rows(embeddings, {i});
    auto norms = model.residual_norms(row);
    for (int j = 0; j < C; ++j) avg_norms[static_cast<size_t>(j)] += norms[static_cast<size_t>(j)] / n;
  }
  rep.final_residual_norms = avg_norms;
  return model;
}

int TokenIndex::collisions() const {
  int total = 0;
  for (const auto& [tok, rows] : inverse) {
    if (rows.size() > 1) total += static_cast<int>(rows.size());
  }
  return total;
}

TokenIndex build_index(const TokenizerModel& model, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw ShapeError("embeddings must be [n,d]");
  TokenIndex index;
  for (int i = 0; i < embeddings.shape[0]; ++i) {
    SemanticToken tok = model.encode(numkit::gather_rows(embeddings, {i}));
    index.inverse[tok].push_back(i);
    index.forward.push_back(std::move(tok));
  }
  return index;
}

void save_tokenizer(const TokenizerModel& model, const std::string& path) {
  Checkpoint ck;
  ck.manifest["kind"] = "tokenizer";
  ck.manifest["C"] = model.C;
  ck.manifest["W"] = model.W;
  ck.manifest["d_code"] = model.d;
  for (int j = 0; j < model.C; ++j) {
    ck.put("codebook." + std::to_string(j), model.codebooks[static_cast<size_t>(j)]);
  }
  ck.put("in_mean", model.in_mean);
  ck.put("in_scale", model.in_scale);
  ck.put_params("mlp.", model.mlp);
  ck.save(path);
}

TokenizerModel load_tokenizer(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "tokenizer") {
    throw IncompatibilityError(path + " is not a tokenizer checkpoint");
  }
  TokenizerModel model;
  model.C = ck.manifest.at("C").get<int>();
  model.W = ck.manifest.at("W").get<int>();
  model.d = ck.manifest.at("d_code").get<int>();
  for (int j = 0; j < model.C; ++j) {
    model.codebooks.push_back(ck.get("codebook." + std::to_string(j)));
  }
  model.in_mean = ck.get("in_mean");
  model.in_scale = ck.get("in_scale");
  int d = model.d;
  model.mlp.add("enc.w1", Tensor::zeros({d, d}));
  model.mlp.add("enc.b1", Tensor::zeros({d}));
  model.mlp.add("enc.w2", Tensor::zeros({d, d}));
  model.mlp.add("enc.b2", Tensor::zeros({d}));
  model.mlp.add("dec.w1", Tensor::zeros({d, d}));
  model.mlp.add("dec.b1", Tensor::zeros({d}));
  model.mlp.add("dec.w2", Tensor::zeros({d, d}));
  model.mlp.add("dec.b2", Tensor::zeros({d}));
  ck.read_params("mlp.", model.mlp);
  return model;
}

}  // namespace genad::tokenizer
