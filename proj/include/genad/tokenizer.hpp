#pragma once

#include <map>
#include <string>
#include <vector>

#include "genad/numkit/params.hpp"
#include "genad/numkit/tensor.hpp"

namespace genad::tokenizer {

using numkit::Tensor;

// Hierarchical code tuple (a^1,...,a^C), one index per codebook layer.
struct SemanticToken {
  std::vector<int> codes;
  bool operator==(const SemanticToken& o) const { return codes == o.codes; }
  bool operator<(const SemanticToken& o) const { return codes < o.codes; }
};

// Residual quantizer: 2-layer tanh encoder/decoder MLPs around C codebooks of
// W code vectors each, all in the embedding dimension d.
struct TokenizerModel {
  int C = 0;
  int W = 0;  // effective size (may be below the requested one)
  int d = 0;
  std::vector<Tensor> codebooks;  // C entries of [W, d]
  numkit::ParamStore mlp;         // enc.* / dec.*
  // per-dim input standardization keeps tanh in its useful range
  Tensor in_mean;   // [d]
  Tensor in_scale;  // [d]

  Tensor standardize(const Tensor& x) const;    // [n,d] -> [n,d]
  Tensor encode_latent(const Tensor& x) const;  // [n,d] -> [n,d]
  SemanticToken encode(const Tensor& embedding) const;
  // L2 norm of the quantization residual after each layer (front = layer 1).
  std::vector<double> residual_norms(const Tensor& embedding) const;
  Tensor decode(const SemanticToken& token) const;  // [d]
  // Decoder applied to a raw latent sum (used by downstream feature builders).
  Tensor decode_latent(const Tensor& latent_sum) const;
  Tensor code_vector_sum(const SemanticToken& token) const;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // recon + 0.25 * commitment over the full
                                   // catalog after each epoch; non-increasing
                                   // because regressing epochs are rolled back
  std::vector<double> final_residual_norms;
  std::vector<std::string> warnings;
};

TokenizerModel train_rqvae(uint64_t seed, const Tensor& embeddings, int C, int W, int epochs,
                           double lr, TrainReport* report = nullptr);

// item row index <-> token maps over one embedding matrix.
struct TokenIndex {
  std::vector<SemanticToken> forward;            // row -> token
  std::map<SemanticToken, std::vector<int>> inverse;  // token -> rows

  int collisions() const;  // rows sharing a token with some other row
};

TokenIndex build_index(const TokenizerModel& model, const Tensor& embeddings);

void save_tokenizer(const TokenizerModel& model, const std::string& path);
TokenizerModel load_tokenizer(const std::string& path);

}  // namespace genad::tokenizer
