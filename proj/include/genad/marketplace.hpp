#pragma once

#include <string>
#include <vector>

#include "genad/numkit/tensor.hpp"
#include "genad/rng.hpp"

namespace genad::marketplace {

using numkit::Tensor;

struct Creative {
  int id = 0;  // local to its POI
  Tensor e_img;
  double quality = 0.5;  // in [0,1]
};

struct Poi {
  int id = 0;
  Tensor e_poi;
  double price = 1.0;  // scalar GMV proxy per conversion
  int cluster = 0;
  std::vector<Creative> creatives;
};

struct Catalog {
  int d_poi = 0;
  int d_img = 0;
  int n_clusters = 1;
  std::vector<Poi> pois;
  std::vector<Tensor> cluster_centers;

  const Poi& poi(int id) const;
  const Creative& creative(int poi_id, int creative_id) const;
  int n_creatives_per_poi() const;
  // All POI embeddings stacked [n_poi, d_poi]; row index == poi id.
  Tensor poi_matrix() const;
  // All creative embeddings stacked [n_poi * n_cr, d_img];
  // row index == poi_id * n_cr + creative_id.
  Tensor creative_matrix() const;
};

// Hidden behavioral ground truth. Learned components must never read this or
// the per-request user latent; only the simulator and evaluators do.
struct ClickOracle {
  Tensor m_ctr;  // [d_user, d_poi] logistic weights
  Tensor m_cvr;
  double quality_coef_ctr = 1.0;
  double quality_coef_cvr = 0.6;
  double bias_ctr = -2.0;
  double bias_cvr = -2.5;
  double decay_exp = 0.6;

  // Click probability before position decay, at a given creative quality.
  double ctr_core(const Tensor& user, const Tensor& e_poi, double quality) const;
  // slot is 1-based; decay = slot^-decay_exp.
  double true_ctr(const Tensor& user, const Poi& poi, const Creative& cr, int slot) const;
  double true_cvr(const Tensor& user, const Poi& poi, const Creative& cr) const;
  // Expected GMV if shown at slot 1: price * ctr_core * cvr.
  double gmv_proxy(const Tensor& user, const Poi& poi) const;
};

struct World {
  Catalog catalog;
  ClickOracle oracle;
};

struct AdCandidate {
  int poi_id = 0;
  std::vector<int> creative_ids;
  double value = 0.0;  // private click value
  double bid = 0.0;    // == value under truthful generation
};

struct OrganicItem {
  int poi_id = 0;
  int pre_rank = 0;  // 0 = best by upstream GMV order
};

struct Request {
  int user_id = 0;
  Tensor user_latent;  // oracle-only ground truth
  std::vector<std::pair<int, int>> history;  // (poi_id, creative_id), length <= B
  std::vector<AdCandidate> ads;
  std::vector<OrganicItem> organics;
  int K = 1;
};

World gen_world(uint64_t seed, int n_poi, int n_creatives_per_poi, int d_poi, int d_img,
                int n_clusters);
Request gen_request(uint64_t seed, const World& world, int B, int N, int M, int K);

// One displayed row of a resolved allocation, in slot order.
struct DisplayItem {
  int poi_id = 0;
  int creative_id = 0;
  bool is_ad = false;
  double bid = 0.0;
};

struct Feedback {
  int click = 0;
  int conversion = 0;
  double p_click = 0.0;  // oracle probability behind the draw
  double p_conv = 0.0;
};

std::vector<Feedback> sample_feedback(uint64_t seed, const World& world, const Tensor& user_latent,
                                      const std::vector<DisplayItem>& shown);

// Line-delimited serialization (one JSON record per line).
void save_world(const World& world, const std::string& catalog_path,
                const std::string& oracle_path);
World load_world(const std::string& catalog_path, const std::string& oracle_path);
void save_requests(const std::vector<Request>& requests, const std::string& path);
std::vector<Request> load_requests(const std::string& path);

}  // namespace genad::marketplace
