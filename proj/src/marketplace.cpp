#include "genad/marketplace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "genad/errors.hpp"

namespace genad::marketplace {

using nlohmann::json;

const Poi& Catalog::poi(int id) const {
  if (id < 0 || id >= static_cast<int>(pois.size())) {
    throw IndexError("poi id " + std::to_string(id) + " out of range");
  }
  return pois[static_cast<size_t>(id)];
}

const Creative& Catalog::creative(int poi_id, int creative_id) const {
  const Poi& p = poi(poi_id);
  if (creative_id < 0 || creative_id >= static_cast<int>(p.creatives.size())) {
    throw IndexError("creative id " + std::to_string(creative_id) + " out of range for poi " +
                     std::to_string(poi_id));
  }
  return p.creatives[static_cast<size_t>(creative_id)];
}

int Catalog::n_creatives_per_poi() const {
  return pois.empty() ? 0 : static_cast<int>(pois[0].creatives.size());
}

Tensor Catalog::poi_matrix() const {
  Tensor m = Tensor::zeros({static_cast<int>(pois.size()), d_poi});
  for (size_t i = 0; i < pois.size(); ++i) {
    std::copy(pois[i].e_poi.data.begin(), pois[i].e_poi.data.end(),
              m.data.begin() + static_cast<long>(i) * d_poi);
  }
  return m;
}

Tensor Catalog::creative_matrix() const {
  int n_cr = n_creatives_per_poi();
  Tensor m = Tensor::zeros({static_cast<int>(pois.size()) * n_cr, d_img});
  for (size_t i = 0; i < pois.size(); ++i) {
    for (int c = 0; c < n_cr; ++c) {
      const Tensor& e = pois[i].creatives[static_cast<size_t>(c)].e_img;
      std::copy(e.data.begin(), e.data.end(),
                m.data.begin() + (static_cast<long>(i) * n_cr + c) * d_img);
    }
  }
  return m;
}

double ClickOracle::ctr_core(const Tensor& user, const Tensor& e_poi, double quality) const {
  Tensor u2 = user.rank() == 1 ? Tensor({1, user.shape[0]}, user.data) : user;
  Tensor e2 = e_poi.rank() == 1 ? Tensor({1, e_poi.shape[0]}, e_poi.data) : e_poi;
  double affinity = numkit::matmul(numkit::matmul(u2, m_ctr), e2, false, true).item();
  double logit = affinity + quality_coef_ctr * (quality - 0.5) + bias_ctr;
  return 1.0 / (1.0 + std::exp(-logit));
}

double ClickOracle::true_ctr(const Tensor& user, const Poi& poi, const Creative& cr,
                             int slot) const {
  if (slot < 1) throw IndexError("slot must be >= 1, got " + std::to_string(slot));
  return ctr_core(user, poi.e_poi, cr.quality) * std::pow(static_cast<double>(slot), -decay_exp);
}

double ClickOracle::true_cvr(const Tensor& user, const Poi& poi, const Creative& cr) const {
  Tensor u2 = user.rank() == 1 ? Tensor({1, user.shape[0]}, user.data) : user;
  Tensor e2 = poi.e_poi.rank() == 1 ? Tensor({1, poi.e_poi.shape[0]}, poi.e_poi.data) : poi.e_poi;
  double affinity = numkit::matmul(numkit::matmul(u2, m_cvr), e2, false, true).item();
  double logit = affinity + quality_coef_cvr * (cr.quality - 0.5) + bias_cvr;
  return 1.0 / (1.0 + std::exp(-logit));
}

double ClickOracle::gmv_proxy(const Tensor& user, const Poi& poi) const {
  double best = 0.0;
  for (const Creative& cr : poi.creatives) {
    double v = ctr_core(user, poi.e_poi, cr.quality) * true_cvr(user, poi, cr);
    best = std::max(best, v);
  }
  return poi.price * best;
}

World gen_world(uint64_t seed, int n_poi, int n_creatives_per_poi, int d_poi, int d_img,
                int n_clusters) {
  if (n_poi < 1 || n_creatives_per_poi < 1 || d_poi < 1 || d_img < 1 || n_clusters < 1) {
    throw ConfigError("gen_world counts must all be >= 1");
  }
  Rng rng(Rng::derive(seed, 0x11));
  World w;
  Catalog& cat = w.catalog;
  cat.d_poi = d_poi;
  cat.d_img = d_img;
  cat.n_clusters = n_clusters;

  for (int c = 0; c < n_clusters; ++c) {
    Tensor g = Tensor::randn({d_poi}, rng);
    double norm = std::sqrt(std::max(numkit::dot(g, g), 1e-12));
    cat.cluster_centers.push_back(numkit::scale(g, 4.0 / norm));
  }

  // fixed projection from POI space to creative space
  Tensor proj = Tensor::zeros({d_poi, d_img});
  for (auto& v : proj.data) v = rng.normal() / std::sqrt(static_cast<double>(d_poi));

  cat.pois.reserve(static_cast<size_t>(n_poi));
  for (int i = 0; i < n_poi; ++i) {
    Poi p;
    p.id = i;
    p.cluster = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_clusters)));
    p.e_poi = numkit::add(cat.cluster_centers[static_cast<size_t>(p.cluster)],
                          Tensor::randn({d_poi}, rng));
    p.price = rng.lognormal(1.0, 0.3);
    Tensor base({1, d_poi}, p.e_poi.data);
    Tensor img_base = numkit::matmul(base, proj);
    for (int c = 0; c < n_creatives_per_poi; ++c) {
      Creative cr;
      cr.id = c;
      cr.e_img = Tensor({d_img}, numkit::add(img_base, Tensor::randn({1, d_img}, rng, 0.3)).data);
      cr.quality = rng.uniform();
      p.creatives.push_back(std::move(cr));
    }
    cat.pois.push_back(std::move(p));
  }

  ClickOracle& o = w.oracle;
  o.m_ctr = Tensor::zeros({d_poi, d_poi});
  o.m_cvr = Tensor::zeros({d_poi, d_poi});
  // near-identity maps at a scale that keeps logits in a useful range for
  // cluster-matched users (|u.e| around 16 for the preferred cluster)
  for (int i = 0; i < d_poi; ++i) {
    for (int j = 0; j < d_poi; ++j) {
      double eye = i == j ? 1.0 : 0.0;
      o.m_ctr.at(i, j) = 0.125 * eye + 0.01 * rng.normal();
      o.m_cvr.at(i, j) = 0.10 * eye + 0.01 * rng.normal();
    }
  }
  return w;
}

namespace {

// Softmax sampling of one POI by user affinity at temperature tau.
int sample_poi_by_propensity(Rng& rng, const World& w, const Tensor& user, double tau) {
  const auto& pois = w.catalog.pois;
  std::vector<double> logits(pois.size());
  double mx = -1e300;
  for (size_t i = 0; i < pois.size(); ++i) {
    logits[i] = numkit::dot(user, pois[i].e_poi) / tau;
    mx = std::max(mx, logits[i]);
  }
  double z = 0.0;
  for (auto& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  double r = rng.uniform() * z;
  double acc = 0.0;
  for (size_t i = 0; i < pois.size(); ++i) {
    acc += logits[i];
    if (r <= acc) return static_cast<int>(i);
  }
  return static_cast<int>(pois.size()) - 1;
}

}  // namespace

Request gen_request(uint64_t seed, const World& world, int B, int N, int M, int K) {
  if (world.catalog.pois.empty()) throw ConfigError("catalog is empty");
  if (N + M < K) {
    throw ConfigError("K=" + std::to_string(K) + " exceeds N+M=" + std::to_string(N + M));
  }
  Rng rng(Rng::derive(seed, 0x22));
  const Catalog& cat = world.catalog;
  int n_poi = static_cast<int>(cat.pois.size());

  Request req;
  req.user_id = static_cast<int>(seed & 0x7fffffff);
  req.K = K;
  int cluster = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cat.n_clusters)));
  req.user_latent = numkit::add(cat.cluster_centers[static_cast<size_t>(cluster)],
                                Tensor::randn({cat.d_poi}, rng, 0.5));

  const double tau = 4.0;
  for (int i = 0; i < B; ++i) {
    int poi = sample_poi_by_propensity(rng, world, req.user_latent, tau);
    int n_cr = static_cast<int>(cat.pois[static_cast<size_t>(poi)].creatives.size());
    int cr = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_cr)));
    req.history.emplace_back(poi, cr);
  }

  // ads and organics draw distinct POIs
  int want = std::min(N + M, n_poi);
  std::set<int> chosen;
  std::vector<int> picked;
  while (static_cast<int>(picked.size()) < want) {
    int p = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_poi)));
    if (chosen.insert(p).second) picked.push_back(p);
  }
  int n_ads = std::min(N, static_cast<int>(picked.size()));
  for (int i = 0; i < n_ads; ++i) {
    AdCandidate ad;
    ad.poi_id = picked[static_cast<size_t>(i)];
    int n_cr = static_cast<int>(cat.pois[static_cast<size_t>(ad.poi_id)].creatives.size());
    for (int c = 0; c < n_cr; ++c) ad.creative_ids.push_back(c);
    double raw = rng.lognormal(0.0, 0.5);
    ad.bid = std::clamp(raw, 0.5, 5.0);
    ad.value = ad.bid;  // truthful generation
    req.ads.push_back(std::move(ad));
  }

  std::vector<std::pair<double, int>> by_gmv;  // (-gmv, poi)
  for (int i = n_ads; i < static_cast<int>(picked.size()); ++i) {
    int poi = picked[static_cast<size_t>(i)];
    by_gmv.emplace_back(-world.oracle.gmv_proxy(req.user_latent, cat.poi(poi)), poi);
  }
  std::sort(by_gmv.begin(), by_gmv.end());
  for (size_t r = 0; r < by_gmv.size(); ++r) {
    OrganicItem org;
    org.poi_id = by_gmv[r].second;
    org.pre_rank = static_cast<int>(r);
    req.organics.push_back(org);
  }
  return req;
}

std::vector<Feedback> sample_feedback(uint64_t seed, const World& world, const Tensor& user_latent,
                                      const std::vector<DisplayItem>& shown) {
  Rng rng(Rng::derive(seed, 0x33));
  std::vector<Feedback> out;
  out.reserve(shown.size());
  for (size_t i = 0; i < shown.size(); ++i) {
    const Poi& poi = world.catalog.poi(shown[i].poi_id);
    const Creative& cr = world.catalog.creative(shown[i].poi_id, shown[i].creative_id);
    Feedback fb;
    fb.p_click = world.oracle.true_ctr(user_latent, poi, cr, static_cast<int>(i) + 1);
    fb.p_conv = world.oracle.true_cvr(user_latent, poi, cr);
    fb.click = rng.uniform() < fb.p_click ? 1 : 0;
    fb.conversion = fb.click != 0 && rng.uniform() < fb.p_conv ? 1 : 0;
    out.push_back(fb);
  }
  return out;
}

// ---- serialization ----

namespace {

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"data", t.data}};
}

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<std::vector<int>>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_world(const World& world, const std::string& catalog_path,
                const std::string& oracle_path) {
  std::ofstream cf(catalog_path);
  if (!cf) throw CorruptionError("cannot open " + catalog_path + " for writing");
  const Catalog& cat = world.catalog;
  json header{{"record", "catalog_header"},
              {"d_poi", cat.d_poi},
              {"d_img", cat.d_img},
              {"n_clusters", cat.n_clusters}};
  json centers = json::array();
  for (const auto& c : cat.cluster_centers) centers.push_back(c.data);
  header["cluster_centers"] = centers;
  cf << header.dump() << "\n";
  for (const Poi& p : cat.pois) {
    json creatives = json::array();
    for (const Creative& cr : p.creatives) {
      creatives.push_back(json{{"id", cr.id}, {"quality", cr.quality}, {"e_img", cr.e_img.data}});
    }
    json rec{{"record", "poi"},       {"id", p.id},         {"cluster", p.cluster},
             {"price", p.price},      {"e_poi", p.e_poi.data}, {"creatives", creatives}};
    cf << rec.dump() << "\n";
  }
  if (!cf) throw CorruptionError("write failed for " + catalog_path);

  std::ofstream of(oracle_path);
  if (!of) throw CorruptionError("cannot open " + oracle_path + " for writing");
  const ClickOracle& o = world.oracle;
  json oj{{"m_ctr", tensor_to_json(o.m_ctr)},
          {"m_cvr", tensor_to_json(o.m_cvr)},
          {"quality_coef_ctr", o.quality_coef_ctr},
          {"quality_coef_cvr", o.quality_coef_cvr},
          {"bias_ctr", o.bias_ctr},
          {"bias_cvr", o.bias_cvr},
          {"decay_exp", o.decay_exp}};
  of << oj.dump(2) << "\n";
  if (!of) throw CorruptionError("write failed for " + oracle_path);
}

World load_world(const std::string& catalog_path, const std::string& oracle_path) {
  std::ifstream cf(catalog_path);
  if (!cf) throw CorruptionError("cannot open " + catalog_path);
  World w;
  Catalog& cat = w.catalog;
  std::string line;
  bool have_header = false;
  while (std::getline(cf, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw CorruptionError("bad JSON line in " + catalog_path);
    std::string kind = rec.value("record", "");
    if (kind == "catalog_header") {
      cat.d_poi = rec.at("d_poi").get<int>();
      cat.d_img = rec.at("d_img").get<int>();
      cat.n_clusters = rec.at("n_clusters").get<int>();
      for (const auto& c : rec.at("cluster_centers")) {
        cat.cluster_centers.push_back(Tensor::row(c.get<std::vector<double>>()));
      }
      have_header = true;
    } else if (kind == "poi") {
      Poi p;
      p.id = rec.at("id").get<int>();
      p.cluster = rec.at("cluster").get<int>();
      p.price = rec.at("price").get<double>();
      p.e_poi = Tensor::row(rec.at("e_poi").get<std::vector<double>>());
      for (const auto& c : rec.at("creatives")) {
        Creative cr;
        cr.id = c.at("id").get<int>();
        cr.quality = c.at("quality").get<double>();
        cr.e_img = Tensor::row(c.at("e_img").get<std::vector<double>>());
        p.creatives.push_back(std::move(cr));
      }
      cat.pois.push_back(std::move(p));
    } else {
      throw CorruptionError("unknown record kind in " + catalog_path + ": " + kind);
    }
  }
  if (!have_header || cat.pois.empty()) {
    throw CorruptionError(catalog_path + " lacks a header or any poi records");
  }

  std::ifstream of(oracle_path);
  if (!of) throw CorruptionError("cannot open " + oracle_path);
  json oj = json::parse(of, nullptr, false);
  if (oj.is_discarded()) throw CorruptionError("bad JSON in " + oracle_path);
  ClickOracle& o = w.oracle;
  o.m_ctr = tensor_from_json(oj.at("m_ctr"));
  o.m_cvr = tensor_from_json(oj.at("m_cvr"));
  o.quality_coef_ctr = oj.at("quality_coef_ctr").get<double>();
  o.quality_coef_cvr = oj.at("quality_coef_cvr").get<double>();
  o.bias_ctr = oj.at("bias_ctr").get<double>();
  o.bias_cvr = oj.at("bias_cvr").get<double>();
  o.decay_exp = oj.at("decay_exp").get<double>();
  return w;
}

void save_requests(const std::vector<Request>& requests, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw CorruptionError("cannot open " + path + " for writing");
  for (const Request& r : requests) {
    json ads = json::array();
    for (const AdCandidate& a : r.ads) {
      ads.push_back(json{{"poi_id", a.poi_id},
                         {"creative_ids", a.creative_ids},
                         {"value", a.value},
                         {"bid", a.bid}});
    }
    json orgs = json::array();
    for (const OrganicItem& o : r.organics) {
      orgs.push_back(json{{"poi_id", o.poi_id}, {"pre_rank", o.pre_rank}});
    }
    json hist = json::array();
    for (const auto& [p, c] : r.history) hist.push_back(json::array({p, c}));
    json rec{{"user_id", r.user_id},
             {"user_latent", r.user_latent.data},
             {"history", hist},
             {"ads", ads},
             {"organics", orgs},
             {"K", r.K}};
    f << rec.dump() << "\n";
  }
  if (!f) throw CorruptionError("write failed for " + path);
}

std::vector<Request> load_requests(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw CorruptionError("cannot open " + path);
  std::vector<Request> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw CorruptionError("bad JSON line in " + path);
    Request r;
    r.user_id = rec.at("user_id").get<int>();
    r.user_latent = Tensor::row(rec.at("user_latent").get<std::vector<double>>());
    for (const auto& h : rec.at("history")) {
      r.history.emplace_back(h.at(0).get<int>(), h.at(1).get<int>());
    }
    for (const auto& a : rec.at("ads")) {
      AdCandidate ad;
      ad.poi_id = a.at("poi_id").get<int>();
      ad.creative_ids = a.at("creative_ids").get<std::vector<int>>();
      ad.value = a.at("value").get<double>();
      ad.bid = a.at("bid").get<double>();
      r.ads.push_back(std::move(ad));
    }
    for (const auto& o : rec.at("organics")) {
      OrganicItem org;
      org.poi_id = o.at("poi_id").get<int>();
      org.pre_rank = o.at("pre_rank").get<int>();
      r.organics.push_back(org);
    }
    r.K = rec.at("K").get<int>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace genad::marketplace
