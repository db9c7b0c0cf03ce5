#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "genad/errors.hpp"
#include "genad/marketplace.hpp"
#include "genad/reward.hpp"
#include "genad/rng.hpp"

using namespace genad;
using namespace genad::reward;
using marketplace::DisplayItem;
using marketplace::World;
using numkit::Tensor;

namespace {

RmConfig small_cfg() {
  RmConfig cfg;
  cfg.k = 4;
  cfg.d_token = 4;
  cfg.d_poi = 6;
  cfg.d_pos = 4;
  cfg.d_att = 32;
  cfg.h1 = 32;
  cfg.h2 = 16;
  cfg.h3 = 8;
  return cfg;
}

RmItem make_item(double fill, int d_token, int d_poi) {
  RmItem item;
  item.a_tok = Tensor::full({d_token}, fill);
  item.e_poi = Tensor::full({d_poi}, fill * 0.5);
  return item;
}

// Training world: clicks follow user-POI affinity, creative quality, and a
// strict slot-position decay the model is expected to pick up.
struct RmFixture {
  World world;
  RewardModel model;
  RmBatch train, held;
  double initial_loss = 0.0, final_loss = 0.0;

  RmItem item_for(int poi_id, int creative_id) const {
    const auto& poi = world.catalog.poi(poi_id);
    const auto& cr = world.catalog.creative(poi_id, creative_id);
    RmItem item;
    item.a_tok = Tensor::zeros({4});
    item.a_tok.at(0) = cr.quality;
    for (int j = 0; j < 3; ++j) item.a_tok.at(1 + j) = cr.e_img.at(j);
    item.e_poi = poi.e_poi;
    item.is_ad = poi_id % 2 == 0;
    item.bid = item.is_ad ? 1.0 + 0.1 * poi_id : 0.0;
    item.gmv = item.is_ad ? 0.0 : poi.price;
    return item;
  }

  // oracle click probability behind every held-out slot, in batch order
  std::vector<std::vector<double>> held_pclick;

  std::pair<RmSequence, SlotLabels> draw(Rng& rng, uint64_t fb_seed,
                                         std::vector<double>* pclick = nullptr) const {
    RmSequence seq;
    std::vector<DisplayItem> shown;
    for (int s = 0; s < 4; ++s) {
      int poi_id = rng.uniform_int(static_cast<int>(world.catalog.pois.size()));
      int cr_id = rng.uniform_int(world.catalog.n_creatives_per_poi());
      seq.push_back(item_for(poi_id, cr_id));
      shown.push_back({poi_id, cr_id, seq.back().is_ad, seq.back().bid});
    }
    Tensor user = marketplace::gen_request(fb_seed, world, 2, 2, 2, 4).user_latent;
    auto fb = marketplace::sample_feedback(fb_seed, world, user, shown);
    SlotLabels labels;
    for (const auto& f : fb) {
      labels.click.push_back(f.click);
      labels.conv.push_back(f.conversion);
      if (pclick != nullptr) pclick->push_back(f.p_click);
    }
    return {seq, labels};
  }

  RmFixture() : world(marketplace::gen_world(31, 40, 2, 6, 4, 3)), model(small_cfg(), 9) {
    Rng rng(111);
    for (int i = 0; i < 3000; ++i) train.push_back(draw(rng, 5000 + static_cast<uint64_t>(i)));
    for (int i = 0; i < 700; ++i) {
      std::vector<double> pclick;
      held.push_back(draw(rng, 90000 + static_cast<uint64_t>(i), &pclick));
      held_pclick.push_back(pclick);
    }

    initial_loss = model.eval_loss(train);
    model.optimizer().set_lr(0.01);
    Rng order(17);
    for (int step = 0; step < 3000; ++step) {
      RmBatch batch;
      for (int i = 0; i < 8; ++i) {
        batch.push_back(train[static_cast<size_t>(order.uniform_int(static_cast<int>(train.size())))]);
      }
      model.rm_train_step(batch);
    }
    final_loss = model.eval_loss(train);
  }
};

const RmFixture& fixture() {
  static RmFixture f;
  return f;
}

}  // namespace

TEST_CASE("default config pins the published tower sizes") {
  RmConfig cfg;
  CHECK(cfg.h1 == 128);
  CHECK(cfg.h2 == 32);
  CHECK(cfg.h3 == 10);
}

TEST_CASE("fresh model scores are exactly one half and strictly inside (0,1)") {
  RewardModel m(small_cfg(), 4);
  RmSequence seq;
  Rng rng(2);
  for (int i = 0; i < 4; ++i) {
    RmItem item = make_item(0.3 * i - 0.5, 4, 6);
    for (double& v : item.a_tok.data) v += 0.1 * rng.normal();
    item.is_ad = i % 2 == 0;
    item.bid = item.is_ad ? 2.0 : 0.0;
    seq.push_back(item);
  }
  RewardEstimates est = m.score_sequence(seq);
  REQUIRE(est.pctr_poi.size() == 4);
  REQUIRE(est.pctr_img.size() == 4);
  REQUIRE(est.pcvr.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(est.pctr_poi[static_cast<size_t>(i)] == 0.5);  // zero output layers
    CHECK(est.pctr_img[static_cast<size_t>(i)] == 0.5);
    CHECK(est.pcvr[static_cast<size_t>(i)] == 0.5);
  }
  CHECK(std::isfinite(est.sequence_reward));

  // after training the outputs move but stay strictly inside (0,1)
  const RmFixture& f = fixture();
  RewardEstimates trained = f.model.score_sequence(f.held[0].first);
  for (double p : trained.pctr_poi) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(p != 0.5);
  }
}

TEST_CASE("identical items score identically once position codes are removed") {
  RewardModel m(small_cfg(), 21);
  for (double& v : m.params().get("pos.emb").data) v = 0.0;
  // nudge towers away from the all-0.5 init so the check is not vacuous
  Rng rng(3);
  for (double& v : m.params().get("tower.pctr_poi.out").data) v = 0.2 * rng.normal();
  RmSequence seq(4, make_item(0.7, 4, 6));
  RewardEstimates est = m.score_sequence(seq);
  for (int i = 1; i < 4; ++i) {
    CHECK(est.pctr_poi[static_cast<size_t>(i)] == est.pctr_poi[0]);
    CHECK(est.pctr_img[static_cast<size_t>(i)] == est.pctr_img[0]);
    CHECK(est.pcvr[static_cast<size_t>(i)] == est.pcvr[0]);
  }
}

TEST_CASE("shape and label validation") {
  RewardModel m(small_cfg(), 5);
  RmSequence three(3, make_item(0.1, 4, 6));
  CHECK_THROWS_AS((void)m.score_sequence(three), ShapeError);

  RmSequence bad_tok(4, make_item(0.1, 4, 6));
  bad_tok[2].a_tok = Tensor::zeros({5});
  CHECK_THROWS_AS((void)m.score_sequence(bad_tok), ShapeError);
  RmSequence bad_poi(4, make_item(0.1, 4, 6));
  bad_poi[1].e_poi = Tensor::zeros({2});
  CHECK_THROWS_AS((void)m.score_sequence(bad_poi), ShapeError);

  RmSequence seq(4, make_item(0.1, 4, 6));
  SlotLabels short_labels{{1, 0, 1}, {0, 0, 0}};
  CHECK_THROWS_AS((void)m.eval_loss({{seq, short_labels}}), ShapeError);
  SlotLabels bad_value{{1, 0, 2, 0}, {0, 0, 0, 0}};
  CHECK_THROWS_AS((void)m.eval_loss({{seq, bad_value}}), ShapeError);
  CHECK_THROWS_AS((void)m.eval_loss({}), ConfigError);

  RmConfig bad_cfg = small_cfg();
  bad_cfg.k = 0;
  CHECK_THROWS_AS(RewardModel(bad_cfg, 1), ConfigError);
}

TEST_CASE("initial loss is exactly ln 2 whatever the labels") {
  RewardModel m(small_cfg(), 6);
  RmSequence seq(4, make_item(0.4, 4, 6));
  SlotLabels ones{{1, 1, 1, 1}, {1, 1, 1, 1}};
  SlotLabels mixed{{1, 0, 0, 1}, {0, 0, 1, 0}};
  CHECK(m.eval_loss({{seq, ones}}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(m.eval_loss({{seq, mixed}}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("training gradients match finite differences") {
  RmConfig cfg;
  cfg.k = 3;
  cfg.d_token = 3;
  cfg.d_poi = 4;
  cfg.d_pos = 2;
  cfg.d_att = 6;
  cfg.h1 = 8;
  cfg.h2 = 5;
  cfg.h3 = 4;
  RewardModel m(cfg, 77);
  // move off the zero-output saddle so head gradients are informative
  Rng rng(8);
  for (const char* head : {"pctr_poi", "pctr_img", "pcvr"}) {
    for (double& v : m.params().get(std::string("tower.") + head + ".out").data) {
      v = 0.3 * rng.normal();
    }
  }

  RmBatch batch;
  Rng data(12);
  for (int b = 0; b < 2; ++b) {
    RmSequence seq;
    SlotLabels labels;
    for (int i = 0; i < 3; ++i) {
      RmItem item;
      item.a_tok = Tensor::zeros({3});
      item.e_poi = Tensor::zeros({4});
      for (double& v : item.a_tok.data) v = data.normal();
      for (double& v : item.e_poi.data) v = data.normal();
      seq.push_back(item);
      labels.click.push_back(data.uniform() < 0.5 ? 1 : 0);
      labels.conv.push_back(data.uniform() < 0.5 ? 1 : 0);
    }
    batch.push_back({seq, labels});
  }

  double loss = 0.0;
  auto grads = m.loss_grads(batch, &loss);
  CHECK(loss > 0.0);

  const double step = 1e-6;
  auto fd_check = [&](const std::string& name, size_t idx) {
    RewardModel up = m;
    RewardModel dn = m;
    up.params().get(name).data[idx] += step;
    dn.params().get(name).data[idx] -= step;
    double fd = (up.eval_loss(batch) - dn.eval_loss(batch)) / (2 * step);
    double an = grads.at(name).data[idx];
    double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    INFO(name, "[", idx, "] fd=", fd, " an=", an);
    CHECK(rel < 1e-4);
  };
  fd_check("pos.emb", 3);
  fd_check("att.q", 5);
  fd_check("att.k", 11);
  fd_check("att.v", 2);
  fd_check("tower.pctr_poi.w1", 7);
  fd_check("tower.pctr_img.w2", 9);
  fd_check("tower.pcvr.w3", 4);
  fd_check("tower.pctr_poi.out", 1);
  fd_check("tower.pcvr.ob", 0);
}

TEST_CASE("reward blend arithmetic and monotonicity") {
  RewardModel m(small_cfg(), 10);
  RmSequence seq;
  seq.push_back(make_item(0.2, 4, 6));
  seq[0].is_ad = true;
  seq[0].bid = 2.0;
  seq.push_back(make_item(-0.1, 4, 6));
  seq[1].is_ad = true;
  seq[1].bid = 3.0;
  seq.push_back(make_item(0.5, 4, 6));
  seq[2].gmv = 1.5;
  seq.push_back(make_item(0.9, 4, 6));
  seq[3].gmv = 0.8;

  // fresh model: every estimate is exactly 0.5
  CHECK(m.reward_of(seq, 1.0) == doctest::Approx(0.5 * (2 + 3) + 0.5 * (1.5 + 0.8)).epsilon(1e-12));
  CHECK(m.reward_of(seq, 0.0) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(m.reward_of(seq, 2.0) == doctest::Approx(2.5 + 2 * 0.5 * 2.3).epsilon(1e-12));

  // all-organic with zero gmv weight and zero bids scores zero
  RmSequence organic(4, make_item(0.3, 4, 6));
  CHECK(m.reward_of(organic, 0.0) == 0.0);
  CHECK(m.reward_of(organic, 5.0) == 0.0);

  // blend agrees with a hand-computed weighted sum of the estimates
  RewardEstimates est = m.score_sequence(seq);
  double manual = 2.0 * est.pctr_poi[0] + 3.0 * est.pctr_poi[1] +
                  1.0 * (1.5 * est.pctr_poi[2] + 0.8 * est.pctr_poi[3]);
  CHECK(blend_reward(seq, est, 1.0) == doctest::Approx(manual).epsilon(1e-12));
  CHECK(est.sequence_reward == doctest::Approx(manual).epsilon(1e-12));

  // raising any single click estimate never lowers the reward
  for (size_t i = 0; i < 4; ++i) {
    RewardEstimates bumped = est;
    bumped.pctr_poi[i] += 0.1;
    CHECK(blend_reward(seq, bumped, 1.0) >= blend_reward(seq, est, 1.0));
  }
}

TEST_CASE("training lowers the loss well below the uniform start") {
  const RmFixture& f = fixture();
  CHECK(f.initial_loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(f.final_loss < 0.9 * f.initial_loss);
  // generalizes: held-out loss beats the uniform predictor too
  CHECK(f.model.eval_loss(f.held) < 0.95 * std::log(2.0));
}

TEST_CASE("swapping two items changes a trained model's scores") {
  const RmFixture& f = fixture();
  RmSequence seq = f.held[3].first;
  RewardEstimates before = f.model.score_sequence(seq);
  std::swap(seq[0], seq[2]);
  RewardEstimates after = f.model.score_sequence(seq);
  double diff = 0.0;
  for (size_t i = 0; i < 4; ++i) {
    diff = std::max(diff, std::abs(before.pctr_poi[i] - after.pctr_poi[i]));
    diff = std::max(diff, std::abs(before.pctr_img[i] - after.pctr_img[i]));
    diff = std::max(diff, std::abs(before.pcvr[i] - after.pcvr[i]));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("trained model prefers the front slot for strong items") {
  const RmFixture& f = fixture();
  Rng rng(400);
  double gap_sum = 0.0;
  int probes = 0;
  while (probes < 100) {
    int poi_id = rng.uniform_int(static_cast<int>(f.world.catalog.pois.size()));
    int cr_id = rng.uniform_int(f.world.catalog.n_creatives_per_poi());
    // keep only strong creatives: quality above the median
    if (f.world.catalog.creative(poi_id, cr_id).quality < 0.5) continue;
    ++probes;
    RmSequence filler;
    for (int s = 0; s < 4; ++s) {
      filler.push_back(f.item_for(rng.uniform_int(static_cast<int>(f.world.catalog.pois.size())),
                                  rng.uniform_int(f.world.catalog.n_creatives_per_poi())));
    }
    RmSequence front = filler;
    front[0] = f.item_for(poi_id, cr_id);
    RmSequence back = filler;
    back[3] = f.item_for(poi_id, cr_id);
    gap_sum += f.model.score_sequence(front).pctr_poi[0] -
               f.model.score_sequence(back).pctr_poi[3];
  }
  CHECK(gap_sum / 100.0 >= 0.0);
}

TEST_CASE("held-out predictions are calibrated per decile") {
  const RmFixture& f = fixture();
  struct Point {
    double pred, p_true;
    int click;
  };
  std::vector<Point> points;
  for (size_t r = 0; r < f.held.size(); ++r) {
    RewardEstimates est = f.model.score_sequence(f.held[r].first);
    for (size_t i = 0; i < 4; ++i) {
      points.push_back({est.pctr_poi[i], f.held_pclick[r][i], f.held[r].second.click[i]});
    }
  }
  std::sort(points.begin(), points.end(),
            [](const Point& a, const Point& b) { return a.pred < b.pred; });

  // per decile of the predictions, the mean estimate tracks the click rate
  // the oracle actually used (the limit of the observable empirical rate)
  size_t n = points.size();
  for (int bucket = 0; bucket < 10; ++bucket) {
    size_t lo = n * static_cast<size_t>(bucket) / 10;
    size_t hi = n * static_cast<size_t>(bucket + 1) / 10;
    double mean_pred = 0.0, rate = 0.0;
    for (size_t i = lo; i < hi; ++i) {
      mean_pred += points[i].pred;
      rate += points[i].p_true;
    }
    mean_pred /= static_cast<double>(hi - lo);
    rate /= static_cast<double>(hi - lo);
    INFO("bucket ", bucket, ": mean_pred=", mean_pred, " oracle_rate=", rate);
    CHECK(std::abs(mean_pred - rate) <= 0.2 * rate);
  }

  // and the overall sampled click rate agrees with the overall prediction
  double total_pred = 0.0, total_clicks = 0.0;
  for (const Point& p : points) {
    total_pred += p.pred;
    total_clicks += p.click;
  }
  CHECK(std::abs(total_pred - total_clicks) / static_cast<double>(n) < 0.05);
}

TEST_CASE("overfitting one sequence drives its loss to nearly zero") {
  RewardModel m(small_cfg(), 55);
  const RmFixture& f = fixture();
  RmBatch one{f.train[0]};
  double loss = 0.0;
  for (int step = 0; step < 2500; ++step) loss = m.rm_train_step(one);
  CHECK(loss <= 1e-3);
}

TEST_CASE("pooled towers emit one sequence-level estimate") {
  RmConfig cfg = small_cfg();
  cfg.pooled_towers = true;
  RewardModel m(cfg, 30);
  Rng rng(6);
  for (double& v : m.params().get("tower.pctr_poi.out").data) v = 0.3 * rng.normal();

  RmSequence seq;
  for (int i = 0; i < 4; ++i) seq.push_back(make_item(0.2 * i - 0.3, 4, 6));
  RewardEstimates est = m.score_sequence(seq);
  for (size_t i = 1; i < 4; ++i) CHECK(est.pctr_poi[i] == est.pctr_poi[0]);

  // training still works against per-slot labels
  SlotLabels labels{{1, 0, 1, 0}, {0, 0, 0, 0}};
  double first = m.rm_train_step({{seq, labels}});
  double second = 0.0;
  for (int step = 0; step < 200; ++step) second = m.rm_train_step({{seq, labels}});
  CHECK(second < first);
  // balanced labels pull the pooled click estimate toward one half
  RewardEstimates after = m.score_sequence(seq);
  CHECK(std::abs(after.pctr_poi[0] - 0.5) < 0.05);
}

TEST_CASE("same seed gives identical models and steps") {
  RewardModel a(small_cfg(), 91);
  RewardModel b(small_cfg(), 91);
  for (const auto& [name, t] : a.params().all()) CHECK(t.data == b.params().get(name).data);

  const RmFixture& f = fixture();
  RmBatch batch{f.train[1], f.train[2]};
  CHECK(a.rm_train_step(batch) == b.rm_train_step(batch));
  for (const auto& [name, t] : a.params().all()) CHECK(t.data == b.params().get(name).data);
}

TEST_CASE("checkpoint round trip preserves scores and optimizer state") {
  const RmFixture& f = fixture();
  std::string path = "/tmp/genad_test_reward.ck";
  f.model.save(path);
  RewardModel back = RewardModel::load(path);

  CHECK(back.config().k == 4);
  CHECK(back.config().pooled_towers == false);
  RewardEstimates a = f.model.score_sequence(f.held[1].first);
  RewardEstimates b = back.score_sequence(f.held[1].first);
  CHECK(a.pctr_poi == b.pctr_poi);
  CHECK(a.pctr_img == b.pctr_img);
  CHECK(a.pcvr == b.pcvr);
  CHECK(back.optimizer().step_count() == f.model.optimizer().step_count());

  RewardModel cont = f.model;
  RmBatch batch{f.train[4], f.train[5]};
  CHECK(cont.rm_train_step(batch) == back.rm_train_step(batch));
  for (const auto& [name, t] : cont.params().all()) CHECK(t.data == back.params().get(name).data);
}
