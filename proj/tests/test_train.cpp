#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lara/train.hpp"

using namespace lara;

namespace {

AppConfig micro_app_config() {
  AppConfig cfg;
  cfg.model.cameras = 2;
  cfg.model.image_h = 32;
  cfg.model.image_w = 64;
  cfg.model.stride = 8;
  cfg.model.feat_channels = 8;
  cfg.model.ray_dim = 8;
  cfg.model.latent_count = 4;
  cfg.model.latent_dim = 16;
  cfg.model.self_layers = 1;
  cfg.model.heads = 2;
  cfg.model.bev_h = 16;
  cfg.model.bev_w = 16;
  cfg.model.cell_meters = 1.0;
  cfg.model.d_bev = 16;
  cfg.data.min_boxes = 1;
  cfg.data.max_boxes = 3;
  cfg.train.batch_size = 1;
  cfg.train.seed = 5;
  cfg.train.out_dir = "";  // no file output in unit tests by default
  return cfg;
}

std::vector<TrainingSample> micro_dataset(const AppConfig& cfg, int count, uint64_t seed) {
  std::vector<TrainingSample> out;
  for (const auto& s : generate_dataset(cfg, count, seed)) out.push_back(to_training_sample(s));
  return out;
}

}  // namespace

TEST_CASE("iou: examples, counting oracle, accumulation, shuffle invariance") {
  const std::vector<uint8_t> a = {1, 1, 0, 0};
  const std::vector<uint8_t> b = {1, 1, 0, 0};
  CHECK(iou_single(a, b) == 1.0);

  const std::vector<uint8_t> c = {0, 0, 1, 1};
  CHECK(iou_single(a, c) == 0.0);

  // pred 2x2 block, gt overlapping 2x2 block sharing 2 cells -> 2/6
  std::vector<uint8_t> pred(16, 0), gt(16, 0);
  auto set_block = [](std::vector<uint8_t>& m, int r0, int c0) {
    for (int r = r0; r < r0 + 2; ++r)
      for (int cc = c0; cc < c0 + 2; ++cc) m[size_t(r) * 4 + cc] = 1;
  };
  set_block(pred, 0, 0);
  set_block(gt, 0, 1);
  // brute-force counting oracle
  int inter = 0, uni = 0;
  for (size_t i = 0; i < 16; ++i) {
    inter += pred[i] && gt[i];
    uni += pred[i] || gt[i];
  }
  CHECK(inter == 2);
  CHECK(uni == 6);
  CHECK(iou_single(pred, gt) == doctest::Approx(2.0 / 6.0));

  // empty union convention
  const std::vector<uint8_t> z(8, 0);
  CHECK(iou_single(z, z) == 1.0);

  // dataset-level accumulation equals brute force over the concatenation
  IouAccumulator acc;
  acc.add(a, c);
  acc.add(pred, gt);
  std::vector<uint8_t> cat_p(a), cat_g(c);
  cat_p.insert(cat_p.end(), pred.begin(), pred.end());
  cat_g.insert(cat_g.end(), gt.begin(), gt.end());
  CHECK(acc.value() == iou_single(cat_p, cat_g));

  // order invariance
  IouAccumulator acc2;
  acc2.add(pred, gt);
  acc2.add(a, c);
  CHECK(acc2.value() == acc.value());

  CHECK_THROWS_AS(iou_single(a, z), ShapeError);
}

TEST_CASE("trainer: loss decreases on a repeated batch; grads zeroed; determinism") {
  AppConfig cfg = micro_app_config();
  std::vector<TrainingSample> ds = micro_dataset(cfg, 1, 77);

  Trainer trainer(cfg, ds);
  std::vector<double> losses;
  for (int s = 0; s < 50; ++s) losses.push_back(trainer.train_step().loss);

  auto moving_avg = [&](int start) {
    double acc = 0;
    for (int i = start; i < start + 10; ++i) acc += losses[size_t(i)];
    return acc / 10.0;
  };
  // 10-step moving average trends downward
  CHECK(moving_avg(40) < moving_avg(0));
  int increases = 0;
  for (int s = 0; s + 20 <= 50; s += 10)
    if (moving_avg(s + 10) > moving_avg(s)) ++increases;
  CHECK(increases <= 1);

  // grads zero after the step completes
  for (const auto& name : trainer.store().names()) {
    auto& t = trainer.store().get(name);
    REQUIRE(t.has_grad());
    for (float g : t.grad()) CHECK(g == 0.0f);
  }

  // identical seeds -> identical loss curves
  Trainer t1(cfg, ds), t2(cfg, ds);
  for (int s = 0; s < 5; ++s) {
    const double l1 = t1.train_step().loss;
    const double l2 = t2.train_step().loss;
    CHECK(l1 == l2);
  }
}

TEST_CASE("trainer: non-finite loss aborts with the offending batch index") {
  AppConfig cfg = micro_app_config();
  std::vector<TrainingSample> ds = micro_dataset(cfg, 1, 78);
  Trainer trainer(cfg, ds);
  // poison one parameter
  trainer.store().get("latents").at(0) = std::numeric_limits<float>::quiet_NaN();
  try {
    trainer.train_step();
    FAIL("expected abort");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("batch index 0") != std::string::npos);
  }
}

TEST_CASE("evaluate: GT echo, zero predictor, shuffle invariance, purity") {
  AppConfig cfg = micro_app_config();
  std::vector<TrainingSample> ds = micro_dataset(cfg, 3, 79);

  // GT vs itself through the accumulator
  IouAccumulator self;
  for (const auto& s : ds) self.add(gt_to_mask(s.bev_gt), gt_to_mask(s.bev_gt));
  CHECK(self.value() == 1.0);

  Trainer trainer(cfg, ds);
  // zero every parameter: logits collapse to the head bias (0) -> empty mask
  for (const auto& name : trainer.store().names())
    for (auto& v : trainer.store().get(name).data()) v = 0.0f;
  bool any_gt = false;
  for (const auto& s : ds)
    for (int64_t i = 0; i < s.bev_gt.numel(); ++i) any_gt = any_gt || s.bev_gt.at(i) > 0.5f;
  REQUIRE(any_gt);
  CHECK(trainer.evaluate(ds) == 0.0);

  // dataset shuffling does not change the global IoU; evaluate is pure
  std::vector<TrainingSample> shuffled = {ds[2], ds[0], ds[1]};
  CHECK(trainer.evaluate(shuffled) == trainer.evaluate(ds));
  CHECK(trainer.evaluate(ds) == trainer.evaluate(ds));
}

TEST_CASE("checkpoints: byte-identical resave, exact resume, shape errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "lara_train_ckpt";
  fs::create_directories(dir);

  AppConfig cfg = micro_app_config();
  cfg.train.batch_size = 2;
  std::vector<TrainingSample> ds = micro_dataset(cfg, 4, 80);

  // uninterrupted run: 6 steps
  Trainer full(cfg, ds);
  std::vector<double> full_losses;
  for (int s = 0; s < 6; ++s) full_losses.push_back(full.train_step().loss);

  // split run: 3 steps, checkpoint, fresh trainer, load, 3 more
  Trainer first(cfg, ds);
  for (int s = 0; s < 3; ++s) first.train_step();
  const std::string ck = (dir / "split.lara").string();
  first.save_checkpoint(ck);

  Trainer second(cfg, ds);
  second.load_checkpoint(ck);
  CHECK(second.step_count() == 3);
  for (int s = 3; s < 6; ++s) {
    const double resumed = second.train_step().loss;
    CHECK(resumed == full_losses[size_t(s)]);
  }

  // save -> load -> save gives byte-identical files
  const std::string ck2 = (dir / "resave.lara").string();
  second.save_checkpoint(ck);
  Trainer third(cfg, ds);
  third.load_checkpoint(ck);
  third.save_checkpoint(ck2);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(ck) == slurp(ck2));

  SUBCASE("loading into a mismatched config names the offending tensor") {
    AppConfig other = cfg;
    other.model.latent_count = 8;
    Trainer wrong(other, ds);
    try {
      wrong.load_checkpoint(ck);
      FAIL("expected shape mismatch");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("latents") != std::string::npos);
    }
  }
}

TEST_CASE("trainer run(): metrics CSV rows and config-driven step counts") {
  namespace fs = std::filesystem;
  AppConfig cfg = micro_app_config();
  cfg.train.steps = 4;
  cfg.train.eval_interval = 2;
  cfg.train.out_dir = (fs::temp_directory_path() / "lara_run_test").string();
  fs::remove_all(cfg.train.out_dir);

  std::vector<TrainingSample> ds = micro_dataset(cfg, 2, 81);
  Trainer trainer(cfg, ds);
  int rows = 0;
  trainer.run(-1, [&](const MetricsRecord& rec) {
    ++rows;
    CHECK(rec.iou >= 0.0);
    CHECK(rec.iou <= 1.0);
    CHECK(rec.loss >= 0.0);
  });
  CHECK(rows == 2);  // steps 2 and 4
  CHECK(trainer.step_count() == 4);
  CHECK(fs::exists(fs::path(cfg.train.out_dir) / "metrics.csv"));
  CHECK(fs::exists(fs::path(cfg.train.out_dir) / "checkpoint.lara"));
}
