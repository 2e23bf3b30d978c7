#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lara/adamw.hpp"
#include "lara/config.hpp"
#include "lara/model.hpp"
#include "lara/synthdata.hpp"

namespace lara {

/// A dataset sample converted to model inputs: images scaled to [0,1],
/// ground truth as a float 0/1 grid.
struct TrainingSample {
  std::vector<Tensor> images;  // C x [3,H,W]
  Tensor bev_gt;               // [h_bev, w_bev]
  CameraRig rig;
};

TrainingSample to_training_sample(const RenderedSample& s);
std::vector<TrainingSample> load_training_set(const std::string& dir);

struct MetricsRecord {
  int64_t step = 0;
  double loss = 0.0;
  double iou = 0.0;
  double seconds = 0.0;
};

/// Binary IoU with global accumulation: intersection and union counts are
/// summed over every mask before dividing. An empty union counts as 1.
class IouAccumulator {
 public:
  void add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);
  double value() const;
  int64_t intersection() const { return intersection_; }
  int64_t union_count() const { return union_; }

 private:
  int64_t intersection_ = 0;
  int64_t union_ = 0;
};

double iou_single(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

std::vector<uint8_t> gt_to_mask(const Tensor& gt);

/// Owns the parameter store, model and optimizer; drives deterministic
/// epoch-shuffled training. Batch composition is a pure function of
/// (seed, step), so an interrupted run resumed from a checkpoint continues
/// the identical loss curve.
class Trainer {
 public:
  Trainer(const AppConfig& cfg, std::vector<TrainingSample> train_set,
          std::vector<TrainingSample> val_set = {});

  MetricsRecord train_step();

  /// Runs `steps` optimizer steps (or one full config run when steps < 0:
  /// train.steps if set, otherwise epochs * steps_per_epoch). Metrics rows
  /// are appended to out_dir/metrics.csv every eval_interval when out_dir
  /// is non-empty; on_metrics (when set) observes the same rows.
  void run(int64_t steps = -1,
           const std::function<void(const MetricsRecord&)>& on_metrics = nullptr);

  /// Global-accumulation IoU of the current model over a sample set;
  /// does not mutate parameters.
  double evaluate(const std::vector<TrainingSample>& set) const;
  double mean_loss(const std::vector<TrainingSample>& set) const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  int64_t step_count() const { return opt_.step_count(); }
  int64_t steps_per_epoch() const;
  std::vector<size_t> batch_for_step(int64_t step) const;

  ParamStore& store() { return store_; }
  const LaRaModel& model() const { return model_; }
  const AppConfig& config() const { return cfg_; }
  const std::vector<TrainingSample>& train_set() const { return train_set_; }
  const std::vector<TrainingSample>& val_set() const { return val_set_; }

 private:
  AppConfig cfg_;
  std::vector<TrainingSample> train_set_;
  std::vector<TrainingSample> val_set_;
  ParamStore store_;
  LaRaModel model_;
  AdamW opt_;
};

/// Copies checkpoint tensors into an existing store; every name must match
/// an entry of identical shape (the error names the offending tensor).
void load_params_into(ParamStore& store,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace lara
