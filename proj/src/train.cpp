#include "lara/train.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "lara/checkpoint.hpp"
#include "lara/rng.hpp"

namespace lara {

namespace fs = std::filesystem;

TrainingSample to_training_sample(const RenderedSample& s) {
  TrainingSample t;
  t.rig = s.rig;
  for (const ImageU8& img : s.images) {
    LARA_CHECK_ARG(img.channels == 3, "training images must be RGB");
    Tensor x = Tensor::zeros({3, img.height, img.width});
    const int64_t hw = static_cast<int64_t>(img.height) * img.width;
    // center to [-1, 1]
    for (int64_t p = 0; p < hw; ++p)
      for (int64_t c = 0; c < 3; ++c)
        x.at(c * hw + p) = static_cast<float>(img.data[size_t(p * 3 + c)]) / 127.5f - 1.0f;
    t.images.push_back(std::move(x));
  }
  LARA_CHECK_ARG(s.bev_h > 0 && s.bev_w > 0 &&
                     static_cast<size_t>(s.bev_h) * s.bev_w == s.bev_gt.size(),
                 "bev_gt dims inconsistent");
  t.bev_gt = Tensor::zeros({s.bev_h, s.bev_w});
  for (int64_t i = 0; i < t.bev_gt.numel(); ++i)
    t.bev_gt.at(i) = s.bev_gt[size_t(i)] ? 1.0f : 0.0f;
  return t;
}

std::vector<TrainingSample> load_training_set(const std::string& dir) {
  std::vector<RenderedSample> raw = read_dataset(dir);
  std::vector<TrainingSample> out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.push_back(to_training_sample(s));
  return out;
}

void IouAccumulator::add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  LARA_CHECK_SHAPE(pred.size() == gt.size(), "iou: mask sizes ", pred.size(), " vs ", gt.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    intersection_ += (p && g) ? 1 : 0;
    union_ += (p || g) ? 1 : 0;
  }
}

double IouAccumulator::value() const {
  if (union_ == 0) return 1.0;  // empty-union convention
  return static_cast<double>(intersection_) / static_cast<double>(union_);
}

double iou_single(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  IouAccumulator acc;
  acc.add(pred, gt);
  return acc.value();
}

std::vector<uint8_t> gt_to_mask(const Tensor& gt) {
  std::vector<uint8_t> m(static_cast<size_t>(gt.numel()));
  for (int64_t i = 0; i < gt.numel(); ++i) m[size_t(i)] = gt.at(i) > 0.5f ? 1 : 0;
  return m;
}

Trainer::Trainer(const AppConfig& cfg, std::vector<TrainingSample> train_set,
                 std::vector<TrainingSample> val_set)
    : cfg_(cfg),
      train_set_(std::move(train_set)),
      val_set_(std::move(val_set)),
      store_(cfg.train.seed),
      model_(cfg.model, store_),
      opt_(store_, AdamWConfig{cfg.train.lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay}) {
  LARA_CHECK_ARG(!train_set_.empty(), "empty training set");
  for (const auto& s : train_set_) {
    LARA_CHECK_SHAPE(s.bev_gt.dim(0) == cfg_.model.bev_h && s.bev_gt.dim(1) == cfg_.model.bev_w,
                     "dataset bev_gt is ", s.bev_gt.dim(0), "x", s.bev_gt.dim(1),
                     ", config expects ", cfg_.model.bev_h, "x", cfg_.model.bev_w);
  }
}

int64_t Trainer::steps_per_epoch() const {
  const int64_t n = static_cast<int64_t>(train_set_.size());
  const int64_t b = cfg_.train.batch_size;
  return (n + b - 1) / b;
}

std::vector<size_t> Trainer::batch_for_step(int64_t step) const {
  const int64_t n = static_cast<int64_t>(train_set_.size());
  const int64_t spe = steps_per_epoch();
  const int64_t epoch = step / spe;
  const int64_t pos = (step % spe) * cfg_.train.batch_size;
  // stateless per-epoch permutation
  std::vector<size_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(cfg_.train.seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(epoch) + 1);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(perm[size_t(i)], perm[size_t(rng.uniform_int(0, i))]);
  std::vector<size_t> batch;
  for (int64_t k = pos; k < std::min<int64_t>(pos + cfg_.train.batch_size, n); ++k)
    batch.push_back(perm[size_t(k)]);
  return batch;
}

MetricsRecord Trainer::train_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t step = opt_.step_count();
  const std::vector<size_t> batch = batch_for_step(step);

  Tensor total;
  IouAccumulator batch_iou;
  for (size_t bi = 0; bi < batch.size(); ++bi) {
    const TrainingSample& s = train_set_[batch[bi]];
    auto out = model_.forward(s.rig, s.images, false);
    Tensor loss = bce_with_logits_mean(out.logits, s.bev_gt);
    if (!all_finite(loss)) {
      throw ArgumentError(detail::format_msg("non-finite loss at step ", step, ", batch index ",
                                             bi, " (dataset sample ", batch[bi], ")"));
    }
    batch_iou.add(logits_to_mask(out.logits), gt_to_mask(s.bev_gt));
    total = bi == 0 ? loss : add(total, loss);
  }
  Tensor mean = scale(total, 1.0f / static_cast<float>(batch.size()));
  backward(mean);
  opt_.step(store_);
  store_.zero_grads();

  MetricsRecord rec;
  rec.step = opt_.step_count();
  rec.loss = mean.item();
  rec.iou = batch_iou.value();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void Trainer::run(int64_t steps, const std::function<void(const MetricsRecord&)>& on_metrics) {
  int64_t total = steps;
  if (total < 0)
    total = cfg_.train.steps > 0 ? cfg_.train.steps
                                 : static_cast<int64_t>(cfg_.train.epochs) * steps_per_epoch();

  std::ofstream csv;
  if (!cfg_.train.out_dir.empty()) {
    fs::create_directories(cfg_.train.out_dir);
    const fs::path p = fs::path(cfg_.train.out_dir) / "metrics.csv";
    const bool fresh = !fs::exists(p);
    csv.open(p, std::ios::app);
    if (fresh) csv << "step,loss,iou,seconds\n";
  }

  const auto t0 = std::chrono::steady_clock::now();
  double loss_acc = 0;
  int64_t loss_n = 0;
  for (int64_t k = 0; k < total; ++k) {
    MetricsRecord rec = train_step();
    loss_acc += rec.loss;
    ++loss_n;
    if (rec.step % cfg_.train.eval_interval == 0 || k + 1 == total) {
      MetricsRecord row;
      row.step = rec.step;
      row.loss = loss_acc / static_cast<double>(loss_n);
      loss_acc = 0;
      loss_n = 0;
      row.iou = evaluate(val_set_.empty() ? train_set_ : val_set_);
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (csv.is_open()) {
        csv.precision(10);
        csv << row.step << "," << row.loss << "," << row.iou << "," << row.seconds << "\n";
        csv.flush();
      }
      if (on_metrics) on_metrics(row);
    }
  }
  if (!cfg_.train.out_dir.empty())
    save_checkpoint((fs::path(cfg_.train.out_dir) / "checkpoint.lara").string());
}

double Trainer::evaluate(const std::vector<TrainingSample>& set) const {
  IouAccumulator acc;
  for (const TrainingSample& s : set) {
    auto out = model_.forward(s.rig, s.images, false);
    acc.add(logits_to_mask(out.logits), gt_to_mask(s.bev_gt));
  }
  return acc.value();
}

double Trainer::mean_loss(const std::vector<TrainingSample>& set) const {
  double total = 0;
  for (const TrainingSample& s : set) {
    auto out = model_.forward(s.rig, s.images, false);
    total += bce_with_logits_mean(out.logits, s.bev_gt).item();
  }
  return set.empty() ? 0.0 : total / static_cast<double>(set.size());
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::vector<std::pair<std::string, Tensor>> tensors;
  auto& store = const_cast<ParamStore&>(store_);
  for (const auto& name : store.names()) tensors.emplace_back(name, store.get(name).detach());
  Tensor step = Tensor::scalar(static_cast<float>(opt_.step_count()));
  tensors.emplace_back("opt.step", step);
  auto& opt = const_cast<AdamW&>(opt_);
  for (size_t pi = 0; pi < store.names().size(); ++pi) {
    const std::string& name = store.names()[pi];
    Tensor m = Tensor::from_data(store.get(name).dims(),
                                 std::vector<float>(opt.moment1(pi).begin(), opt.moment1(pi).end()));
    Tensor v = Tensor::from_data(store.get(name).dims(),
                                 std::vector<float>(opt.moment2(pi).begin(), opt.moment2(pi).end()));
    tensors.emplace_back("opt.m." + name, std::move(m));
    tensors.emplace_back("opt.v." + name, std::move(v));
  }
  save_tensors(path, tensors);
}

void Trainer::load_checkpoint(const std::string& path) {
  auto tensors = load_tensors(path);
  std::vector<std::pair<std::string, Tensor>> params;
  for (auto& [name, t] : tensors) {
    if (name == "opt.step") {
      opt_.set_step_count(static_cast<int64_t>(std::lround(t.at(0))));
    } else if (name.rfind("opt.m.", 0) == 0 || name.rfind("opt.v.", 0) == 0) {
      const bool is_m = name[4] == 'm';
      const std::string pname = name.substr(6);
      const auto& names = store_.names();
      const auto it = std::find(names.begin(), names.end(), pname);
      LARA_CHECK_IO(it != names.end(), "checkpoint moment for unknown parameter \"", pname, "\"");
      const size_t pi = static_cast<size_t>(it - names.begin());
      LARA_CHECK_SHAPE(t.dims() == store_.get(pname).dims(), "checkpoint tensor \"", name,
                       "\" has shape ", shape_to_string(t.dims()), ", expected ",
                       shape_to_string(store_.get(pname).dims()));
      auto& dst = is_m ? opt_.moment1(pi) : opt_.moment2(pi);
      dst.assign(t.data().begin(), t.data().end());
    } else {
      params.emplace_back(name, std::move(t));
    }
  }
  load_params_into(store_, params);
}

void load_params_into(ParamStore& store,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (const auto& [name, t] : tensors) {
    LARA_CHECK_IO(store.has(name), "checkpoint tensor \"", name, "\" not present in the model");
    auto& dst = store.get(name);
    LARA_CHECK_SHAPE(t.dims() == dst.dims(), "checkpoint tensor \"", name, "\" has shape ",
                     shape_to_string(t.dims()), ", model expects ", shape_to_string(dst.dims()));
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
  }
}

}  // namespace lara
