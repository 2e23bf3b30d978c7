// lara: data generation, training, evaluation, hyperparameter sweeps and
// attention analysis for the multi-camera BEV segmentation model.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lara/analysis.hpp"
#include "lara/checkpoint.hpp"
#include "lara/config.hpp"
#include "lara/synthdata.hpp"
#include "lara/train.hpp"

namespace fs = std::filesystem;
using namespace lara;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "configuration file (TOML subset)");
  cmd->add_option("--override", opts.overrides,
                  "dotted key=value override, e.g. model.latent_count=64");
  cmd->add_option("--seed", opts.seed, "seed override (train.seed)");
}

AppConfig resolve_config(const CommonOpts& opts) {
  AppConfig cfg;
  if (!opts.config_path.empty()) cfg = load_config(opts.config_path);
  for (const std::string& kv : opts.overrides) apply_override(cfg, kv);
  if (opts.seed >= 0) cfg.train.seed = static_cast<uint64_t>(opts.seed);
  cfg.validate();
  return cfg;
}

void echo_config(const AppConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "config.toml");
  LARA_CHECK_IO(f.good(), "cannot write config echo in ", dir);
  f << config_to_toml(cfg);
}

int cmd_gen_data(const CommonOpts& opts, const std::string& out, int count) {
  AppConfig cfg = resolve_config(opts);
  std::vector<RenderedSample> samples = generate_dataset(cfg, count, cfg.train.seed);
  write_dataset(samples, out, cfg);
  echo_config(cfg, out);
  int64_t boxes = 0, occupied = 0, cells = 0;
  for (const auto& s : samples) {
    boxes += static_cast<int64_t>(s.scene.boxes.size());
    for (uint8_t v : s.bev_gt) occupied += v;
    cells += static_cast<int64_t>(s.bev_gt.size());
  }
  std::cout << "wrote " << samples.size() << " samples to " << out << "\n"
            << "  cameras: " << cfg.model.cameras << " @ " << cfg.model.image_h << "x"
            << cfg.model.image_w << ", bev " << cfg.model.bev_h << "x" << cfg.model.bev_w
            << " (" << cfg.model.cell_meters << " m cells)\n"
            << "  boxes total: " << boxes << ", occupancy: "
            << (cells ? 100.0 * double(occupied) / double(cells) : 0.0) << "%\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& out) {
  AppConfig cfg = resolve_config(opts);
  if (!out.empty()) cfg.train.out_dir = out;
  std::vector<TrainingSample> train_set = load_training_set(cfg.train.dataset);
  std::vector<TrainingSample> val_set;
  if (!cfg.train.val_dataset.empty()) val_set = load_training_set(cfg.train.val_dataset);
  echo_config(cfg, cfg.train.out_dir);

  Trainer trainer(cfg, std::move(train_set), std::move(val_set));
  trainer.run(-1, [](const MetricsRecord& rec) {
    std::cout << "step " << rec.step << "  loss " << rec.loss << "  iou " << rec.iou << "  ("
              << rec.seconds << " s)\n";
  });
  std::cout << "final checkpoint: " << (fs::path(cfg.train.out_dir) / "checkpoint.lara").string()
            << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint, const std::string& dataset,
             const std::string& out) {
  AppConfig cfg = resolve_config(opts);
  std::vector<TrainingSample> set = load_training_set(dataset.empty() ? cfg.train.dataset
                                                                      : dataset);
  Trainer trainer(cfg, set);
  if (!checkpoint.empty()) trainer.load_checkpoint(checkpoint);
  const double iou = trainer.evaluate(set);
  const double loss = trainer.mean_loss(set);
  std::cout << "samples " << set.size() << "  loss " << loss << "  iou " << iou << "\n";
  if (!out.empty()) {
    echo_config(cfg, out);
    std::ofstream f(fs::path(out) / "eval.csv");
    f << "samples,loss,iou\n" << set.size() << "," << loss << "," << iou << "\n";
  }
  return 0;
}

int cmd_sweep(const CommonOpts& opts, const std::string& axis, std::vector<int64_t> values,
              const std::string& out) {
  LARA_CHECK_ARG(axis == "N" || axis == "M" || axis == "L",
                 "sweep axis must be one of N, M, L (got \"", axis, "\")");
  LARA_CHECK_ARG(!values.empty(), "sweep needs at least one value");
  AppConfig base = resolve_config(opts);
  LARA_CHECK_ARG(!base.train.val_dataset.empty(),
                 "sweep requires train.val_dataset for the reported IoU");
  std::vector<TrainingSample> train_set = load_training_set(base.train.dataset);
  std::vector<TrainingSample> val_set = load_training_set(base.train.val_dataset);

  const std::string sweep_dir = out.empty() ? base.train.out_dir : out;
  echo_config(base, sweep_dir);
  std::ofstream csv(fs::path(sweep_dir) / "sweep.csv");
  LARA_CHECK_IO(csv.good(), "cannot write sweep.csv in ", sweep_dir);
  csv << axis << ",iou\n";

  for (int64_t v : values) {
    AppConfig cfg = base;
    apply_override(cfg, "model." + axis + "=" + std::to_string(v));
    cfg.validate();
    cfg.train.out_dir = (fs::path(sweep_dir) / (axis + "_" + std::to_string(v))).string();
    echo_config(cfg, cfg.train.out_dir);
    Trainer trainer(cfg, train_set, val_set);
    trainer.run();
    const double iou = trainer.evaluate(val_set);
    csv << v << "," << iou << "\n";
    csv.flush();
    std::cout << axis << "=" << v << "  val iou " << iou << "\n";
  }
  std::cout << "sweep table: " << (fs::path(sweep_dir) / "sweep.csv").string() << "\n";
  return 0;
}

int cmd_attn_analyze(const CommonOpts& opts, const std::string& checkpoint,
                     const std::string& dataset, int sample_index,
                     std::vector<std::string> selections, const std::string& out) {
  AppConfig cfg = resolve_config(opts);
  std::vector<RenderedSample> raw = read_dataset(dataset.empty() ? cfg.train.dataset : dataset);
  LARA_CHECK_ARG(sample_index >= 0 && sample_index < static_cast<int>(raw.size()),
                 "sample index ", sample_index, " out of range (", raw.size(), " samples)");
  const RenderedSample& sample = raw[static_cast<size_t>(sample_index)];
  TrainingSample ts = to_training_sample(sample);

  ParamStore store(cfg.train.seed);
  LaRaModel model(cfg.model, store);
  if (!checkpoint.empty()) {
    std::vector<std::pair<std::string, Tensor>> params;
    for (auto& [name, t] : load_tensors(checkpoint))
      if (name.rfind("opt.", 0) != 0) params.emplace_back(name, std::move(t));
    load_params_into(store, params);
  }

  AttentionRecord rec = capture_attention(model, ts.rig, ts.images);
  if (selections.empty()) selections = {"n=0,h=0", "n=0,h=avg", "n=avg,h=0"};
  std::vector<Selection> sels;
  for (const auto& s : selections) sels.push_back(parse_selection(s));

  echo_config(cfg, out);
  std::vector<std::string> files = emit_plots(rec, sample.images, sels, out);
  save_attention_record(rec, (fs::path(out) / "attention.lara").string());
  std::cout << "wrote " << files.size() << " plot files plus attention.lara to " << out << "\n";
  return 0;
}

int cmd_show_config(const CommonOpts& opts) {
  std::cout << config_to_toml(resolve_config(opts));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LaRa multi-camera BEV segmentation toolkit"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts, sweep_opts, attn_opts, show_opts;
  std::string gen_out = "data/train", train_out, eval_ckpt, eval_dataset, eval_out;
  std::string sweep_axis = "N", sweep_out, attn_ckpt, attn_dataset, attn_out = "analysis";
  std::vector<int64_t> sweep_values;
  std::vector<std::string> attn_selections;
  int gen_count = 16, attn_sample = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_opts);
  gen->add_option("--out", gen_out, "dataset directory");
  gen->add_option("--count", gen_count, "number of samples");

  CLI::App* train = app.add_subcommand("train", "train on a generated dataset");
  add_common(train, train_opts);
  train->add_option("--out", train_out, "output directory (overrides train.out_dir)");

  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(evalc, eval_opts);
  evalc->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  evalc->add_option("--dataset", eval_dataset, "dataset directory (default train.dataset)");
  evalc->add_option("--out", eval_out, "optional output directory");

  CLI::App* sweep = app.add_subcommand("sweep", "train a hyperparameter sweep");
  add_common(sweep, sweep_opts);
  sweep->add_option("--axis", sweep_axis, "axis: N, M or L");
  sweep->add_option("--values", sweep_values, "axis values")->required();
  sweep->add_option("--out", sweep_out, "sweep output directory");

  CLI::App* attn = app.add_subcommand("attn-analyze", "attention reprojection and polar plots");
  add_common(attn, attn_opts);
  attn->add_option("--checkpoint", attn_ckpt, "checkpoint file (optional: random init)");
  attn->add_option("--dataset", attn_dataset, "dataset directory (default train.dataset)");
  attn->add_option("--sample", attn_sample, "sample index");
  attn->add_option("--selection", attn_selections, "selection expression, e.g. n=10,h=5");
  attn->add_option("--out", attn_out, "output directory");

  CLI::App* show = app.add_subcommand("show-config", "print the fully resolved configuration");
  add_common(show, show_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts, gen_out, gen_count);
    if (train->parsed()) return cmd_train(train_opts, train_out);
    if (evalc->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_dataset, eval_out);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_axis, sweep_values, sweep_out);
    if (attn->parsed())
      return cmd_attn_analyze(attn_opts, attn_ckpt, attn_dataset, attn_sample, attn_selections,
                              attn_out);
    if (show->parsed()) return cmd_show_config(show_opts);
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
