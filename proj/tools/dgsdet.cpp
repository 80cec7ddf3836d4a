// dgsdet: operator CLI for the DGSM/DGST detection engine.
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dgs/bench.hpp"
#include "dgs/checkpoint.hpp"
#include "dgs/data.hpp"
#include "dgs/gradcheck.hpp"
#include "dgs/loss.hpp"
#include "dgs/model.hpp"
#include "dgs/postprocess.hpp"

namespace {

std::uint64_t env_seed_default() {
  const char* s = std::getenv("DGS_SEED");
  if (!s) return 0;
  return std::strtoull(s, nullptr, 10);
}

dgs::ModelConfig resolve_config(const std::string& config_path, const std::string& preset) {
  if (!config_path.empty()) return dgs::ModelConfig::load_file(config_path);
  if (!preset.empty()) return dgs::ModelConfig::preset(preset);
  return dgs::ModelConfig{};
}

std::string sig4(double v) {
  char buf[32];
  if (v >= 0.9995) {
    std::snprintf(buf, sizeof(buf), "%.3f", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.4f", v);
  }
  return buf;
}

int run(int argc, char** argv) {
  CLI::App app{"dgsdet: lightweight DGSM/DGST object detection engine"};
  app.require_subcommand(1);

  std::string config_path, preset, ckpt_path, image_path, data_dir, split = "test";
  std::string annotate_path, out_curve = "curve.txt", out_ckpt = "trained.ckpt";
  float conf = 0.25f, iou_thr = 0.45f, lr = 0.01f;
  int runs = 50, warmup = 5, size = 640, steps = 300, seeds = 20;
  std::uint64_t seed = env_seed_default();

  auto* sum_cmd = app.add_subcommand("summary", "per-layer table and totals");
  sum_cmd->add_option("--config", config_path);
  sum_cmd->add_option("--preset", preset);
  sum_cmd->add_option("--size", size);

  auto* infer_cmd = app.add_subcommand("infer", "detect objects in one image");
  infer_cmd->add_option("--ckpt", ckpt_path)->required();
  infer_cmd->add_option("--image", image_path)->required();
  infer_cmd->add_option("--config", config_path);
  infer_cmd->add_option("--conf", conf);
  infer_cmd->add_option("--iou", iou_thr);
  infer_cmd->add_option("--annotate", annotate_path);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--ckpt", ckpt_path)->required();
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--config", config_path);
  eval_cmd->add_option("--conf", conf);
  eval_cmd->add_option("--iou", iou_thr);
  eval_cmd->add_option("--seed", seed);

  auto* bench_cmd = app.add_subcommand("bench", "forward/NMS timing breakdown");
  bench_cmd->add_option("--ckpt", ckpt_path)->required();
  bench_cmd->add_option("--config", config_path);
  bench_cmd->add_option("--runs", runs);
  bench_cmd->add_option("--warmup", warmup);
  bench_cmd->add_option("--size", size);
  bench_cmd->add_option("--seed", seed);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  grad_cmd->add_option("--seed", seed);
  grad_cmd->add_option("--seeds", seeds);

  auto* train_cmd = app.add_subcommand("train-tiny", "desk-scale SGD sanity trainer");
  train_cmd->add_option("--data", data_dir)->required();
  train_cmd->add_option("--config", config_path);
  train_cmd->add_option("--steps", steps);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--out-curve", out_curve);
  train_cmd->add_option("--out-ckpt", out_ckpt);

  CLI11_PARSE(app, argc, argv);

  if (sum_cmd->parsed()) {
    dgs::ModelConfig cfg = resolve_config(config_path, preset);
    dgs::Model model = dgs::Model::build(cfg, seed);
    dgs::Summary s = model.summarize(size, size);
    std::cout << dgs::format_summary(s);
    return 0;
  }

  if (infer_cmd->parsed()) {
    dgs::ModelConfig cfg = resolve_config(config_path, preset);
    dgs::Model model = dgs::Model::build(cfg, 0);
    dgs::load_checkpoint(model, ckpt_path);
    dgs::Tensor image = dgs::load_image(image_path);
    std::vector<dgs::Detection> dets = dgs::run_inference(model, image, conf, iou_thr);
    std::cout << dgs::detection_lines(dets);
    if (!annotate_path.empty()) {
      dgs::Tensor annotated = image;
      for (const dgs::Detection& d : dets) dgs::draw_box(annotated, d.box, d.class_id);
      dgs::save_image_ppm(annotate_path, annotated);
    }
    return 0;
  }

  if (eval_cmd->parsed()) {
    dgs::ModelConfig cfg = resolve_config(config_path, preset);
    dgs::Model model = dgs::Model::build(cfg, 0);
    dgs::load_checkpoint(model, ckpt_path);
    std::vector<std::string> paths = dgs::list_dataset_images(data_dir);
    dgs::SplitResult sp = dgs::split_dataset(paths, seed);
    const std::vector<std::string>& chosen =
        split == "train" ? sp.train : split == "val" ? sp.val : sp.test;
    dgs::check(!chosen.empty(), "eval: selected split is empty");
    std::vector<std::vector<dgs::Detection>> preds;
    std::vector<std::vector<dgs::GroundTruth>> gts;
    for (const std::string& p : chosen) {
      dgs::Sample s = dgs::load_sample(p);
      preds.push_back(dgs::run_inference(model, s.image, conf, iou_thr));
      std::vector<dgs::GroundTruth> g;
      float ow = static_cast<float>(s.image.shape.w), oh = static_cast<float>(s.image.shape.h);
      for (const dgs::Label& lb : s.labels) {
        dgs::Box b{(lb.cx - 0.5f * lb.w) * ow, (lb.cy - 0.5f * lb.h) * oh,
                   (lb.cx + 0.5f * lb.w) * ow, (lb.cy + 0.5f * lb.h) * oh};
        g.push_back(dgs::GroundTruth{b, lb.class_id});
      }
      gts.push_back(std::move(g));
    }
    std::vector<double> thresholds;
    for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);
    dgs::MetricsReport rep = dgs::evaluate(preds, gts, cfg.num_classes, thresholds);
    std::cout << sig4(rep.precision) << " " << sig4(rep.recall) << " " << sig4(rep.map50) << " "
              << sig4(rep.map5095) << " " << sig4(rep.f1) << "\n";
    return 0;
  }

  if (bench_cmd->parsed()) {
    dgs::ModelConfig cfg = resolve_config(config_path, preset);
    cfg.input_w = cfg.input_h = size;
    dgs::Model model = dgs::Model::build(cfg, 0);
    dgs::load_checkpoint(model, ckpt_path);
    dgs::BenchReport rep = dgs::bench_model(model, runs, warmup, size, conf, iou_thr, seed);
    std::cout << dgs::format_bench(rep);
    return 0;
  }

  if (grad_cmd->parsed()) {
    std::vector<dgs::refcheck::CheckResult> results = dgs::refcheck::full_suite(seed, seeds);
    bool ok = true;
    for (const auto& r : results) {
      std::cout << (r.pass() ? "pass" : "FAIL") << "  " << r.name << "  max_err=" << r.max_err
                << "  tol=" << r.tol << "\n";
      ok = ok && r.pass();
    }
    std::cout << (ok ? "gradcheck: all passed\n" : "gradcheck: FAILURES\n");
    return ok ? 0 : 2;
  }

  if (train_cmd->parsed()) {
    dgs::ModelConfig cfg = resolve_config(config_path, preset);
    dgs::Model model = dgs::Model::build(cfg, seed);
    std::vector<std::string> paths = dgs::list_dataset_images(data_dir);
    dgs::check(!paths.empty(), "train-tiny: no images under " + data_dir);
    std::vector<dgs::Sample> samples;
    for (const std::string& p : paths) samples.push_back(dgs::load_sample(p));
    dgs::TrainResult tr = dgs::train_tiny(model, samples, steps, lr, seed);
    std::ofstream curve(out_curve);
    dgs::check(curve.good(), "cannot write " + out_curve);
    curve << "step box obj cls total\n";
    for (std::size_t i = 0; i < tr.curve.size(); ++i) {
      const dgs::LossBreakdown& lb = tr.curve[i];
      curve << i << " " << lb.box_loss << " " << lb.obj_loss << " " << lb.cls_loss << " "
            << lb.total << "\n";
    }
    dgs::save_checkpoint(model, out_ckpt);
    std::cout << "steps " << tr.curve.size() << " first_total " << tr.curve.front().total
              << " last_total " << tr.curve.back().total << "\n";
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dgs::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const dgs::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
