// Command line front end. Subcommands map 1:1 onto the C API; all errors
// land on stderr with the "mm2d3d:" prefix and the library's status code
// becomes the process exit code (0 ok, 1 usage, 2 data/format, 3 numeric).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mm2d3d.h"

namespace {

int finish(mm2d3d_status status) {
  if (status != MM2D3D_OK) std::cerr << "mm2d3d: " << mm2d3d_last_error() << "\n";
  return static_cast<int>(status);
}

struct DatasetHandle {
  mm2d3d_dataset* ds = nullptr;
  ~DatasetHandle() { mm2d3d_dataset_close(ds); }
};

struct ModelHandle {
  mm2d3d_model* m = nullptr;
  ~ModelHandle() { mm2d3d_model_close(m); }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mm2d3d: multi-modal 2D/3D semantic segmentation with domain adaptation"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (1 = fully deterministic)");

  auto* gen = app.add_subcommand("generate", "render a synthetic dataset from a scene spec");
  std::string gen_spec, gen_out;
  int gen_count = 0;
  gen->add_option("--spec", gen_spec, "scene spec file")->required();
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of samples")->required();

  auto* train = app.add_subcommand("train", "source-only (domain generalization) training");
  std::string train_cfg, train_out;
  train->add_option("--config", train_cfg, "training config file")->required();
  train->add_option("--out", train_out, "output directory")->required();

  auto* adapt = app.add_subcommand("adapt", "UDA training with target-domain data");
  std::string adapt_cfg, adapt_out, adapt_pseudo;
  adapt->add_option("--config", adapt_cfg, "training config file")->required();
  adapt->add_option("--out", adapt_out, "output directory")->required();
  adapt->add_option("--pseudo", adapt_pseudo, "pseudo-label file (enables the self-training term)");

  auto* pl = app.add_subcommand("pseudolabel", "generate filtered pseudo labels for a target set");
  std::string pl_ckpt, pl_target, pl_out;
  double pl_keep = 0.66;
  pl->add_option("--checkpoint", pl_ckpt, "trained checkpoint")->required();
  pl->add_option("--target", pl_target, "target dataset directory")->required();
  pl->add_option("--keep", pl_keep, "per-class keep fraction in (0,1]");
  pl->add_option("--out", pl_out, "output pseudo-label file")->required();

  auto* ev = app.add_subcommand("evaluate", "per-class IoU and 2D/3D/Avg mIoU of a checkpoint");
  std::string ev_ckpt, ev_data, ev_report;
  ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
  ev->add_option("--data", ev_data, "labeled dataset directory")->required();
  ev->add_option("--report", ev_report, "report file to write")->required();

  auto* erf = app.add_subcommand("erf", "effective-receptive-field analysis at one point");
  std::string erf_ckpt, erf_data, erf_out;
  int erf_sample = 0, erf_point = 0;
  erf->add_option("--checkpoint", erf_ckpt, "trained checkpoint")->required();
  erf->add_option("--data", erf_data, "dataset directory")->required();
  erf->add_option("--sample", erf_sample, "sample index")->required();
  erf->add_option("--point", erf_point, "anchor point index")->required();
  erf->add_option("--out", erf_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mm2d3d: " << e.what() << "\n";
    return 1;
  }

  if (gen->parsed())
    return finish(mm2d3d_generate(gen_spec.c_str(), gen_count, gen_out.c_str(), threads));

  if (train->parsed())
    return finish(mm2d3d_train(train_cfg.c_str(), train_out.c_str(), threads));

  if (adapt->parsed())
    return finish(mm2d3d_adapt(adapt_cfg.c_str(), adapt_out.c_str(),
                               adapt_pseudo.empty() ? nullptr : adapt_pseudo.c_str(), threads));

  if (pl->parsed()) {
    ModelHandle model;
    if (auto s = mm2d3d_model_open(pl_ckpt.c_str(), &model.m)) return finish(s);
    DatasetHandle target;
    if (auto s = mm2d3d_dataset_open(pl_target.c_str(), &target.ds)) return finish(s);
    return finish(mm2d3d_pseudolabel(model.m, target.ds, pl_keep, pl_out.c_str()));
  }

  if (ev->parsed()) {
    ModelHandle model;
    if (auto s = mm2d3d_model_open(ev_ckpt.c_str(), &model.m)) return finish(s);
    DatasetHandle data;
    if (auto s = mm2d3d_dataset_open(ev_data.c_str(), &data.ds)) return finish(s);
    mm2d3d_eval_result r;
    if (auto s = mm2d3d_evaluate(model.m, data.ds, ev_report.c_str(), &r)) return finish(s);
    std::ifstream report(ev_report);
    std::cout << report.rdbuf();
    return 0;
  }

  if (erf->parsed()) {
    ModelHandle model;
    if (auto s = mm2d3d_model_open(erf_ckpt.c_str(), &model.m)) return finish(s);
    DatasetHandle data;
    if (auto s = mm2d3d_dataset_open(erf_data.c_str(), &data.ds)) return finish(s);
    return finish(mm2d3d_erf(model.m, data.ds, erf_sample, erf_point, erf_out.c_str()));
  }

  std::cerr << "mm2d3d: no subcommand\n";
  return 1;
}
