// extern-C shim over the core library. Exceptions are caught at this
// boundary and turned into status codes plus a thread-local message.

#include "mm2d3d.h"

#include <filesystem>
#include <fstream>
#include <string>

#include "core/common.hpp"
#include "core/erf.hpp"
#include "core/model.hpp"
#include "core/scene.hpp"
#include "core/trainer.hpp"

struct mm2d3d_dataset {
  mm::Dataset data;
};

struct mm2d3d_model {
  mm::Model model;
};

namespace {

thread_local std::string g_last_error;

mm2d3d_status to_status(const mm::Error& e) {
  switch (e.kind()) {
    case mm::ErrorKind::usage: return MM2D3D_ERR_USAGE;
    case mm::ErrorKind::data: return MM2D3D_ERR_DATA;
    case mm::ErrorKind::numeric: return MM2D3D_ERR_NUMERIC;
  }
  return MM2D3D_ERR_USAGE;
}

template <class Fn>
mm2d3d_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return MM2D3D_OK;
  } catch (const mm::Error& e) {
    g_last_error = e.what();
    return to_status(e);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MM2D3D_ERR_USAGE;
  }
}

mm2d3d_status require(bool ok, const char* msg) {
  if (ok) return MM2D3D_OK;
  g_last_error = msg;
  return MM2D3D_ERR_USAGE;
}

mm2d3d_status run_training(const char* config_file, const char* out_dir, int threads,
                           mm::TrainMode mode, const char* pseudo_file) {
  if (auto s = require(config_file && out_dir, "train: config and out_dir are required")) return s;
  return guarded([&] {
    mm::TrainConfig cfg = mm::TrainConfig::from_file(config_file);
    if (threads > 0) cfg.threads = threads;
    mm::PseudoLabelSet pseudo;
    const mm::PseudoLabelSet* pp = nullptr;
    std::string pseudo_path = pseudo_file ? pseudo_file : cfg.pseudo_path;
    if (mode == mm::TrainMode::adapt && !pseudo_path.empty()) {
      pseudo = mm::PseudoLabelSet::load(pseudo_path);
      pp = &pseudo;
    }
    mm::train_model(cfg, mode, out_dir, pp);
  });
}

}  // namespace

extern "C" {

const char* mm2d3d_version(void) { return "1.0.0"; }

const char* mm2d3d_last_error(void) { return g_last_error.c_str(); }

mm2d3d_status mm2d3d_generate(const char* spec_file, int count, const char* out_dir,
                              int threads) {
  if (auto s = require(spec_file && out_dir, "generate: spec_file and out_dir are required"))
    return s;
  return guarded([&] {
    mm::SceneSpec spec = mm::load_scene_spec(spec_file);
    if (count < 1) throw mm::UsageError("generate: count must be >= 1");
    mm::Dataset ds = mm::generate(spec, count, threads);
    std::filesystem::create_directories(out_dir);
    mm::save_dataset(ds, (std::filesystem::path(out_dir) / "data.mm23").string());
  });
}

mm2d3d_status mm2d3d_dataset_open(const char* path, mm2d3d_dataset** out) {
  if (auto s = require(path && out, "dataset_open: path and out are required")) return s;
  *out = nullptr;
  return guarded([&] { *out = new mm2d3d_dataset{mm::load_dataset_any(path)}; });
}

void mm2d3d_dataset_close(mm2d3d_dataset* ds) { delete ds; }

int mm2d3d_dataset_size(const mm2d3d_dataset* ds) {
  return ds ? static_cast<int>(ds->data.size()) : -1;
}

int mm2d3d_dataset_points(const mm2d3d_dataset* ds, int sample) {
  if (!ds || sample < 0 || static_cast<std::size_t>(sample) >= ds->data.size()) return -1;
  return static_cast<int>(ds->data.samples[static_cast<std::size_t>(sample)].cloud.size());
}

int mm2d3d_dataset_domain(const mm2d3d_dataset* ds, int sample) {
  if (!ds || sample < 0 || static_cast<std::size_t>(sample) >= ds->data.size()) return -1;
  return static_cast<int>(ds->data.samples[static_cast<std::size_t>(sample)].domain);
}

mm2d3d_status mm2d3d_model_open(const char* checkpoint_file, mm2d3d_model** out) {
  if (auto s = require(checkpoint_file && out, "model_open: checkpoint and out are required"))
    return s;
  *out = nullptr;
  return guarded([&] {
    mm::NamedTensors t = mm::load_checkpoint(checkpoint_file);
    *out = new mm2d3d_model{mm::Model(t)};
  });
}

void mm2d3d_model_close(mm2d3d_model* model) { delete model; }

int mm2d3d_model_classes(const mm2d3d_model* model) {
  return model ? model->model.config().num_classes : -1;
}

mm2d3d_status mm2d3d_train(const char* config_file, const char* out_dir, int threads) {
  return run_training(config_file, out_dir, threads, mm::TrainMode::source_only, nullptr);
}

mm2d3d_status mm2d3d_adapt(const char* config_file, const char* out_dir, const char* pseudo_file,
                           int threads) {
  return run_training(config_file, out_dir, threads, mm::TrainMode::adapt, pseudo_file);
}

mm2d3d_status mm2d3d_pseudolabel(const mm2d3d_model* model, const mm2d3d_dataset* target,
                                 double keep_fraction, const char* out_file) {
  if (auto s = require(model && target && out_file, "pseudolabel: model, target and out_file"))
    return s;
  return guarded([&] {
    mm::PseudoLabelSet ps =
        mm::generate_pseudo_labels(model->model, target->data, keep_fraction);
    ps.save(out_file);
  });
}

mm2d3d_status mm2d3d_evaluate(const mm2d3d_model* model, const mm2d3d_dataset* data,
                              const char* report_file, mm2d3d_eval_result* out) {
  if (auto s = require(model && data, "evaluate: model and data are required")) return s;
  return guarded([&] {
    mm::EvalReport r = mm::evaluate_model(model->model, data->data);
    if (out) {
      out->miou_2d = r.s2d.miou;
      out->miou_3d = r.s3d.miou;
      out->miou_avg = r.avg.miou;
      out->miou_fusion = r.has_fusion ? r.fusion.miou : -1.0;
      out->num_classes = r.num_classes;
    }
    if (report_file) {
      std::ofstream f(report_file);
      if (!f) throw mm::DataError(std::string("cannot write report: ") + report_file);
      f << r.to_table({"ground", "building", "vehicle", "vegetation"});
    }
  });
}

mm2d3d_status mm2d3d_erf(const mm2d3d_model* model, const mm2d3d_dataset* data, int sample,
                         int point, const char* out_dir) {
  if (auto s = require(model && data && out_dir, "erf: model, data and out_dir are required"))
    return s;
  return guarded([&] {
    if (sample < 0 || static_cast<std::size_t>(sample) >= data->data.size())
      throw mm::UsageError("erf: sample index out of range");
    const mm::Sample& s = data->data.samples[static_cast<std::size_t>(sample)];
    mm::ErfResult r = mm::compute_erf(model->model, s, point);
    mm::export_erf(r, s, out_dir);
  });
}

}  // extern "C"
