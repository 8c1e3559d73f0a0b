#include "rae/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "rae/check_catalog.hpp"
#include "rae/checkpoint.hpp"
#include "rae/finetune.hpp"
#include "rae/pretrain.hpp"
#include "rae/svg.hpp"

namespace fs = std::filesystem;

namespace rae::cli {

namespace {

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&t));
  return buf;
}

Dataset load_split(const RunConfig& rc, const std::string& split) {
  if (rc.data.source == "synthetic") {
    const auto classes = parse_shape_classes(rc.data.classes);
    const std::size_t per_class =
        split == "train" ? rc.data.train_per_class : rc.data.test_per_class;
    return make_synthetic_dataset(classes, per_class, rc.data.points, rc.data.noise, rc.seed, split);
  }
  return load_dataset_dir(rc.data.dir, split);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

// Per-cloud per-patch feature targets for the external reconstruction mode.
// Text format: "n_clouds patches feature_dim" then one whitespace row of
// feature_dim values per (cloud, patch).
template <class T>
std::vector<Tensor<T>> load_feature_targets(const std::string& path, std::size_t n_clouds,
                                            const ModelConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature target file '" + path + "'");
  std::size_t clouds = 0, patches = 0, dim = 0;
  in >> clouds >> patches >> dim;
  if (!in) throw IoError(path + ": bad header (expected 'clouds patches dim')");
  if (clouds != n_clouds || patches != cfg.patch_count || dim != cfg.feature_dim)
    throw ConfigError("run.recon_features: file geometry " + std::to_string(clouds) + "x" +
                      std::to_string(patches) + "x" + std::to_string(dim) +
                      " does not match corpus/model");
  std::vector<Tensor<T>> out;
  out.reserve(clouds);
  for (std::size_t c = 0; c < clouds; ++c) {
    Tensor<T> t({patches, dim});
    for (std::size_t i = 0; i < patches * dim; ++i) {
      double v;
      if (!(in >> v)) throw IoError(path + ": truncated feature table");
      t[i] = static_cast<T>(v);
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct CsvWriter {
  std::ofstream out;
  explicit CsvWriter(const std::string& path, const std::string& header) : out(path) {
    if (!out) throw IoError("cannot write '" + path + "'");
    out << header << "\n";
  }
  template <class... Args>
  void row(Args&&... args) {
    bool first = true;
    ((out << (first ? "" : ","), first = false, out << args), ...);
    out << "\n";
  }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

// Reads one named column out of a step CSV (for loss-curve overlays).
std::vector<double> read_csv_column(const std::string& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty log");
  const auto headers = split_list(line, ',');
  std::size_t col = headers.size();
  for (std::size_t i = 0; i < headers.size(); ++i)
    if (headers[i] == column) col = i;
  if (col == headers.size()) throw IoError(path + ": no column '" + column + "'");
  std::vector<double> values;
  while (std::getline(in, line)) {
    const auto cells = split_list(line, ',');
    if (cells.size() > col) values.push_back(std::stod(cells[col]));
  }
  return values;
}

template <class T>
Checkpoint<T> open_checkpoint(const RunConfig& rc) {
  if (!fs::exists(rc.checkpoint))
    throw ConfigError("finetune.checkpoint: no such file '" + rc.checkpoint + "'");
  return load_checkpoint<T>(rc.checkpoint);
}

// The checkpoint's [model] section is authoritative for geometry; the
// current invocation keeps its own training/finetune knobs, including the
// mask ratio (a runtime behavior, not stored weight geometry).
template <class T>
RunConfig adopt_model(const Checkpoint<T>& ck, RunConfig rc) {
  const RunConfig stored = RunConfig::from_ini_string(ck.config_ini);
  const double requested_ratio = rc.model.mask_ratio;
  rc.model = stored.model;
  rc.model.mask_ratio = requested_ratio;
  return rc;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

template <class T>
int pretrain_impl(RunConfig rc, const std::string& run_dir) {
  if (rc.no_regressor) rc.model.variant = PipelineVariant::decoder_only;
  const Dataset corpus = load_split(rc, "train");

  std::vector<Tensor<T>> feature_targets;
  const std::vector<Tensor<T>>* targets_ptr = nullptr;
  if (rc.model.recon_target == ReconTarget::external_features) {
    feature_targets = load_feature_targets<T>(rc.recon_features, corpus.size(), rc.model);
    targets_ptr = &feature_targets;
  }

  ModelState<T> state;
  state.cfg = rc.model;
  state.init(rc.seed);
  AdamW<T> opt(0.9, 0.999, 1e-8, rc.weight_decay);

  CsvWriter log(run_dir + "/log.csv", "step,l_rec,l_align,l_total,lr,grad_norm,seconds");
  const long steps_per_epoch =
      static_cast<long>((corpus.size() + rc.batch_size - 1) / rc.batch_size);
  std::vector<double> rec_curve, align_curve, total_curve;
  const auto on_step = [&](const LossReport& r) {
    log.row(r.step, fmt(r.l_rec), fmt(r.l_align), fmt(r.l_total), fmt(r.lr), fmt(r.grad_norm),
            fmt(r.seconds));
    rec_curve.push_back(r.l_rec);
    align_curve.push_back(r.l_align);
    total_curve.push_back(r.l_total);
    if (rc.ckpt_every > 0 && (r.step + 1) % (rc.ckpt_every * steps_per_epoch) == 0)
      save_checkpoint(run_dir + "/ckpt-step" + std::to_string(r.step + 1) + ".rae", state, opt,
                      rc.to_ini(), Rng(rc.seed));
  };

  const auto reports = pretrain_run(state, opt, corpus.clouds, rc, targets_ptr, on_step);
  save_checkpoint(run_dir + "/checkpoint.rae", state, opt, rc.to_ini(), Rng(rc.seed));

  if (!reports.empty()) {
    std::vector<ChartSeries> series{{"l_rec", rec_curve}, {"l_align", align_curve},
                                    {"l_total", total_curve}};
    if (!rc.compare_log.empty())
      series.push_back({"l_rec (baseline)", read_csv_column(rc.compare_log, "l_rec")});
    write_line_chart(run_dir + "/loss.svg", "pretraining loss", series);
    std::printf("final: l_rec=%.6g l_align=%.6g l_total=%.6g (%zu steps)\n", reports.back().l_rec,
                reports.back().l_align, reports.back().l_total, reports.size());
    if (!rc.compare_log.empty()) {
      const auto baseline = read_csv_column(rc.compare_log, "l_rec");
      if (!baseline.empty())
        std::printf("comparison: final l_rec %.6g vs baseline %.6g\n", reports.back().l_rec,
                    baseline.back());
    }
  }
  std::printf("checkpoint: %s/checkpoint.rae\n", run_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

template <class T>
int finetune_impl(const RunConfig& rc_in, const std::string& run_dir) {
  auto ck = open_checkpoint<T>(rc_in);
  RunConfig rc = adopt_model(ck, rc_in);
  const Dataset train = load_split(rc, "train");
  const Dataset test = load_split(rc, "test");

  const std::string run_id = fs::path(run_dir).filename().string();
  CsvWriter results(run_dir + "/results.csv",
                    "run_id,protocol,topology,seed,epoch,train_acc,test_acc");
  CsvWriter summary(run_dir + "/summary.csv",
                    "run_id,protocol,topology,feature_width,final_train_acc,final_test_acc,"
                    "backbone_drift");

  for (const std::string& topo : split_list(rc.topology, ',')) {
    RunConfig cell = rc;
    cell.topology = topo;
    ModelState<T> state = ck.state;
    state.cfg = cell.model;

    ParamStore<T> backbone_before;
    for (const auto& name : state.params.names())
      if (name.rfind("head.", 0) != 0) backbone_before.add(name, state.params.at(name));
    const std::uint64_t checksum_before = backbone_before.checksum();

    const auto history = finetune_run(
        state, train, test, cell, cell.epochs, [&](const FinetuneEpoch& e) {
          results.row(run_id, cell.protocol, topo, cell.seed, e.epoch, fmt(e.train_acc),
                      fmt(e.test_acc));
        });

    ParamStore<T> backbone_after;
    for (const auto& name : state.params.names())
      if (name.rfind("head.", 0) != 0) backbone_after.add(name, state.params.at(name));
    const bool drift = backbone_after.checksum() != checksum_before;
    const std::size_t width = feature_width(topology_spec_from(cell), cell.model.dim);

    const double final_train = history.empty() ? 0.0 : history.back().train_acc;
    const double final_test = history.empty() ? 0.0 : history.back().test_acc;
    summary.row(run_id, cell.protocol, topo, width, fmt(final_train), fmt(final_test),
                drift ? "yes" : "none");
    std::printf("topology %s: feature_width=%zu final train_acc=%.4f test_acc=%.4f%s\n",
                topo.c_str(), width, final_train, final_test,
                drift ? "" : " (backbone unchanged)");

    AdamW<T> fresh_opt(0.9, 0.999, 1e-8, rc.weight_decay);
    save_checkpoint(run_dir + "/finetuned-" + topo + ".rae", state, fresh_opt, cell.to_ini(),
                    Rng(cell.seed));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <class T>
int eval_impl(const RunConfig& rc_in, const std::string& run_dir) {
  auto ck = open_checkpoint<T>(rc_in);
  RunConfig rc = adopt_model(ck, rc_in);

  if (rc.few_shot) {
    const Dataset pool = load_split(rc, "train");
    ModelState<T> state = ck.state;
    state.cfg = rc.model;
    CsvWriter csv(run_dir + "/fewshot.csv", "episode,accuracy");
    const FewShotResult result =
        few_shot_eval(state, pool, rc, [&](std::size_t e, double acc) { csv.row(e, fmt(acc)); });
    CsvWriter summary(run_dir + "/fewshot_summary.csv",
                      "n_way,k_shot,n_query,episodes,mean_acc,std_acc");
    summary.row(rc.n_way, rc.k_shot, rc.n_query, rc.episodes, fmt(result.mean_acc),
                fmt(result.std_acc));
    std::printf("few-shot %zu-way %zu-shot: %.4f +/- %.4f over %zu episodes\n", rc.n_way, rc.k_shot,
                result.mean_acc, result.std_acc, rc.episodes);
    return 0;
  }

  // Classification evaluation of a finetuned checkpoint (head required).
  const RunConfig stored = RunConfig::from_ini_string(ck.config_ini);
  if (!ck.state.params.contains("head.out.w"))
    throw ConfigError("eval: checkpoint has no classification head; run finetune first");
  RunConfig eval_rc = rc;
  eval_rc.protocol = stored.protocol;
  eval_rc.topology = split_list(stored.topology, ',')[0];
  eval_rc.combine = stored.combine;
  eval_rc.virtual_queries = stored.virtual_queries;
  const Dataset test = load_split(rc, "test");
  ModelState<T> state = ck.state;
  state.cfg = rc.model;
  const TopologySpec spec = topology_spec_from(eval_rc);
  const Protocol protocol = eval_rc.protocol_enum();

  std::size_t correct = 0;
  CsvWriter csv(run_dir + "/eval.csv", "index,label,predicted");
  for (std::size_t i = 0; i < test.size(); ++i) {
    Tape<T> tape;
    Session<T> sess(tape, state.params, Session<T>::none());
    Var<T> feats = backbone_features(sess, state.cfg, spec, test.clouds[i],
                                     fold_seed(eval_rc.seed, {0xFE57u, i}));
    Var<T> logits = head_forward(sess, as_row(feats), protocol);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.value().size(); ++j)
      if (logits.value()[j] > logits.value()[best]) best = j;
    correct += static_cast<int>(best) == test.clouds[i].label;
    csv.row(i, test.clouds[i].label, best);
  }
  const double acc = test.size() ? static_cast<double>(correct) / test.size() : 0.0;
  std::printf("eval: %zu/%zu correct (%.4f)\n", correct, test.size(), acc);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationAxis {
  std::string name;
  std::vector<std::string> values;
};

std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "reg_depth") return {"2", "4", "8", "12"};
  if (axis == "dec_depth") return {"0", "1", "2", "4"};
  if (axis == "mask_ratio") return {"0.2", "0.4", "0.6", "0.8"};
  if (axis == "align_target") return {"ntxent", "infonce", "mse", "cosine"};
  if (axis == "regress_construct") return {"neither", "decoder_only", "regressor_only", "both"};
  if (axis == "topology") return {"a", "b", "c", "d"};
  throw ConfigError("run.axes: unknown axis '" + axis + "'");
}

std::vector<AblationAxis> parse_axes(const std::string& spec) {
  std::vector<AblationAxis> axes;
  for (const std::string& part : split_list(spec, ',')) {
    const std::size_t eq = part.find('=');
    AblationAxis axis;
    axis.name = eq == std::string::npos ? part : part.substr(0, eq);
    axis.values = eq == std::string::npos ? default_axis_values(axis.name)
                                          : split_list(part.substr(eq + 1), '|');
    (void)default_axis_values(axis.name);  // validates the axis name
    if (axis.values.empty()) throw ConfigError("run.axes: axis '" + axis.name + "' has no values");
    axes.push_back(std::move(axis));
  }
  if (axes.empty()) throw ConfigError("run.axes: empty axis list");
  return axes;
}

void apply_axis(RunConfig& rc, const std::string& axis, const std::string& value) {
  if (axis == "reg_depth")
    rc.model.reg_depth = std::stoul(value);
  else if (axis == "dec_depth")
    rc.model.dec_depth = std::stoul(value);
  else if (axis == "mask_ratio")
    rc.model.mask_ratio = std::stod(value);
  else if (axis == "align_target")
    rc.align_target = value;
  else if (axis == "regress_construct") {
    if (value == "both")
      rc.model.variant = PipelineVariant::both;
    else if (value == "regressor_only")
      rc.model.variant = PipelineVariant::regressor_only;
    else if (value == "decoder_only")
      rc.model.variant = PipelineVariant::decoder_only;
    else if (value == "neither")
      rc.model.variant = PipelineVariant::neither;
    else
      throw ConfigError("run.axes: bad regress_construct value '" + value + "'");
  } else if (axis == "topology")
    rc.topology = value;
  else
    throw ConfigError("run.axes: unknown axis '" + axis + "'");
}

template <class T>
int ablate_impl(const RunConfig& rc, const std::string& run_dir) {
  const auto axes = parse_axes(rc.axes);
  const Dataset train = load_split(rc, "train");
  const Dataset test = load_split(rc, "test");

  std::string header;
  for (const auto& a : axes) header += a.name + ",";
  CsvWriter csv(run_dir + "/ablation.csv", header + "FULL,LINEAR,MLP3");

  // Cells differing only in finetune-stage axes share one pretrained state.
  std::map<std::string, ModelState<T>> pretrained;

  std::vector<std::size_t> cursor(axes.size(), 0);
  std::map<std::pair<std::string, std::string>, double> linear_by_axis_value;
  bool done = false;
  while (!done) {
    RunConfig cell = rc;
    std::string label, row_prefix;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      apply_axis(cell, axes[a].name, axes[a].values[cursor[a]]);
      label += axes[a].name + "=" + axes[a].values[cursor[a]] + " ";
      row_prefix += axes[a].values[cursor[a]] + ",";
    }
    cell.validate("pretrain");

    std::string pretrain_key = cell.align_target + "|" + std::to_string(cell.model.reg_depth) + "|" +
                               std::to_string(cell.model.dec_depth) + "|" +
                               fmt(cell.model.mask_ratio) + "|" +
                               std::to_string(static_cast<int>(cell.model.variant));
    auto it = pretrained.find(pretrain_key);
    if (it == pretrained.end()) {
      ModelState<T> state;
      state.cfg = cell.model;
      state.init(cell.seed);
      AdamW<T> opt(0.9, 0.999, 1e-8, cell.weight_decay);
      pretrain_run(state, opt, train.clouds, cell);
      it = pretrained.emplace(pretrain_key, std::move(state)).first;
    }

    std::string row = row_prefix;
    for (const char* protocol : {"FULL", "LINEAR", "MLP3"}) {
      RunConfig ft = cell;
      ft.protocol = protocol;
      ModelState<T> state = it->second;
      state.cfg = cell.model;
      const auto history = finetune_run(state, train, test, ft, rc.finetune_epochs);
      const double acc = history.empty() ? 0.0 : history.back().test_acc;
      row += fmt(acc);
      if (std::string(protocol) != "MLP3") row += ",";
      if (std::string(protocol) == "LINEAR" && axes.size() == 1)
        linear_by_axis_value[{axes[0].name, axes[0].values[cursor[0]]}] = acc;
      std::printf("%s%s: %.4f\n", label.c_str(), protocol, acc);
    }
    csv.out << row << "\n";

    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++cursor[a] < axes[a].values.size()) break;
      cursor[a] = 0;
      if (a == 0) done = true;
    }
  }

  // Directional note for the mask-ratio grid; inversions are reported as-is.
  const auto lo = linear_by_axis_value.find({"mask_ratio", "0.2"});
  const auto hi = linear_by_axis_value.find({"mask_ratio", "0.8"});
  if (lo != linear_by_axis_value.end() && hi != linear_by_axis_value.end()) {
    std::printf("mask_ratio trend (LINEAR): 0.8 -> %.4f vs 0.2 -> %.4f (%s)\n", hi->second,
                lo->second,
                hi->second >= lo->second ? "high ratio at least as good" : "trend inverted");
  }
  std::printf("report: %s/ablation.csv\n", run_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / reconstruct / gen-data
// ---------------------------------------------------------------------------

int gradcheck_impl(const std::string& run_dir) {
  const auto rows = run_gradcheck_catalog(1e-4);
  CsvWriter csv(run_dir + "/gradcheck.csv", "check,rel_err,pass");
  bool all_pass = true;
  for (const auto& row : rows) {
    csv.row(row.name, fmt(row.rel_err), row.pass ? "pass" : "FAIL");
    std::printf("%-38s %.3e %s\n", row.name.c_str(), row.rel_err, row.pass ? "pass" : "FAIL");
    all_pass = all_pass && row.pass;
  }
  std::printf("gradcheck: %zu checks, %s\n", rows.size(), all_pass ? "all passed" : "FAILURES");
  return all_pass ? 0 : 1;
}

template <class T>
int reconstruct_impl(const RunConfig& rc_in, const std::string& run_dir) {
  auto ck = open_checkpoint<T>(rc_in);
  RunConfig rc = adopt_model(ck, rc_in);
  if (!fs::exists(rc.cloud)) throw ConfigError("run.cloud: no such file '" + rc.cloud + "'");
  PointCloud cloud = resample(load_cloud(rc.cloud), rc.data.points, rc.seed);

  ModelState<T> state = ck.state;
  state.cfg = rc.model;
  Tape<T> tape;
  Session<T> sess(tape, state.params, Session<T>::none());
  Session<T> teacher_sess(tape, state.teacher, Session<T>::none());
  const auto fwd =
      pretrain_forward_cloud(sess, teacher_sess, state.cfg, cloud, fold_seed(rc.seed, {0xF5u, 0u}),
                             fold_seed(rc.seed, {0x3Au, 0u, 0u}), rc.align_target_enum(),
                             rc.infonce_tau, rc.ntxent_tau);

  const std::size_t k = state.cfg.neighbors;
  PointCloud visible_cloud, reconstructed;
  for (std::size_t vi = 0; vi < fwd.plan.visible_idx.size(); ++vi) {
    const std::size_t p = fwd.plan.visible_idx[vi];
    for (std::size_t j = 0; j < k; ++j) {
      Vec3 pt;
      for (std::size_t d = 0; d < 3; ++d)
        pt[d] = fwd.patches.patches[(p * k + j) * 3 + d] + fwd.patches.centers[p * 3 + d];
      visible_cloud.points.push_back(pt);
      reconstructed.points.push_back(pt);
    }
  }
  if (state.cfg.recon_target != ReconTarget::coordinates)
    throw ConfigError("reconstruct: checkpoint was trained on feature targets, nothing to place");
  for (std::size_t mi = 0; mi < fwd.plan.masked_idx.size(); ++mi) {
    const std::size_t p = fwd.plan.masked_idx[mi];
    for (std::size_t j = 0; j < k; ++j) {
      Vec3 pt;
      for (std::size_t d = 0; d < 3; ++d)
        pt[d] = static_cast<double>(fwd.predictions[(mi * k + j) * 3 + d]) +
                fwd.patches.centers[p * 3 + d];
      reconstructed.points.push_back(pt);
    }
  }

  save_xyz(cloud, run_dir + "/input.xyz");
  save_xyz(visible_cloud, run_dir + "/visible.xyz");
  save_xyz(reconstructed, run_dir + "/reconstructed.xyz");
  const double d = chamfer_l2(cloud.points, reconstructed.points);
  std::printf("chamfer(input, reconstruction) = %.6g\n", d);
  std::printf("exports: %s/{input,visible,reconstructed}.xyz\n", run_dir.c_str());
  return 0;
}

int gendata_impl(const RunConfig& rc, const std::string& run_dir) {
  const std::string target = rc.data.dir.empty() ? run_dir + "/dataset" : rc.data.dir;
  fs::create_directories(target);
  const auto classes = parse_shape_classes(rc.data.classes);
  std::vector<ManifestEntry> entries;
  std::vector<std::string> names;
  for (ShapeClass c : classes) names.push_back(shape_class_name(c));
  for (const char* split : {"train", "test"}) {
    const Dataset ds = load_split(rc, split);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const std::string rel =
          std::string(split) + "-" + names[ds.clouds[i].label] + "-" + std::to_string(i) + ".xyz";
      save_xyz(ds.clouds[i], target + "/" + rel);
      entries.push_back({rel, ds.clouds[i].label, split});
    }
  }
  save_manifest(target, entries, names);
  std::printf("dataset: %s (%zu files)\n", target.c_str(), entries.size());
  return 0;
}

template <class Fn>
int guarded(const RunConfig& rc, const std::string& cmd, const Fn& fn) {
  try {
    rc.validate(cmd);
    const std::string run_dir = prepare_run_dir(rc, cmd);
    return fn(run_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

template <class Fn64, class Fn32>
int dispatch_precision(const RunConfig& rc, const Fn64& f64, const Fn32& f32) {
  return rc.precision == "f32" ? f32() : f64();
}

}  // namespace

std::string prepare_run_dir(const RunConfig& rc, const std::string& cmd) {
  fs::path dir = rc.run_name.empty() ? fs::path(rc.out_dir) / (cmd + "-" + timestamp())
                                     : fs::path(rc.out_dir) / rc.run_name;
  fs::create_directories(dir);
  std::ofstream cfg(dir / "config.ini");
  cfg << rc.to_ini();
  return dir.string();
}

int cmd_pretrain(RunConfig rc) {
  return guarded(rc, "pretrain", [&](const std::string& dir) {
    return dispatch_precision(
        rc, [&] { return pretrain_impl<double>(rc, dir); }, [&] { return pretrain_impl<float>(rc, dir); });
  });
}

int cmd_finetune(RunConfig rc) {
  return guarded(rc, "finetune", [&](const std::string& dir) {
    return dispatch_precision(
        rc, [&] { return finetune_impl<double>(rc, dir); }, [&] { return finetune_impl<float>(rc, dir); });
  });
}

int cmd_eval(RunConfig rc) {
  return guarded(rc, "eval", [&](const std::string& dir) {
    return dispatch_precision(
        rc, [&] { return eval_impl<double>(rc, dir); }, [&] { return eval_impl<float>(rc, dir); });
  });
}

int cmd_ablate(RunConfig rc) {
  return guarded(rc, "ablate", [&](const std::string& dir) {
    return dispatch_precision(
        rc, [&] { return ablate_impl<double>(rc, dir); }, [&] { return ablate_impl<float>(rc, dir); });
  });
}

int cmd_gradcheck(RunConfig rc) {
  return guarded(rc, "gradcheck", [&](const std::string& dir) { return gradcheck_impl(dir); });
}

int cmd_reconstruct(RunConfig rc) {
  return guarded(rc, "reconstruct", [&](const std::string& dir) {
    return dispatch_precision(
        rc, [&] { return reconstruct_impl<double>(rc, dir); },
        [&] { return reconstruct_impl<float>(rc, dir); });
  });
}

int cmd_gendata(RunConfig rc) {
  return guarded(rc, "gen-data", [&](const std::string& dir) { return gendata_impl(rc, dir); });
}

// ---------------------------------------------------------------------------
// argv front end
// ---------------------------------------------------------------------------

namespace {

void add_common_options(CLI::App* app, RunConfig& rc) {
  app->add_option("--dim", rc.model.dim, "token width");
  app->add_option("--heads", rc.model.heads, "attention heads");
  app->add_option("--enc-depth", rc.model.enc_depth, "encoder blocks");
  app->add_option("--reg-depth", rc.model.reg_depth, "mask regressor blocks");
  app->add_option("--dec-depth", rc.model.dec_depth, "decoder blocks");
  app->add_option("--patches", rc.model.patch_count, "patches per cloud (S)");
  app->add_option("--neighbors", rc.model.neighbors, "points per patch (k)");
  app->add_option("--mask-ratio", rc.model.mask_ratio, "masked fraction");
  app->add_option_function<std::string>(
      "--kv-mode",
      [&rc](const std::string& s) {
        if (s == "previous_layer")
          rc.model.kv_mode = KvMode::previous_layer;
        else if (s == "visible_always")
          rc.model.kv_mode = KvMode::visible_always;
        else
          throw CLI::ValidationError("--kv-mode", "expected previous_layer or visible_always");
      },
      "regressor key/value source after block 1");
  app->add_option("--precision", rc.precision, "f64 or f32");
  app->add_option("--lr", rc.lr, "base learning rate");
  app->add_option("--head-lr", rc.head_lr, "head learning rate (frozen protocols)");
  app->add_option("--weight-decay", rc.weight_decay, "AdamW weight decay");
  app->add_option("--epochs", rc.epochs, "training epochs");
  app->add_option("--warmup-epochs", rc.warmup_epochs, "linear warmup epochs");
  app->add_option("--finetune-epochs", rc.finetune_epochs, "finetune epochs inside ablate/few-shot");
  app->add_option("--batch-size", rc.batch_size, "clouds per step");
  app->add_option("--ema-momentum", rc.ema_momentum, "teacher EMA momentum");
  app->add_option("--align-weight", rc.align_weight, "alignment loss weight");
  app->add_option("--align-target", rc.align_target, "cosine|mse|infonce|ntxent");
  app->add_option("--ckpt-every", rc.ckpt_every, "checkpoint every N epochs");
  app->add_option("--data-source", rc.data.source, "synthetic|dir");
  app->add_option("--data-dir", rc.data.dir, "dataset directory (manifest.csv)");
  app->add_option("--classes", rc.data.classes, "synthetic class list");
  app->add_option("--train-per-class", rc.data.train_per_class, "train clouds per class");
  app->add_option("--test-per-class", rc.data.test_per_class, "test clouds per class");
  app->add_option("--points", rc.data.points, "points per cloud (N)");
  app->add_option("--noise", rc.data.noise, "generator noise sigma");
  app->add_option("--seed", rc.seed, "global RNG seed");
  app->add_option("--out-dir", rc.out_dir, "output root");
  app->add_option("--run-name", rc.run_name, "fixed run directory name");
  app->add_option("--augment", rc.augment, "none|scale_translate|rotate");
  app->add_option("--protocol", rc.protocol, "FULL|LINEAR|MLP3");
  app->add_option("--topology", rc.topology, "a|b|c|d (comma list allowed)");
  app->add_option("--combine", rc.combine, "concat|add for topology d");
  app->add_option("--virtual-queries", rc.virtual_queries, "regressor queries at finetune (0 = S/2)");
  app->add_option("--head-hidden", rc.head_hidden, "MLP head hidden width");
  app->add_option("--ckpt", rc.checkpoint, "input checkpoint path");
  app->add_flag("--no-regressor", rc.no_regressor, "masked-autoencoder baseline (no regressor)");
  app->add_option("--compare-log", rc.compare_log, "baseline step CSV to overlay in loss.svg");
  app->add_option("--cloud", rc.cloud, "input cloud for reconstruct");
  app->add_option("--axes", rc.axes, "ablation axes, e.g. mask_ratio or reg_depth=2|4");
  app->add_option("--recon-features", rc.recon_features, "external feature target file");
  app->add_flag("--few-shot", rc.few_shot, "run few-shot evaluation");
  app->add_option("--n-way", rc.n_way, "few-shot ways");
  app->add_option("--k-shot", rc.k_shot, "few-shot support size per class");
  app->add_option("--n-query", rc.n_query, "few-shot query size per class");
  app->add_option("--episodes", rc.episodes, "few-shot episodes");
}

}  // namespace

int run(int argc, const char* const* argv) {
  // Profile and config file are applied before flag parsing so explicit
  // flags win: defaults < profile < config file < flags.
  RunConfig rc;
  try {
    for (int i = 1; i + 1 < argc; ++i)
      if (std::string(argv[i]) == "--profile") rc = RunConfig::profile(argv[i + 1]);
    for (int i = 1; i + 1 < argc; ++i)
      if (std::string(argv[i]) == "--config") rc = RunConfig::from_ini_file(argv[i + 1]);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  CLI::App app{"masked point-cloud pretraining with a latent mask regressor"};
  app.require_subcommand(1);
  std::string profile_name, config_path;
  int result = 0;

  struct Verb {
    const char* name;
    const char* help;
    int (*fn)(RunConfig);
  };
  const Verb verbs[] = {
      {"pretrain", "self-supervised pretraining", cmd_pretrain},
      {"finetune", "classification fine-tuning from a checkpoint", cmd_finetune},
      {"eval", "evaluate a finetuned checkpoint (or few-shot protocol)", cmd_eval},
      {"ablate", "grid runs over pretraining/finetuning axes", cmd_ablate},
      {"gradcheck", "finite-difference verification of every block", cmd_gradcheck},
      {"reconstruct", "export input/visible/reconstructed clouds", cmd_reconstruct},
      {"gen-data", "write a synthetic dataset with a manifest", cmd_gendata},
  };
  for (const Verb& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--profile", profile_name, "configuration preset (desk|paper)");
    sub->add_option("--config", config_path, "configuration file to load");
    add_common_options(sub, rc);
    sub->callback([&rc, &result, fn = v.fn]() { result = fn(rc); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  return result;
}

}  // namespace rae::cli
