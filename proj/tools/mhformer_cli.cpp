// mhformer: synthesize data, train, evaluate, infer, and inspect models.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mhformer/checkpoint.hpp"
#include "mhformer/gradcheck_suite.hpp"
#include "mhformer/metrics.hpp"
#include "mhformer/run_config.hpp"
#include "mhformer/stats.hpp"
#include "mhformer/synth.hpp"
#include "mhformer/training.hpp"
#include "mhformer/windows.hpp"

namespace {

using namespace mhf;

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

template <typename F>
decltype(auto) with_dtype(DType d, F&& f) {
  if (d == DType::float64) return f(double{});
  return f(float{});
}

// Flags that override fields of a loaded configuration.
struct ModelOverrides {
  std::optional<std::size_t> M, N, J, C, L1, L2, L3, h_s, h_t;
  std::optional<double> mlp_ratio, dropout;
  std::optional<std::string> dtype;
  bool hypothesis_heads = false, parallel_mhg = false, any_m = false;

  void add(CLI::App* app) {
    app->add_option("--M", M, "hypotheses");
    app->add_option("--N", N, "frames per window (odd)");
    app->add_option("--J", J, "joints");
    app->add_option("--C", C, "temporal embedding dim");
    app->add_option("--L1", L1, "encoder layers per generation stack");
    app->add_option("--L2", L2, "self-refinement layers");
    app->add_option("--L3", L3, "cross-interaction layers");
    app->add_option("--h-s", h_s, "spatial heads");
    app->add_option("--h-t", h_t, "temporal heads");
    app->add_option("--mlp-ratio", mlp_ratio);
    app->add_option("--dropout", dropout);
    app->add_option("--dtype", dtype, "float32 or float64");
    app->add_flag("--hypothesis-heads", hypothesis_heads, "add per-hypothesis decoding heads");
    app->add_flag("--parallel-mhg", parallel_mhg, "feed every generation stack the raw input");
    app->add_flag("--any-m", any_m, "allow cross-interaction with M != 3");
  }

  void apply(ModelConfig& c) const {
    if (M) c.M = *M;
    if (N) c.N = *N;
    if (J) c.J = *J;
    if (C) c.C = *C;
    if (L1) c.L1 = *L1;
    if (L2) c.L2 = *L2;
    if (L3) c.L3 = *L3;
    if (h_s) c.h_s = *h_s;
    if (h_t) c.h_t = *h_t;
    if (mlp_ratio) c.mlp_ratio = *mlp_ratio;
    if (dropout) c.dropout = *dropout;
    if (dtype) c.dtype = parse_dtype(*dtype);
    if (hypothesis_heads) c.hypothesis_heads = true;
    if (parallel_mhg) c.parallel_mhg = true;
    if (any_m) c.any_m = true;
  }
};

struct TrainOverrides {
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr, flip_prob, aux_weight;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "total epochs");
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr, "base learning rate");
    app->add_option("--seed", seed);
    app->add_option("--flip-prob", flip_prob);
    app->add_option("--aux-weight", aux_weight, "loss weight of the per-hypothesis heads");
  }

  void apply(TrainConfig& t) const {
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lr) t.base_lr = *lr;
    if (seed) t.seed = *seed;
    if (flip_prob) t.flip_prob = *flip_prob;
    if (aux_weight) t.hypothesis_aux_weight = *aux_weight;
  }
};

std::vector<Pose3> centers_mm(const std::vector<double>& flat_m, std::size_t J) {
  std::vector<Pose3> out;
  for (std::size_t i = 0; i * J * 3 < flat_m.size(); ++i)
    out.push_back(pose_from(flat_m.data() + i * J * 3, J) * 1000.0);
  return out;
}

std::vector<Pose3> root_relative_mm(const PoseSequence& seq3d) {
  const PoseSequence r = root_relative_m(seq3d);
  return centers_mm(r.coords, r.joints);
}

PoseSequence centers_to_sequence(const std::vector<double>& flat_m, const PoseSequence& like,
                                 const std::string& provenance) {
  PoseSequence out(3, like.frames, like.skeleton);
  out.fps = like.fps;
  out.provenance = provenance;
  for (std::size_t i = 0; i < out.coords.size(); ++i) out.coords[i] = flat_m[i] * 1000.0;
  return out;
}

void check_skeleton(const PoseSequence& seq, const ModelConfig& cfg, const char* what) {
  if (seq.joints != cfg.J)
    throw ValidationError(std::string(what) + " has " + std::to_string(seq.joints) +
                          " joints but the model expects J=" + std::to_string(cfg.J));
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string skeleton = "h36m", camera, out;
  std::size_t frames = 100;
  std::uint64_t seed = 0;
  double sigma = 0, amplitude = 1.0, fps = 50.0;
};

int cmd_synth(const SynthArgs& a) {
  const Skeleton sk = skeleton_by_name(a.skeleton);
  const CameraModel cam = a.camera.empty()
                              ? default_camera()
                              : camera_from_json(parse_json_text(read_text_file(a.camera), a.camera));
  MotionParams mp;
  mp.amplitude = a.amplitude;
  mp.fps = a.fps;
  const PoseSequence world = synth_generate(sk, a.frames, a.seed, mp);
  const PoseSequence gt = to_camera_frame(world, cam);
  PoseSequence p2 = add_noise(project(world, cam), a.sigma, a.seed ^ 0x9e3779b97f4a7c15ULL);
  if (a.sigma > 0) p2.provenance = "synthetic+noise";
  save_pose_json(gt, a.out + ".3d.json");
  save_pose_json(p2, a.out + ".2d.json");
  std::cout << "wrote " << a.out << ".3d.json and " << a.out << ".2d.json (" << a.frames
            << " frames, " << sk.joints() << " joints)\n";
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, data2d, data3d, out_ckpt, resume, loss_csv;
  std::size_t stride = 1;
  bool keep_epochs = false, quiet = false;
  ModelOverrides model;
  TrainOverrides train;
};

template <typename T>
int run_train(const TrainArgs& a, ModelConfig cfg, TrainConfig tc) {
  TrainState<T> st;
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    st = restore_state<T>(ck);
  } else {
    st.params = init_params<T>(cfg, tc.seed);
  }
  const PoseSequence in2d = normalize_screen(load_pose_json(a.data2d));
  const PoseSequence in3d = root_relative_m(load_pose_json(a.data3d));
  check_skeleton(in2d, cfg, "2D data");
  check_skeleton(in3d, cfg, "3D data");
  if (!in2d.skeleton.same_structure(in3d.skeleton))
    throw ValidationError("2D and 3D data use different skeletons");
  const WindowSet windows = make_windows(in2d, &in3d, cfg.N, a.stride);

  auto save = [&](const TrainState<T>& s, const std::string& path) {
    save_checkpoint(make_checkpoint(s, cfg, tc), path);
  };
  TrainHistory hist = train<T>(st, cfg, tc, windows, in2d.skeleton,
                               [&](const TrainState<T>& s, const TrainHistory&, double mean) {
                                 if (!a.quiet)
                                   std::printf("epoch %zu  lr %.6g  loss %.6f\n", s.epoch - 1,
                                               lr_at(s.epoch - 1, tc), mean);
                                 save(s, a.out_ckpt);
                                 if (a.keep_epochs)
                                   save(s, a.out_ckpt + ".epoch" + std::to_string(s.epoch - 1));
                               });
  save(st, a.out_ckpt);
  if (!a.loss_csv.empty()) write_text_file(a.loss_csv, hist.csv());
  if (!a.quiet)
    std::printf("saved %s (%zu epochs, %llu steps)\n", a.out_ckpt.c_str(), st.epoch,
                static_cast<unsigned long long>(st.optim.steps()));
  return 0;
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc;
  if (!a.resume.empty()) {
    const Checkpoint ck = load_checkpoint(a.resume);
    rc.model = ck.model;
    rc.train = ck.train;
  } else if (!a.config.empty()) {
    rc = load_run_config(a.config);
  }
  if (a.resume.empty()) a.model.apply(rc.model);
  a.train.apply(rc.train);
  rc.model.validate();
  rc.train.validate();
  return with_dtype(rc.model.dtype, [&](auto tag) {
    return run_train<decltype(tag)>(a, rc.model, rc.train);
  });
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt, pred3d, data2d, data3d, out;
  bool flip = false;
  double noise_sigma = 0;
  std::uint64_t noise_seed = 0;
  std::optional<std::size_t> N;
};

template <typename T>
std::vector<double> checkpoint_predictions(const Checkpoint& ck, const PoseSequence& raw2d,
                                           bool flip) {
  const ModelConfig& cfg = ck.model;
  const TrainState<T> st = restore_state<T>(ck);
  const PoseSequence in2d = normalize_screen(raw2d);
  check_skeleton(in2d, cfg, "2D data");
  return predict_windows(st.params, cfg, make_windows(in2d, nullptr, cfg.N), in2d.skeleton, flip);
}

int cmd_eval(const EvalArgs& a) {
  const PoseSequence gt3d = load_pose_json(a.data3d);
  std::vector<Pose3> preds;
  json info = {{"flip", a.flip}, {"noise_sigma_px", a.noise_sigma}};
  if (!a.pred3d.empty()) {
    const PoseSequence p = load_pose_json(a.pred3d);
    if (p.frames != gt3d.frames || p.joints != gt3d.joints)
      throw ValidationError("predictions and ground truth differ in frames or joints");
    preds = root_relative_mm(p);
    info["source"] = a.pred3d;
  } else {
    if (a.data2d.empty()) throw ValidationError("eval needs --data2d with --ckpt");
    const Checkpoint ck = load_checkpoint(a.ckpt);
    if (a.N && *a.N != ck.model.N)
      throw ValidationError("--N " + std::to_string(*a.N) + " does not match the checkpoint's N=" +
                            std::to_string(ck.model.N));
    PoseSequence raw2d = load_pose_json(a.data2d);
    if (raw2d.frames != gt3d.frames)
      throw ValidationError("2D and 3D data differ in frame count");
    raw2d = add_noise(raw2d, a.noise_sigma, a.noise_seed);
    const auto flat = with_dtype(ck.model.dtype, [&](auto tag) {
      return checkpoint_predictions<decltype(tag)>(ck, raw2d, a.flip);
    });
    preds = centers_mm(flat, ck.model.J);
    for (Pose3& q : preds) {
      const Eigen::RowVector3d root = q.row(0);
      q.rowwise() -= root;
    }
    info["source"] = a.ckpt;
    info["N"] = ck.model.N;
  }
  EvalReport r = evaluate_poses(preds, root_relative_mm(gt3d));
  r.config.update(info);
  const std::string text = r.to_json().dump(2) + "\n";
  if (a.out.empty()) std::cout << text;
  else write_text_file(a.out, text);
  return 0;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  std::string ckpt, data2d, out, dump_attention, dump_hypotheses;
  bool flip = false, all_layers = false;
};

template <typename T>
int run_infer(const InferArgs& a, const Checkpoint& ck) {
  const ModelConfig& cfg = ck.model;
  const TrainState<T> st = restore_state<T>(ck);
  const PoseSequence raw2d = load_pose_json(a.data2d);
  const PoseSequence in2d = normalize_screen(raw2d);
  check_skeleton(in2d, cfg, "2D data");
  const WindowSet w = make_windows(in2d, nullptr, cfg.N);
  save_pose_json(centers_to_sequence(predict_windows(st.params, cfg, w, in2d.skeleton, a.flip),
                                     raw2d, "mhformer"),
                 a.out);
  std::cout << "wrote " << a.out << " (" << raw2d.frames << " frames)\n";
  if (!a.dump_hypotheses.empty()) {
    const auto hyps = predict_hypotheses(st.params, cfg, w);
    for (std::size_t m = 0; m < hyps.size(); ++m) {
      const std::string path = a.dump_hypotheses + ".h" + std::to_string(m + 1) + ".json";
      save_pose_json(centers_to_sequence(hyps[m], raw2d, "mhformer-hypothesis-" +
                                                             std::to_string(m + 1)),
                     path);
      std::cout << "wrote " << path << "\n";
    }
  }
  if (!a.dump_attention.empty()) {
    const std::size_t mid = w.size() / 2;
    const Tensor<T> x = batch_tensor<T>(w, {mid}, false);
    json doc = {{"window_center_frame", w.centers[mid]},
                {"maps", attention_maps_json(export_attention(x, st.params, cfg, a.all_layers))}};
    write_text_file(a.dump_attention, doc.dump() + "\n");
    std::cout << "wrote " << a.dump_attention << "\n";
  }
  return 0;
}

int cmd_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (!a.dump_hypotheses.empty() && !ck.model.hypothesis_heads)
    throw ValidationError("--dump-hypotheses needs a model trained with per-hypothesis heads");
  return with_dtype(ck.model.dtype, [&](auto tag) { return run_infer<decltype(tag)>(a, ck); });
}

// ---------------------------------------------------------------- stats

int cmd_stats(const std::string& config, const ModelOverrides& o, bool as_json) {
  ModelConfig cfg = config.empty() ? ModelConfig{} : load_run_config(config).model;
  o.apply(cfg);
  cfg.validate();
  const auto params = count_params(cfg);
  const auto flops = estimate_flops(cfg);
  if (as_json) {
    std::cout << json{{"params", params}, {"flops", flops}, {"model", cfg}}.dump(2) << "\n";
  } else {
    std::printf("params  %llu (%.2fM)\n", static_cast<unsigned long long>(params), params / 1e6);
    std::printf("flops   %llu (%.3fG)\n", static_cast<unsigned long long>(flops), flops / 1e9);
  }
  return 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& config, std::uint64_t seed, const std::string& corrupt) {
  ModelConfig cfg = config.empty() ? tiny_config() : load_run_config(config).model;
  if (!corrupt.empty()) {
    if (corrupt != "gelu") throw ValidationError("--corrupt-adjoint supports only 'gelu'");
    detail::gelu_adjoint_corruption() = 1.5;
  }
  bool ok = true;
  std::printf("%-16s %14s %10s %8s\n", "block", "max_rel_error", "tolerance", "result");
  for (const auto& b : run_gradcheck_suite(cfg, seed)) {
    std::printf("%-16s %14.3e %10.0e %8s\n", b.name.c_str(), b.max_rel_error, b.tolerance,
                b.pass() ? "PASS" : "FAIL");
    ok = ok && b.pass();
  }
  if (!ok) {
    std::printf("gradient check FAILED\n");
    return kExitNumerical;
  }
  std::printf("gradient check passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-hypothesis transformer for 2D-to-3D pose lifting"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate paired synthetic 3D/2D pose sequences");
  synth->add_option("--skeleton", sa.skeleton, "h36m or toy")->capture_default_str();
  synth->add_option("--frames", sa.frames)->capture_default_str();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--sigma", sa.sigma, "2D noise std (px)")->capture_default_str();
  synth->add_option("--camera", sa.camera, "camera JSON (default camera if omitted)");
  synth->add_option("--amplitude", sa.amplitude, "motion amplitude")->capture_default_str();
  synth->add_option("--fps", sa.fps)->capture_default_str();
  synth->add_option("--out", sa.out, "output prefix; writes <out>.3d.json and <out>.2d.json")
      ->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train a model");
  trn->add_option("--config", ta.config, "run config JSON {model, train}");
  trn->add_option("--data2d", ta.data2d)->required();
  trn->add_option("--data3d", ta.data3d)->required();
  trn->add_option("--out-ckpt", ta.out_ckpt)->required();
  trn->add_option("--resume", ta.resume, "continue from this checkpoint");
  trn->add_option("--loss-csv", ta.loss_csv, "write epoch,step,lr,loss rows");
  trn->add_option("--stride", ta.stride, "window stride")->capture_default_str();
  trn->add_flag("--keep-epochs", ta.keep_epochs, "also write <out-ckpt>.epoch<k> per epoch");
  trn->add_flag("--quiet", ta.quiet);
  ta.model.add(trn);
  ta.train.add(trn);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate centre-frame predictions");
  auto* ck_opt = ev->add_option("--ckpt", ea.ckpt);
  auto* pred_opt = ev->add_option("--pred3d", ea.pred3d, "evaluate a prediction file instead");
  ck_opt->excludes(pred_opt);
  ev->add_option("--data2d", ea.data2d);
  ev->add_option("--data3d", ea.data3d)->required();
  ev->add_flag("--flip", ea.flip, "test-time flip averaging");
  ev->add_option("--noise-sigma", ea.noise_sigma, "extra 2D noise (px)");
  ev->add_option("--noise-seed", ea.noise_seed);
  ev->add_option("--N", ea.N, "expected window length (must match the checkpoint)");
  ev->add_option("--out", ea.out, "metrics JSON path (stdout if omitted)");

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "predict one 3D pose per input frame");
  inf->add_option("--ckpt", ia.ckpt)->required();
  inf->add_option("--data2d", ia.data2d)->required();
  inf->add_option("--out", ia.out)->required();
  inf->add_flag("--flip", ia.flip);
  inf->add_option("--dump-attention", ia.dump_attention, "attention-map JSON path");
  inf->add_flag("--all-layers", ia.all_layers, "dump every layer, not just the first");
  inf->add_option("--dump-hypotheses", ia.dump_hypotheses,
                  "prefix; writes <prefix>.h<m>.json per hypothesis");

  std::string stats_config;
  bool stats_json = false;
  ModelOverrides stats_over;
  auto* st = app.add_subcommand("stats", "parameter count and FLOPs of a configuration");
  st->add_option("--config", stats_config);
  st->add_flag("--json", stats_json);
  stats_over.add(st);

  std::string gc_config, gc_corrupt;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--config", gc_config, "run config JSON (tiny model if omitted)");
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--corrupt-adjoint", gc_corrupt, "test hook: corrupt an adjoint (gelu)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*trn) return cmd_train(ta);
    if (*ev) {
      if (ea.ckpt.empty() && ea.pred3d.empty())
        throw ValidationError("eval needs --ckpt or --pred3d");
      return cmd_eval(ea);
    }
    if (*inf) return cmd_infer(ia);
    if (*st) return cmd_stats(stats_config, stats_over, stats_json);
    if (*gc) return cmd_gradcheck(gc_config, gc_seed, gc_corrupt);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
