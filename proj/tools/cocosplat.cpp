// cocosplat: gen | train | render | eval | serve
//
// exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure

#include "cocosplat/coc.hpp"
#include "cocosplat/oracle.hpp"
#include "cocosplat/parallel.hpp"
#include "cocosplat/service.hpp"
#include "cocosplat/storage.hpp"
#include "cocosplat/trainer.hpp"

#include "CLI11.hpp"

#include <csignal>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

using namespace cocosplat;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RefocusService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

struct GenArgs {
  SceneSpec spec;
  int samples = 256;
  std::string out;
};

struct TrainArgs {
  std::string data, out, resume;
  TrainConfig cfg;
  bool no_coc = false, no_direction = false, no_beta = false, no_aperture = false;
};

struct RenderArgs {
  std::string ckpt, pose, out, dump_points, mode = "sharp";
  std::optional<int> view_index;
  double kscale = 1.0;
  std::optional<double> dfocus;
  std::optional<int> width;
};

struct EvalArgs {
  std::string ckpt, scene, data, out;
};

struct ServeArgs {
  std::string ckpt, host = "127.0.0.1";
  int port = 7860;
};

int cmd_gen(const GenArgs& a) {
  const ToyScene scene = gen_scene(a.spec);
  emit_dataset(a.out, scene, a.samples);
  std::cout << "wrote " << a.out << " (" << scene.gaussians.size() << " Gaussians, " << scene.train.size()
            << " train / " << scene.eval.size() << " eval views)\n";
  return kOk;
}

int cmd_train(TrainArgs a) {
  const Dataset data = load_dataset(a.data);
  TrainConfig cfg = a.cfg;
  cfg.use_coc = !a.no_coc;
  cfg.learn_direction = !a.no_direction;
  cfg.use_beta = !a.no_beta;
  cfg.use_aperture = !a.no_aperture;
  cfg.checkpoint_path = a.out;

  TrainState state;
  if (!a.resume.empty()) {
    state = from_checkpoint(load_checkpoint(a.resume));
    state.cfg.checkpoint_path = a.out;
    if (cfg.total_iters != state.cfg.total_iters) {
      throw UsageError("--iters must match the resumed run (" + std::to_string(state.cfg.total_iters) + ")");
    }
  } else {
    state = init_state(data, cfg);
  }
  TrainHooks hooks;
  const int every = std::max(1, state.cfg.total_iters / 20);
  hooks.on_step = [&](const MetricsRow& r) {
    if (r.iter % static_cast<std::uint64_t>(every) == 0 || r.psnr) {
      std::cerr << "iter " << r.iter << " loss " << r.loss;
      if (r.psnr) std::cerr << " psnr " << *r.psnr << " ssim " << *r.ssim;
      std::cerr << '\n';
    }
  };
  const std::vector<MetricsRow> history = train_continue(state, data, hooks);
  // a run that never stepped still leaves a checkpoint behind
  if (history.empty()) save_checkpoint(a.out, to_checkpoint(state));

  fs::path csv = a.out;
  csv.replace_extension(".metrics.csv");
  write_file_atomic(csv, metrics_csv(history));
  if (!history.empty() && !std::isfinite(history.back().loss)) throw NumericError("final loss is not finite");
  if (!state.gaussians().all_finite()) throw NumericError("trained parameters are not finite");
  if (state.incidents > 0) std::cerr << state.incidents << " steps rejected\n";
  std::cout << "wrote " << a.out << " and " << csv.string() << '\n';
  return kOk;
}

CameraView pick_view(const TrainState& s, const RenderArgs& a, std::optional<double>& focus) {
  if (!a.pose.empty()) {
    const CameraView v = view_from_json(read_json(a.pose), a.pose);
    v.validate();
    if (!focus && v.focus_plane > 0) focus = v.focus_plane;
    if (!focus) {
      double acc = 0;
      for (std::size_t i = 0; i < s.views.size(); ++i) acc += s.focus(i);
      focus = acc / static_cast<double>(s.views.size());
    }
    return v;
  }
  const int idx = a.view_index.value_or(0);
  if (idx < 0 || idx >= static_cast<int>(s.views.size())) {
    throw UsageError("--view-index " + std::to_string(idx) + " out of range [0, " + std::to_string(s.views.size()) +
                     ")");
  }
  if (!focus) focus = s.focus(static_cast<std::size_t>(idx));
  return s.views[static_cast<std::size_t>(idx)];
}

int cmd_render(const RenderArgs& a) {
  const TrainState s = from_checkpoint(load_checkpoint(a.ckpt));
  std::optional<double> focus = a.dfocus;
  CameraView view = pick_view(s, a, focus);
  if (a.width) view = view.resized(*a.width);
  const bool defocus = a.mode == "defocus";
  const ModelRender out = render_model(s, view, defocus, a.kscale, focus);
  if (!out.image.rgb.allFinite()) throw NumericError("rendered image is not finite");
  write_image(a.out, out.image);
  if (!a.dump_points.empty()) {
    CocConfig cfg = s.coc;
    cfg.k_multiplier = a.kscale;
    const GaussianSet base = s.gaussians();
    const auto sets = generate_coc_sets(base, view, *focus, s.mlp, s.store, s.frame, cfg);
    std::ostringstream os;
    os.precision(17);
    os << "set,x,y,z\n";
    for (Eigen::Index i = 0; i < base.size(); ++i) {
      os << "base," << base.mean(i, 0) << ',' << base.mean(i, 1) << ',' << base.mean(i, 2) << '\n';
    }
    for (std::size_t m = 0; m < sets.size(); ++m) {
      for (Eigen::Index i = 0; i < base.size(); ++i) {
        os << m << ',' << sets[m].mean(i, 0) << ',' << sets[m].mean(i, 1) << ',' << sets[m].mean(i, 2) << '\n';
      }
    }
    write_file_atomic(a.dump_points, os.str());
  }
  if (defocus) std::cout << "mean CoC " << out.mean_coc << '\n';
  std::cout << "wrote " << a.out << '\n';
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  const Dataset data = load_dataset(a.data);
  if (data.eval.empty()) throw StorageError(a.data + ": dataset has no held-out views");
  std::vector<EvalRow> rows;
  if (!a.scene.empty()) {
    rows = evaluate(read_scene(a.scene).gaussians, data.eval, data.eval_images, true);
  } else {
    rows = evaluate(from_checkpoint(load_checkpoint(a.ckpt)), data.eval, data.eval_images, true);
  }
  std::ostringstream os;
  os.precision(17);
  os << "view,psnr,ssim\n";
  double p = 0, q = 0;
  for (const auto& r : rows) {
    os << r.view << ',' << r.psnr << ',' << r.ssim << '\n';
    p += r.psnr;
    q += r.ssim;
  }
  const double n = static_cast<double>(rows.size());
  os << "mean," << p / n << ',' << q / n << '\n';
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    write_file_atomic(a.out, os.str());
    std::cout << "mean psnr " << p / n << " ssim " << q / n << '\n';
  }
  if (!std::isfinite(p) || !std::isfinite(q)) return kNumeric;
  return kOk;
}

int cmd_serve(const ServeArgs& a) {
  std::shared_ptr<const TrainState> state;
  if (!a.ckpt.empty()) state = std::make_shared<const TrainState>(from_checkpoint(load_checkpoint(a.ckpt)));
  RefocusService svc(state);
  const int port = svc.bind(a.host, a.port);
  std::cout << "listening on http://" << a.host << ':' << port << std::endl;
  g_service = &svc;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  svc.run();
  g_service = nullptr;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Defocus-aware Gaussian splatting with a learned circle of confusion"};
  app.require_subcommand(1);
  app.fallthrough();
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "single worker, fixed reduction order");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic defocus dataset");
  g->add_option("--preset", gen.spec.preset, "planes3 | sphere-cluster | reflectance-stress")
      ->check(CLI::IsMember({"planes3", "sphere-cluster", "reflectance-stress"}));
  g->add_option("--n", gen.spec.n, "Gaussian count")->check(CLI::Range(3, 1000000));
  g->add_option("--views", gen.spec.train_views, "training views")->check(CLI::Range(2, 10000));
  g->add_option("--eval-views", gen.spec.eval_views, "held-out views")->check(CLI::Range(0, 10000));
  g->add_option("--width", gen.spec.width, "image width")->check(CLI::Range(8, 4096));
  g->add_option("--f", gen.spec.lens.focal_length, "focal length")->check(CLI::PositiveNumber);
  g->add_option("--aperture", gen.spec.lens.aperture, "aperture diameter")->check(CLI::NonNegativeNumber);
  g->add_option("--dfocus", gen.spec.focus, "nominal focus distance")->check(CLI::PositiveNumber);
  g->add_option("--samples", gen.samples, "aperture samples per image")->check(CLI::Range(1, 1 << 20));
  g->add_option("--seed", gen.spec.seed, "random seed");
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "optimize a model on a dataset");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--iters", tr.cfg.total_iters, "total iterations")->check(CLI::NonNegativeNumber);
  t->add_option("--m", tr.cfg.sets, "CoC sets")->check(CLI::Range(1, 64));
  t->add_option("--seed", tr.cfg.seed, "random seed");
  t->add_option("--eval-every", tr.cfg.eval_every, "held-out evaluation interval")->check(CLI::NonNegativeNumber);
  t->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "checkpoint interval")->check(CLI::NonNegativeNumber);
  t->add_option("--resume", tr.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_flag("--no-coc", tr.no_coc, "fixed offset radius instead of the CoC");
  t->add_flag("--no-direction", tr.no_direction, "fixed circular offset directions");
  t->add_flag("--no-beta", tr.no_beta, "beta fixed to 1");
  t->add_flag("--no-aperture", tr.no_aperture, "aperture parameter not learned");
  t->add_flag("--baseline", tr.cfg.baseline, "plain splatting, base set only");

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "render a trained model");
  r->add_option("--ckpt", rd.ckpt, "checkpoint")->required();
  auto* vi = r->add_option("--view-index", rd.view_index, "training view index");
  r->add_option("--pose", rd.pose, "camera JSON file")->excludes(vi)->check(CLI::ExistingFile);
  r->add_option("--mode", rd.mode, "sharp | defocus")->check(CLI::IsMember({"sharp", "defocus"}));
  r->add_option("--kscale", rd.kscale, "aperture multiplier")->check(CLI::NonNegativeNumber);
  r->add_option("--dfocus", rd.dfocus, "focus distance")->check(CLI::PositiveNumber);
  r->add_option("--width", rd.width, "output width")->check(CLI::Range(8, 4096));
  r->add_option("--out", rd.out, "output image (.png or .ppm)")->required();
  r->add_option("--dump-points", rd.dump_points, "CSV of base and CoC Gaussian centres");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score sharp renders against held-out views");
  e->add_option("--data", ev.data, "dataset directory")->required();
  auto* ck = e->add_option("--ckpt", ev.ckpt, "checkpoint");
  auto* sc = e->add_option("--scene", ev.scene, "scene JSON with Gaussians");
  ck->excludes(sc);
  e->add_option("--out", ev.out, "CSV path (stdout when omitted)");

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "HTTP refocus service");
  s->add_option("--ckpt", sv.ckpt, "checkpoint")->check(CLI::ExistingFile);
  s->add_option("--port", sv.port, "port")->check(CLI::Range(0, 65535));
  s->add_option("--host", sv.host, "bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& ok) {
    return app.exit(ok);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }
  if (deterministic) {
    set_worker_count(1);
    tr.cfg.deterministic = true;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*r) return cmd_render(rd);
    if (*e) {
      if (ev.ckpt.empty() == ev.scene.empty()) throw UsageError("eval needs exactly one of --ckpt or --scene");
      return cmd_eval(ev);
    }
    if (*s) return cmd_serve(sv);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n' << app.help();
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}
