// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when all pass.
#include "test_util.hpp"
#include "toy_data.hpp"

#include "cocosplat/compositor.hpp"
#include "cocosplat/oracle.hpp"
#include "cocosplat/parallel.hpp"
#include "cocosplat/storage.hpp"
#include "cocosplat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

using namespace cocosplat;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------------------
// AC-1

// Replays the phase-C forward pass and hashes every discrete decision in it: splat ordering and
// cutoffs of each render, ReLU signs of both networks.
std::uint64_t branch_signature(const TrainState& s, std::size_t v) {
  CameraView view = s.views[v];
  view.focus_plane = s.focus(v);
  const GaussianSet base = s.gaussians();
  CocTape tape;
  const auto sets = generate_coc_sets(base, view, view.focus_plane, s.mlp, s.store, s.frame, s.coc, &tape);
  std::uint64_t h = relu_signature(tape.mlp.pre);
  std::vector<Image> images;
  for (const auto& set : sets) {
    RenderStats st;
    images.push_back(render(set, view, {}, &st));
    h = (h ^ st.signature) * 1099511628211ULL;
  }
  RenderStats st;
  images.push_back(render(base, view, {}, &st));
  h = (h ^ st.signature) * 1099511628211ULL;
  WeightCnn::Tape ct;
  s.cnn.forward(s.store, images, &ct);
  return (h ^ relu_signature(ct.pre)) * 1099511628211ULL;
}

Outcome ac1_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  CameraView a = front_camera(16, 16, 16.0);
  CameraView b = a;
  b.world_to_camera(0, 3) = -0.3;  // slight sideways shift
  Dataset d;
  d.train = {a, b};
  d.train_images = {random_image(16, 16, 11, 0.0, 1.0), random_image(16, 16, 12, 0.0, 1.0)};
  const GaussianSet scene = random_scene(20, 7);
  d.points = scene.mean;
  TrainConfig cfg;
  cfg.sets = 2;
  TrainState s = init_state(d, cfg);
  s.set_gaussians(scene);
  // move the focus off its initial value so d_F enters through exp(u) != 1
  s.store.at("focus.v000").value[0] = 0.1;
  // Zero biases put ReLU inputs exactly on the kink wherever the image is black; probe a generic point.
  std::mt19937 jitter(5);
  std::uniform_real_distribution<double> small(-0.05, 0.05);
  for (auto& t : s.store.tensors()) {
    if (t.name.size() > 2 && t.name.ends_with(".b") && !t.name.starts_with("mlp.head_")) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.value[i] += small(jitter);
    }
  }

  const Image& gt = d.train_images[0];
  view_loss_gradients(s, 0, gt, Phase::coc_weighted);

  std::map<std::string, std::vector<std::pair<std::string, Eigen::Index>>> classes;
  std::mt19937 rng(3);
  for (const auto& t : s.store.tensors()) {
    std::string cls;
    if (t.name.rfind("gauss.", 0) == 0) {
      cls = t.name;
    } else if (t.name.rfind("focus.", 0) == 0) {
      cls = "focus";
    } else {
      cls = t.name.substr(0, t.name.find('.'));
    }
    const bool sample = cls == "mlp" || cls == "cnn";
    if (sample) {
      std::uniform_int_distribution<Eigen::Index> pick(0, t.size() - 1);
      for (int k = 0; k < 6; ++k) classes[cls].emplace_back(t.name, pick(rng));
    } else {
      for (Eigen::Index i = 0; i < t.size(); ++i) classes[cls].emplace_back(t.name, i);
    }
  }

  std::map<std::string, Eigen::VectorXd> analytic;
  for (const auto& t : s.store.tensors()) analytic[t.name] = t.grad;

  std::ostringstream detail;
  bool pass = true;
  std::size_t checked = 0;
  for (const auto& [cls, entries] : classes) {
    double worst = 0, largest = 0;
    int bad = 0;
    for (const auto& [name, i] : entries) {
      double* p = &s.store.at(name).value[i];
      const double num = central_difference(
          p, [&] { return Probe{view_loss(s, 0, gt, Phase::coc_weighted), branch_signature(s, 0)}; }, 1e-5);
      const double ana = analytic[name][i];
      const double err = std::abs(ana - num);
      if (!grad_close(ana, num)) {
        ++bad;
        std::clog << "  " << name << "[" << i << "] analytic " << ana << " numeric " << num << "\n";
      }
      const double scale = std::max(std::abs(ana), std::abs(num));
      largest = std::max(largest, scale);
      if (scale > 1e-6) worst = std::max(worst, err / scale);
      ++checked;
    }
    if (bad) pass = false;
    detail << cls << " " << entries.size() << (bad ? " BAD=" + std::to_string(bad) : "")
           << fmt(" |g|max %.1e maxrel %.1e; ", largest, worst);
  }
  const double secs = seconds_since(t0);
  if (secs > 60) pass = false;
  detail << checked << " entries, " << fmt("%.1f", secs) << " s";
  return {pass, detail.str()};
}

// ---------------------------------------------------------------------------
// AC-2

GaussianSet point_at_depth(double depth) {
  GaussianSet p(1);
  p.mean.row(0) << 0.0, 0.0, depth;
  p.log_scale.row(0).setConstant(std::log(1e-4));
  p.rot.row(0) << 1, 0, 0, 0;
  p.opacity_logit[0] = 8.0;
  p.sh.setZero();
  p.sh.row(0).head<3>().setConstant(1.0);
  return p;
}

Outcome ac2_optics() {
  const auto t0 = std::chrono::steady_clock::now();
  CameraView view = front_camera(128, 128, 120.0);
  const double focus = 1.0;
  const LensParams lens{focus / 20, 0.3};
  std::ostringstream detail;
  bool pass = true;
  for (double ratio : {0.5, 0.75, 1.5, 2.0}) {
    const GaussianSet p = point_at_depth(ratio * focus);
    const double measured = second_moment_diameter(render(p, view), render_defocused_oracle(p, view, lens, focus, 1024));
    const double predicted = blur_diameter_px(view, lens, focus, ratio * focus);
    const double rel = std::abs(measured - predicted) / predicted;
    pass = pass && rel <= 0.05;
    detail << fmt("%.2fdF %.1f%%; ", ratio, 100 * rel);
  }
  double worst = 0;
  const double f = 3e-3, aperture = 0.5, df = 3.0;
  for (double ratio : {0.5, 0.75, 1.5, 2.0}) {
    Eigen::VectorXd dd(1), k(1);
    dd << ratio * df;
    k << f * aperture;
    const double approx = coc_diameter(dd, df, k)[0];
    const double exact = coc_diameter_exact(dd[0], df, f, aperture);
    worst = std::max(worst, std::abs(approx - exact) / exact);
  }
  pass = pass && worst < 2e-3;
  const double secs = seconds_since(t0);
  pass = pass && secs <= 120;
  detail << fmt("approx gap %.3f%%, %.1f s", 100 * worst, secs);
  return {pass, detail.str()};
}

// ---------------------------------------------------------------------------
// Desk-scale data and runs shared by AC-3..AC-6

const Dataset& desk_data() {
  static const Dataset d = [] {
    const fs::path dir = fs::temp_directory_path() / "cocosplat_acceptance_planes3";
    fs::remove_all(dir);
    emit_dataset(dir, gen_scene(SceneSpec{}), 256);
    Dataset out = load_dataset(dir);
    fs::remove_all(dir);
    return out;
  }();
  return d;
}

struct Run {
  TrainState state;
  double seconds = 0;
};

Run desk_run(TrainConfig cfg, const char* label) {
  cfg.total_iters = 3000;
  cfg.sets = 5;
  cfg.seed = 0;
  const auto t0 = std::chrono::steady_clock::now();
  Run r{train(desk_data(), cfg).state, 0};
  r.seconds = seconds_since(t0);
  std::clog << "  [" << label << "] trained in " << fmt("%.0f", r.seconds) << " s\n";
  return r;
}

const Run& full_run() {
  static const Run r = desk_run(TrainConfig{}, "full");
  return r;
}

std::pair<double, double> held_out(const TrainState& s) {
  const auto rows = evaluate(s, desk_data().eval, desk_data().eval_images);
  double psnr = 0, ssim = 0;
  for (const auto& r : rows) {
    psnr += r.psnr / rows.size();
    ssim += r.ssim / rows.size();
  }
  return {psnr, ssim};
}

Outcome ac3_reconstruction() {
  TrainConfig base;
  base.use_coc = base.learn_direction = base.use_beta = base.use_aperture = false;
  base.baseline = true;
  const Run b = desk_run(base, "baseline");
  const Run& f = full_run();
  const auto [fp, fs_] = held_out(f.state);
  const auto [bp, bs] = held_out(b.state);
  const double secs = f.seconds + b.seconds;
  const bool pass = fp - bp >= 1.0 && fs_ > bs && secs <= 1800;
  return {pass, fmt("full %.2f dB / %.4f, baseline %.2f dB / %.4f", fp, fs_, bp, bs) +
                    fmt(", gain %.2f dB, %.0f s", fp - bp, secs)};
}

Outcome ac4_ablations() {
  const double full = training_objective(full_run().state, desk_data());
  std::ostringstream detail;
  detail << fmt("full %.5f", full);
  bool pass = true;
  const std::vector<std::pair<const char*, std::function<void(TrainConfig&)>>> switches{
      {"no-coc", [](TrainConfig& c) { c.use_coc = false; }},
      {"no-direction", [](TrainConfig& c) { c.learn_direction = false; }},
      {"no-beta", [](TrainConfig& c) { c.use_beta = false; }},
      {"no-aperture", [](TrainConfig& c) { c.use_aperture = false; }},
  };
  for (const auto& [name, apply] : switches) {
    TrainConfig cfg;
    apply(cfg);
    const double loss = training_objective(desk_run(cfg, name).state, desk_data());
    pass = pass && full <= loss + 1e-3;
    detail << ", " << name << fmt(" %.5f", loss);
  }
  return {pass, detail.str()};
}

Outcome ac5_invariants() {
  const TrainState& s = full_run().state;
  const GaussianSet base = s.gaussians();
  double softmax_err = 0, offset_excess = -INFINITY, ratio_lo = INFINITY, ratio_hi = -INFINITY;
  double beta_lo = INFINITY, beta_hi = -INFINITY, sharp_gap = 0, double_err = 0;
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    CameraView view = s.views[v];
    view.focus_plane = s.focus(v);
    CocTape tape;
    const auto sets = generate_coc_sets(base, view, view.focus_plane, s.mlp, s.store, s.frame, s.coc, &tape);
    std::vector<Image> images;
    for (std::size_t m = 0; m < sets.size(); ++m) {
      const auto& set = sets[m];
      images.push_back(render(set, view));
      for (Eigen::Index i = 0; i < base.size(); ++i) {
        const double shift = (set.mean.row(i) - base.mean.row(i)).norm();
        offset_excess = std::max(offset_excess, shift - tape.sigma[i] / 2);
        for (int c = 0; c < 3; ++c) {
          const double r = std::exp(set.log_scale(i, c) - base.log_scale(i, c));
          ratio_lo = std::min(ratio_lo, r);
          ratio_hi = std::max(ratio_hi, r);
        }
      }
    }
    images.push_back(render(base, view));
    beta_lo = std::min(beta_lo, tape.out.beta.minCoeff());
    beta_hi = std::max(beta_hi, tape.out.beta.maxCoeff());
    const Eigen::MatrixXd w = softmax_weights(s.cnn.forward(s.store, images));
    softmax_err = std::max(softmax_err, (w.colwise().sum().array() - 1.0).abs().maxCoeff());

    const Image sharp = render_model(s, s.views[v], false).image;
    const Image zero = render_model(s, s.views[v], true, 0.0, view.focus_plane).image;
    sharp_gap = std::max(sharp_gap, (zero.rgb - sharp.rgb).abs().maxCoeff());

    TrainState twice = s;
    twice.coc.k_multiplier = 2.0;
    CocTape t2;
    generate_coc_sets(base, view, view.focus_plane, twice.mlp, twice.store, twice.frame, twice.coc, &t2);
    double_err = std::max(double_err, (t2.sigma - 2.0 * tape.sigma).cwiseAbs().maxCoeff());
  }
  const bool pass = softmax_err <= 1e-6 && offset_excess <= 1e-12 && ratio_lo >= 1.0 - 1e-12 &&
                    ratio_hi <= 1.1 + 1e-12 && beta_lo > 0 && beta_hi < 1 && sharp_gap < 1e-6 && double_err == 0.0;
  std::ostringstream detail;
  detail << fmt("softmax %.1e, offset-sigma/2 %.1e, ", softmax_err, offset_excess)
         << fmt("scale ratio [%.4f, %.4f], beta [%.3g, %.3g], ", ratio_lo, ratio_hi, beta_lo, beta_hi)
         << fmt("kscale0 Linf %.1e, 2x sigma err %.1e", sharp_gap, double_err);
  return {pass, detail.str()};
}

Outcome ac6_determinism() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg;
  cfg.total_iters = 150;
  cfg.deterministic = true;
  const fs::path dir = fs::temp_directory_path() / "cocosplat_acceptance_ckpt";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.ckpt", to_checkpoint(train(desk_data(), cfg).state));
  save_checkpoint(dir / "b.ckpt", to_checkpoint(train(desk_data(), cfg).state));
  const std::string a = read_file(dir / "a.ckpt");
  const bool same = a == read_file(dir / "b.ckpt");

  TrainState part = init_state(desk_data(), cfg);
  while (part.iter < 75) {
    const std::size_t v = view_for_iter(cfg.seed, part.views.size(), part.iter);
    train_step(part, v, desk_data().train_images[v]);
  }
  save_checkpoint(dir / "part.ckpt", to_checkpoint(part));
  TrainState resumed = from_checkpoint(load_checkpoint(dir / "part.ckpt"));
  train_continue(resumed, desk_data());
  const bool resume_same = serialize_checkpoint(to_checkpoint(resumed)) == a;
  fs::remove_all(dir);
  return {same && resume_same, std::string("repeat ") + (same ? "identical" : "DIFFERS") + ", resume at 75/150 " +
                                   (resume_same ? "identical" : "DIFFERS") +
                                   fmt(", %.0f bytes, %.0f s", static_cast<double>(a.size()), seconds_since(t0))};
}

}  // namespace

// Optional arguments pick criteria by name, e.g. `acceptance AC-1 AC-2`.
int main(int argc, char** argv) {
  const std::vector<std::string> only(argv + 1, argv + argc);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"AC-1", ac1_gradients},  {"AC-2", ac2_optics},     {"AC-3", ac3_reconstruction},
      {"AC-4", ac4_ablations},  {"AC-5", ac5_invariants}, {"AC-6", ac6_determinism},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << name << (o.pass ? " PASS " : " FAIL ") << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
