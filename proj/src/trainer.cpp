#include "cocosplat/trainer.hpp"

#include "cocosplat/compositor.hpp"
#include "cocosplat/metrics.hpp"
#include "cocosplat/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace cocosplat {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string focus_name(std::size_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "focus.v%03zu", v);
  return buf;
}

template <int Cols>
using RowMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Cols, Eigen::RowMajor>>;
template <int Cols>
using ConstRowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Cols, Eigen::RowMajor>>;

void accumulate_gaussians(ParamStore& store, const GaussianGrads& g) {
  const Eigen::Index n = g.size();
  RowMap<3>(store.at("gauss.mean").accumulate().data(), n, 3) += g.mean;
  RowMap<3>(store.at("gauss.log_scale").accumulate().data(), n, 3) += g.log_scale;
  RowMap<4>(store.at("gauss.rot").accumulate().data(), n, 4) += g.rot;
  store.at("gauss.opacity").accumulate() += g.opacity_logit;
  RowMap<12>(store.at("gauss.sh").accumulate().data(), n, 12) += g.sh;
}

bool grads_finite(const ParamStore& store) {
  for (const auto& t : store.tensors()) {
    if (t.touched && !t.grad.allFinite()) return false;
  }
  return true;
}

bool values_finite(const ParamStore& store) {
  for (const auto& t : store.tensors()) {
    if (!t.value.allFinite()) return false;
  }
  return true;
}

void renormalize_quaternions(ParamStore& store) {
  Tensor& t = store.at("gauss.rot");
  RowMap<4> q(t.value.data(), t.size() / 4, 4);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double n = q.row(i).norm();
    // already-unit rows are left alone so a zero step stays bit-exact
    if (n > 0 && std::abs(n - 1.0) > 1e-12) q.row(i) /= n;
  }
}

// Forward of the composite for one view; the tapes are kept for the backward pass.
struct Forward {
  GaussianSet base;
  CameraView view;
  double focus = 0;
  Phase phase = Phase::base_only;
  CocTape coc_tape;
  std::vector<GaussianSet> sets;
  std::vector<Image> images;  // CoC renders then the base render
  WeightCnn::Tape cnn_tape;
  Eigen::MatrixXd logits;
  Image pred;
};

Forward run_forward(const TrainState& s, std::size_t v, Phase phase, bool keep_tapes) {
  Forward f;
  f.base = s.gaussians();
  f.view = s.views.at(v);
  f.focus = s.focus(v);
  f.phase = phase;
  f.view.focus_plane = f.focus;
  if (phase == Phase::base_only) {
    f.pred = render(f.base, f.view);
    return f;
  }
  f.sets = generate_coc_sets(f.base, f.view, f.focus, s.mlp, s.store, s.frame, s.coc,
                             keep_tapes ? &f.coc_tape : nullptr);
  for (const auto& set : f.sets) f.images.push_back(render(set, f.view));
  f.images.push_back(render(f.base, f.view));
  if (phase == Phase::coc_average) {
    f.pred = average_fallback(f.images);
  } else {
    f.logits = s.cnn.forward(s.store, f.images, keep_tapes ? &f.cnn_tape : nullptr);
    f.pred = weighted_sum(f.images, f.logits);
  }
  return f;
}

void run_backward(TrainState& s, std::size_t v, const Forward& f, const Image& d_pred) {
  if (f.phase == Phase::base_only) {
    accumulate_gaussians(s.store, render_backward(f.base, f.view, d_pred));
    return;
  }
  std::vector<Image> d_images;
  if (f.phase == Phase::coc_average) {
    d_images = average_fallback_backward(f.images.size(), d_pred);
  } else {
    CompositeGrads cg = weighted_sum_backward(f.images, f.logits, d_pred);
    std::vector<Image> d_in = s.cnn.backward(s.store, f.cnn_tape, cg.logits);
    d_images = std::move(cg.images);
    for (std::size_t i = 0; i < d_images.size(); ++i) d_images[i].rgb += d_in[i].rgb;
  }
  const std::size_t m = f.sets.size();
  std::vector<GaussianGrads> d_sets;
  d_sets.reserve(m);
  for (std::size_t i = 0; i < m; ++i) d_sets.push_back(render_backward(f.sets[i], f.view, d_images[i]));
  GaussianGrads d_base = render_backward(f.base, f.view, d_images[m]);
  CocGrads cg = generate_coc_sets_backward(f.base, d_sets, s.mlp, s.store, s.frame, s.coc, f.coc_tape);
  d_base += cg.base;
  accumulate_gaussians(s.store, d_base);
  // d_F = d_init exp(u)
  s.store.at(focus_name(v)).accumulate()[0] += cg.focus * f.focus;
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (total_iters < 0) throw std::invalid_argument("train: total_iters must be >= 0");
  if (!(0 <= h_theta_start_frac && h_theta_start_frac <= cnn_start_frac && cnn_start_frac <= 1)) {
    throw std::invalid_argument("train: need 0 <= h_theta_start_frac <= cnn_start_frac <= 1");
  }
  if (sets < 1) throw std::invalid_argument("train: the number of CoC sets must be >= 1");
  if (eval_every < 0 || checkpoint_every < 0) throw std::invalid_argument("train: intervals must be >= 0");
  if (!(lr_multiplier >= 0)) throw std::invalid_argument("train: lr_multiplier must be >= 0");
  if (!(k_init > 0)) throw std::invalid_argument("train: k_init must be positive");
  if (!(init_opacity > 0 && init_opacity < 1)) throw std::invalid_argument("train: init_opacity must be in (0, 1)");
}

int TrainConfig::h_theta_start() const { return static_cast<int>(std::lround(total_iters * h_theta_start_frac)); }
int TrainConfig::cnn_start() const { return static_cast<int>(std::lround(total_iters * cnn_start_frac)); }

CocConfig TrainConfig::coc_config() const {
  CocConfig c;
  c.sets = sets;
  c.use_coc = use_coc;
  c.learn_direction = learn_direction;
  c.use_beta = use_beta;
  c.use_aperture = use_aperture;
  return c;
}

json TrainConfig::to_json() const {
  return {{"total_iters", total_iters},
          {"h_theta_start_frac", h_theta_start_frac},
          {"cnn_start_frac", cnn_start_frac},
          {"m", sets},
          {"lambda", kDssimWeight},
          {"seed", seed},
          {"use_coc", use_coc},
          {"learn_direction", learn_direction},
          {"use_beta", use_beta},
          {"use_aperture", use_aperture},
          {"baseline", baseline},
          {"deterministic", deterministic},
          {"eval_every", eval_every},
          {"checkpoint_every", checkpoint_every},
          {"lr_mean_init", lr_mean_init},
          {"lr_mean_final", lr_mean_final},
          {"lr_opacity", lr_opacity},
          {"lr_scale", lr_scale},
          {"lr_rot", lr_rot},
          {"lr_sh", lr_sh},
          {"lr_net", lr_net},
          {"lr_focus", lr_focus},
          {"lr_multiplier", lr_multiplier},
          {"k_init", k_init},
          {"init_opacity", init_opacity}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.total_iters = j.at("total_iters").get<int>();
    c.h_theta_start_frac = j.at("h_theta_start_frac").get<double>();
    c.cnn_start_frac = j.at("cnn_start_frac").get<double>();
    c.sets = j.at("m").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.use_coc = j.at("use_coc").get<bool>();
    c.learn_direction = j.at("learn_direction").get<bool>();
    c.use_beta = j.at("use_beta").get<bool>();
    c.use_aperture = j.at("use_aperture").get<bool>();
    c.baseline = j.at("baseline").get<bool>();
    c.deterministic = j.at("deterministic").get<bool>();
    c.eval_every = j.at("eval_every").get<int>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    c.lr_mean_init = j.at("lr_mean_init").get<double>();
    c.lr_mean_final = j.at("lr_mean_final").get<double>();
    c.lr_opacity = j.at("lr_opacity").get<double>();
    c.lr_scale = j.at("lr_scale").get<double>();
    c.lr_rot = j.at("lr_rot").get<double>();
    c.lr_sh = j.at("lr_sh").get<double>();
    c.lr_net = j.at("lr_net").get<double>();
    c.lr_focus = j.at("lr_focus").get<double>();
    c.lr_multiplier = j.at("lr_multiplier").get<double>();
    c.k_init = j.at("k_init").get<double>();
    c.init_opacity = j.at("init_opacity").get<double>();
  } catch (const json::exception& e) {
    throw StorageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void Dataset::validate() const {
  if (train.empty()) throw std::invalid_argument("dataset: no training views");
  if (train.size() != train_images.size() || eval.size() != eval_images.size()) {
    throw std::invalid_argument("dataset: view and image counts differ");
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    train[i].validate();
    if (train_images[i].width != train[i].width || train_images[i].height != train[i].height) {
      throw std::invalid_argument("dataset: train image " + std::to_string(i) + " does not match its view size");
    }
  }
  for (std::size_t i = 0; i < eval.size(); ++i) {
    eval[i].validate();
    if (eval_images[i].width != eval[i].width || eval_images[i].height != eval[i].height) {
      throw std::invalid_argument("dataset: eval image " + std::to_string(i) + " does not match its view size");
    }
  }
  if (points.rows() == 0) throw std::invalid_argument("dataset: empty point cloud");
  if (!points.allFinite()) throw std::invalid_argument("dataset: non-finite points");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw StorageError(dir.string() + ": dataset directory not found");
  Dataset d;
  ViewsFile vf = read_views(dir / "views.json");
  d.train = std::move(vf.train);
  d.eval = std::move(vf.eval);
  d.points = read_points(dir / "points.json");
  char buf[64];
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    std::snprintf(buf, sizeof buf, "train/defocus_%03zu.png", i);
    d.train_images.push_back(read_image(dir / buf));
  }
  for (std::size_t i = 0; i < d.eval.size(); ++i) {
    std::snprintf(buf, sizeof buf, "eval/sharp_%03zu.png", i);
    d.eval_images.push_back(read_image(dir / buf));
  }
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw StorageError(dir.string() + ": " + e.what());
  }
  return d;
}

// ---------------------------------------------------------------------------

Eigen::Index TrainState::gaussian_count() const { return store.at("gauss.opacity").size(); }

GaussianSet TrainState::gaussians() const {
  const Eigen::Index n = gaussian_count();
  GaussianSet g(n);
  g.mean = ConstRowMap<3>(store.at("gauss.mean").value.data(), n, 3);
  g.log_scale = ConstRowMap<3>(store.at("gauss.log_scale").value.data(), n, 3);
  g.rot = ConstRowMap<4>(store.at("gauss.rot").value.data(), n, 4);
  g.opacity_logit = store.at("gauss.opacity").value;
  g.sh = ConstRowMap<12>(store.at("gauss.sh").value.data(), n, 12);
  return g;
}

void TrainState::set_gaussians(const GaussianSet& g) {
  if (g.size() != gaussian_count()) throw std::invalid_argument("set_gaussians: Gaussian count differs");
  const Eigen::Index n = g.size();
  RowMap<3>(store.at("gauss.mean").value.data(), n, 3) = g.mean;
  RowMap<3>(store.at("gauss.log_scale").value.data(), n, 3) = g.log_scale;
  RowMap<4>(store.at("gauss.rot").value.data(), n, 4) = g.rot;
  store.at("gauss.opacity").value = g.opacity_logit;
  RowMap<12>(store.at("gauss.sh").value.data(), n, 12) = g.sh;
}

double TrainState::focus(std::size_t view) const {
  return focus_init.at(view) * std::exp(store.at(focus_name(view)).value[0]);
}

Phase TrainState::phase(std::uint64_t at) const {
  if (cfg.baseline || at < static_cast<std::uint64_t>(cfg.h_theta_start())) return Phase::base_only;
  if (at < static_cast<std::uint64_t>(cfg.cnn_start())) return Phase::coc_average;
  return Phase::coc_weighted;
}

double TrainState::mean_lr() const {
  const double t = cfg.total_iters > 0 ? std::min(1.0, static_cast<double>(iter) / cfg.total_iters) : 0.0;
  const double lr = std::exp(std::log(cfg.lr_mean_init) * (1 - t) + std::log(cfg.lr_mean_final) * t);
  return lr * camera_extent;
}

TrainState init_state(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.train.size() < 2) throw std::invalid_argument("train: need at least 2 training views");

  TrainState s;
  s.cfg = cfg;
  s.views = data.train;
  for (auto& v : s.views) v.focus_plane = 0;
  s.eval_views = data.eval;
  const RowMatX3& p = data.points;
  const Eigen::Index n = p.rows();

  // camera extent as in the splatting backbone: 1.1 x the largest distance from the camera centroid
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& v : s.views) centroid += v.center();
  centroid /= static_cast<double>(s.views.size());
  double far = 0;
  for (const auto& v : s.views) far = std::max(far, (v.center() - centroid).norm());
  s.camera_extent = std::max(1.1 * far, 1e-6);

  s.frame = EncodingFrame::fit(p);
  const Eigen::Vector3d lo = p.colwise().minCoeff(), hi = p.colwise().maxCoeff();
  const double extent = std::max((hi - lo).norm(), 1e-9);

  // per-view focus starts at the mean distance from the camera centre to the points in front of it
  for (const auto& v : s.views) {
    double sum = 0;
    int count = 0;
    const Eigen::Vector3d c = v.center();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (v.to_camera(p.row(i).transpose()).z() > 0) {
        sum += (p.row(i).transpose() - c).norm();
        ++count;
      }
    }
    if (count == 0) throw std::invalid_argument("train: a training view sees no points");
    s.focus_init.push_back(sum / count);
  }
  const double mean_focus =
      std::accumulate(s.focus_init.begin(), s.focus_init.end(), 0.0) / static_cast<double>(s.focus_init.size());

  s.coc = cfg.coc_config();
  s.coc.k_unit = mean_focus * mean_focus;
  s.coc.sigma_ceiling = 0.05 * extent;
  s.coc.fixed_radius = 0.5 * s.coc.sigma_ceiling;
  s.coc.validate();

  const double m = cfg.lr_multiplier;
  Tensor& mean = s.store.add("gauss.mean", {n, 3}, cfg.lr_mean_init * m, 1e-15);
  Tensor& log_scale = s.store.add("gauss.log_scale", {n, 3}, cfg.lr_scale * m, 1e-15);
  Tensor& rot = s.store.add("gauss.rot", {n, 4}, cfg.lr_rot * m, 1e-15);
  Tensor& opacity = s.store.add("gauss.opacity", {n}, cfg.lr_opacity * m, 1e-15);
  Tensor& sh = s.store.add("gauss.sh", {n, 12}, cfg.lr_sh * m, 1e-15);

  RowMap<3>(mean.value.data(), n, 3) = p;
  RowMap<4> q(rot.value.data(), n, 4);
  q.setZero();
  q.col(0).setOnes();
  opacity.value.setConstant(std::log(cfg.init_opacity / (1 - cfg.init_opacity)));

  // isotropic scale from the root-mean-square distance to the three nearest neighbours
  RowMap<3> ls(log_scale.value.data(), n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::array<double, 3> best{INFINITY, INFINITY, INFINITY};
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d2 = (p.row(i) - p.row(j)).squaredNorm();
      if (d2 < best[2]) {
        best[2] = d2;
        std::sort(best.begin(), best.end());
      }
    }
    double acc = 0;
    int k = 0;
    for (double b : best) {
      if (std::isfinite(b)) {
        acc += b;
        ++k;
      }
    }
    const double d = k > 0 ? std::sqrt(acc / k) : 0.01 * extent;
    ls.row(i).setConstant(std::log(std::max(d, 1e-7 * extent)));
  }

  // DC colour sampled from the first training image that sees the point
  RowMap<12> c(sh.value.data(), n, 12);
  c.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Vector3d rgb(0.5, 0.5, 0.5);
    for (std::size_t v = 0; v < s.views.size(); ++v) {
      const CameraView& cam = s.views[v];
      const Eigen::Vector3d x = cam.to_camera(p.row(i).transpose());
      if (x.z() <= 0) continue;
      const int px = static_cast<int>(std::floor(cam.fx * x.x() / x.z() + cam.cx));
      const int py = static_cast<int>(std::floor(cam.fy * x.y() / x.z() + cam.cy));
      if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) continue;
      rgb = data.train_images[v].at(px, py).transpose();
      break;
    }
    for (int ch = 0; ch < 3; ++ch) c(i, ch * kShCoeffs) = (rgb[ch] - 0.5) / kShC0;
  }

  for (std::size_t v = 0; v < s.views.size(); ++v) s.store.add(focus_name(v), {1}, cfg.lr_focus * m);

  s.mlp = CocMlp(cfg.sets);
  s.cnn = WeightCnn(cfg.sets);
  s.mlp.register_params(s.store, splitmix(cfg.seed * 2 + 1), cfg.lr_net * m, cfg.k_init);
  s.cnn.register_params(s.store, splitmix(cfg.seed * 2 + 2), cfg.lr_net * m);
  return s;
}

// ---------------------------------------------------------------------------

double view_loss(const TrainState& s, std::size_t v, const Image& gt, Phase phase) {
  return training_loss(run_forward(s, v, phase, false).pred, gt).value;
}

double view_loss_gradients(TrainState& s, std::size_t v, const Image& gt, Phase phase) {
  s.store.zero_grads();
  const Forward f = run_forward(s, v, phase, true);
  const LossValue loss = training_loss(f.pred, gt);
  run_backward(s, v, f, loss.grad);
  return loss.value;
}

StepReport train_step(TrainState& s, std::size_t v, const Image& gt) {
  if (v >= s.views.size()) throw std::out_of_range("train_step: view index out of range");
  if (gt.width != s.views[v].width || gt.height != s.views[v].height) {
    throw std::invalid_argument("train_step: target size does not match the view");
  }
  if (s.cfg.deterministic) set_worker_count(1);

  StepReport rep;
  rep.phase = s.phase(s.iter);
  s.store.zero_grads();

  Forward f = run_forward(s, v, rep.phase, true);
  LossValue loss = training_loss(f.pred, gt);
  rep.loss = loss.value;

  auto reject = [&](const char* why) {
    s.store.zero_grads();
    ++s.incidents;
    rep.rejected = true;
    std::clog << "train_step: iter " << s.iter << " view " << v << ": " << why << ", step rejected\n";
  };

  if (!std::isfinite(loss.value)) {
    reject("non-finite loss");
  } else {
    run_backward(s, v, f, loss.grad);
    if (!grads_finite(s.store)) {
      reject("non-finite gradient");
    } else {
      std::deque<Tensor> snapshot = s.store.tensors();
      const double mean_lr = s.mean_lr() * s.cfg.lr_multiplier;
      adam_step(s.store, [&](const Tensor& t) { return t.name == "gauss.mean" ? mean_lr : t.lr; });
      renormalize_quaternions(s.store);
      if (!values_finite(s.store)) {
        s.store.tensors() = std::move(snapshot);
        reject("non-finite parameters after update");
      }
    }
  }
  ++s.iter;
  return rep;
}

std::size_t view_for_iter(std::uint64_t seed, std::size_t views, std::uint64_t iter) {
  if (views == 0) throw std::invalid_argument("view_for_iter: no views");
  const std::uint64_t epoch = iter / views;
  std::vector<std::size_t> order(views);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(splitmix(seed ^ splitmix(epoch + 0x5eed)));
  // Fisher-Yates with explicit draws, independent of the standard library's shuffle
  for (std::size_t i = views - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  return order[iter % views];
}

std::vector<EvalRow> evaluate(const GaussianSet& set, const std::vector<CameraView>& views,
                              const std::vector<Image>& gt, bool quantize) {
  if (views.size() != gt.size()) throw std::invalid_argument("evaluate: view and image counts differ");
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < views.size(); ++i) {
    Image img = render(set, views[i]);
    if (quantize) img.rgb = img.rgb.unaryExpr([](double v) { return to_byte(v) / 255.0; });
    rows.push_back({i, psnr(img, gt[i]), ssim(img, gt[i])});
  }
  return rows;
}

std::vector<EvalRow> evaluate(const TrainState& state, const std::vector<CameraView>& views,
                              const std::vector<Image>& gt, bool quantize) {
  return evaluate(state.gaussians(), views, gt, quantize);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "iter,loss,psnr,ssim\n";
  for (const auto& r : rows) {
    os << r.iter << ',' << r.loss << ',';
    if (r.psnr) os << *r.psnr;
    os << ',';
    if (r.ssim) os << *r.ssim;
    os << '\n';
  }
  return os.str();
}

std::vector<MetricsRow> train_continue(TrainState& s, const Dataset& data, const TrainHooks& hooks) {
  data.validate();
  if (data.train.size() != s.views.size()) throw std::invalid_argument("train: dataset does not match the state");
  if (s.cfg.deterministic) set_worker_count(1);
  std::vector<MetricsRow> history;
  const auto total = static_cast<std::uint64_t>(s.cfg.total_iters);
  while (s.iter < total) {
    const std::size_t v = view_for_iter(s.cfg.seed, s.views.size(), s.iter);
    const StepReport rep = train_step(s, v, data.train_images[v]);
    MetricsRow row;
    row.iter = s.iter;
    row.loss = rep.loss;
    const bool eval_now = !data.eval.empty() && ((s.cfg.eval_every > 0 && s.iter % s.cfg.eval_every == 0) ||
                                                 s.iter == total);
    if (eval_now) {
      const auto rows = evaluate(s, data.eval, data.eval_images);
      double p = 0, q = 0;
      for (const auto& r : rows) {
        p += r.psnr;
        q += r.ssim;
      }
      row.psnr = p / static_cast<double>(rows.size());
      row.ssim = q / static_cast<double>(rows.size());
    }
    history.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    const bool ckpt_now = !s.cfg.checkpoint_path.empty() &&
                          ((s.cfg.checkpoint_every > 0 && s.iter % s.cfg.checkpoint_every == 0) || s.iter == total);
    if (ckpt_now) save_checkpoint(s.cfg.checkpoint_path, to_checkpoint(s));
  }
  return history;
}

TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  if (cfg.deterministic) set_worker_count(1);
  TrainResult r{init_state(data, cfg), {}};
  r.history = train_continue(r.state, data, hooks);
  return r;
}

double training_objective(const TrainState& s, const Dataset& data) {
  double acc = 0;
  const Phase phase = s.phase(s.iter);
  for (std::size_t v = 0; v < s.views.size(); ++v) acc += view_loss(s, v, data.train_images.at(v), phase);
  return acc / static_cast<double>(s.views.size());
}

// ---------------------------------------------------------------------------

Checkpoint to_checkpoint(const TrainState& s) {
  Checkpoint c;
  c.iter = s.iter;
  json views = json::array(), eval = json::array(), shapes = json::object();
  for (const auto& v : s.views) views.push_back(view_to_json(v));
  for (const auto& v : s.eval_views) eval.push_back(view_to_json(v));
  for (const auto& t : s.store.tensors()) shapes[t.name] = t.shape;
  c.meta = {{"config", s.cfg.to_json()},
            {"views", views},
            {"eval_views", eval},
            {"focus_init", s.focus_init},
            {"camera_extent", s.camera_extent},
            {"frame", {{"center", {s.frame.center.x(), s.frame.center.y(), s.frame.center.z()}},
                       {"radius", s.frame.radius}}},
            {"coc", {{"k_unit", s.coc.k_unit}, {"sigma_ceiling", s.coc.sigma_ceiling},
                     {"fixed_radius", s.coc.fixed_radius}}},
            {"incidents", s.incidents},
            {"shapes", shapes}};
  for (const auto& t : s.store.tensors()) {
    auto vec = [](const Eigen::VectorXd& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
    c.tensors.push_back({t.name, DType::f64, vec(t.value)});
    c.tensors.push_back({t.name + ".adam_m", DType::f64, vec(t.adam_m)});
    c.tensors.push_back({t.name + ".adam_v", DType::f64, vec(t.adam_v)});
    c.tensors.push_back({t.name + ".adam_t", DType::f64, {t.adam_step}});
  }
  return c;
}

TrainState from_checkpoint(const Checkpoint& c) {
  TrainState s;
  try {
    const json& m = c.meta;
    s.cfg = TrainConfig::from_json(m.at("config"));
    for (std::size_t i = 0; i < m.at("views").size(); ++i) {
      s.views.push_back(view_from_json(m["views"][i], "views[" + std::to_string(i) + "]"));
    }
    for (std::size_t i = 0; i < m.at("eval_views").size(); ++i) {
      s.eval_views.push_back(view_from_json(m["eval_views"][i], "eval_views[" + std::to_string(i) + "]"));
    }
    s.focus_init = m.at("focus_init").get<std::vector<double>>();
    s.camera_extent = m.at("camera_extent").get<double>();
    const auto center = m.at("frame").at("center").get<std::vector<double>>();
    if (center.size() != 3) throw StorageError("checkpoint: frame.center must have 3 entries");
    s.frame.center = Eigen::Vector3d(center[0], center[1], center[2]);
    s.frame.radius = m.at("frame").at("radius").get<double>();
    s.coc = s.cfg.coc_config();
    s.coc.k_unit = m.at("coc").at("k_unit").get<double>();
    s.coc.sigma_ceiling = m.at("coc").at("sigma_ceiling").get<double>();
    s.coc.fixed_radius = m.at("coc").at("fixed_radius").get<double>();
    s.coc.validate();
    s.incidents = m.at("incidents").get<std::uint64_t>();
    if (s.focus_init.size() != s.views.size()) throw StorageError("checkpoint: focus_init does not match views");

    // rebuild the tensor layout from a fresh init, then overwrite every value
    s.mlp = CocMlp(s.cfg.sets);
    s.cnn = WeightCnn(s.cfg.sets);
    const json& shapes = m.at("shapes");
    const double lr_m = s.cfg.lr_multiplier;
    auto lr_for = [&](const std::string& name) {
      if (name == "gauss.mean") return s.cfg.lr_mean_init * lr_m;
      if (name == "gauss.log_scale") return s.cfg.lr_scale * lr_m;
      if (name == "gauss.rot") return s.cfg.lr_rot * lr_m;
      if (name == "gauss.opacity") return s.cfg.lr_opacity * lr_m;
      if (name == "gauss.sh") return s.cfg.lr_sh * lr_m;
      if (name.starts_with("focus.")) return s.cfg.lr_focus * lr_m;
      return s.cfg.lr_net * lr_m;
    };
    // registration order is fixed by init_state; replay it so checksums and Adam order match
    std::vector<std::string> order;
    for (std::size_t i = 0; i < c.tensors.size(); i += 4) order.push_back(c.tensors[i].name);
    for (const auto& name : order) {
      const auto shape = shapes.at(name).get<std::vector<Eigen::Index>>();
      const double eps = name.starts_with("gauss.") ? 1e-15 : 1e-8;
      Tensor& t = s.store.add(name, shape, lr_for(name), eps);
      auto load = [&](const std::string& key, Eigen::VectorXd& dst) {
        const NamedTensor& nt = c.at(key);
        if (static_cast<Eigen::Index>(nt.data.size()) != t.size()) {
          throw StorageError("checkpoint: tensor " + key + " has " + std::to_string(nt.data.size()) +
                             " values, expected " + std::to_string(t.size()));
        }
        dst = Eigen::Map<const Eigen::VectorXd>(nt.data.data(), t.size());
      };
      load(name, t.value);
      load(name + ".adam_m", t.adam_m);
      load(name + ".adam_v", t.adam_v);
      const NamedTensor& step = c.at(name + ".adam_t");
      if (step.data.size() != 1) throw StorageError("checkpoint: tensor " + name + ".adam_t must hold 1 value");
      t.adam_step = step.data[0];
    }
  } catch (const json::exception& e) {
    throw StorageError(std::string("checkpoint: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw StorageError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw StorageError(std::string("checkpoint: ") + e.what());
  }
  for (const char* name : {"gauss.mean", "gauss.log_scale", "gauss.rot", "gauss.opacity", "gauss.sh"}) {
    if (!s.store.contains(name)) throw StorageError(std::string("checkpoint: missing tensor ") + name);
  }
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    if (!s.store.contains(focus_name(v))) throw StorageError("checkpoint: missing tensor " + focus_name(v));
  }
  s.iter = c.iter;
  return s;
}

// ---------------------------------------------------------------------------

ModelRender render_model(const TrainState& s, const CameraView& view, bool defocus, double kscale,
                         std::optional<double> focus) {
  ModelRender out;
  const GaussianSet base = s.gaussians();
  if (!defocus) {
    out.image = render(base, view);
    return out;
  }
  if (!(kscale >= 0) || !std::isfinite(kscale)) throw std::invalid_argument("render: kscale must be >= 0");
  const double df = focus ? *focus : view.focus_plane;
  if (!(df > 0) || !std::isfinite(df)) throw std::invalid_argument("render: focus distance must be positive");
  CocConfig cfg = s.coc;
  cfg.k_multiplier = kscale;
  CocTape tape;
  const auto sets = generate_coc_sets(base, view, df, s.mlp, s.store, s.frame, cfg, &tape);
  std::vector<Image> images;
  for (const auto& set : sets) images.push_back(render(set, view));
  images.push_back(render(base, view));
  out.image = weighted_sum(images, s.cnn.forward(s.store, images));
  out.mean_coc = tape.sigma.size() > 0 ? tape.sigma.mean() : 0.0;
  return out;
}

double learned_k_mean(const TrainState& s) {
  const GaussianSet base = s.gaussians();
  CocConfig cfg = s.coc;
  cfg.k_multiplier = 1;
  double acc = 0;
  for (std::size_t v = 0; v < s.views.size(); ++v) {
    CocTape tape;
    generate_coc_sets(base, s.views[v], s.focus(v), s.mlp, s.store, s.frame, cfg, &tape);
    acc += tape.out.k.mean();
  }
  return acc / static_cast<double>(s.views.size());
}

}  // namespace cocosplat
