#pragma once

#include "cocosplat/coc.hpp"
#include "cocosplat/nnet.hpp"
#include "cocosplat/renderer.hpp"
#include "cocosplat/storage.hpp"
#include "cocosplat/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cocosplat {

struct TrainConfig {
  int total_iters = 3000;
  double h_theta_start_frac = 2.0 / 30.0;
  double cnn_start_frac = 4.0 / 30.0;
  int sets = 5;
  std::uint64_t seed = 0;

  bool use_coc = true;
  bool learn_direction = true;
  bool use_beta = true;
  bool use_aperture = true;
  /// Plain splatting: the base set alone is rendered in every phase.
  bool baseline = false;
  /// Forces a single worker so every reduction runs in one fixed order.
  bool deterministic = false;

  int eval_every = 0;
  int checkpoint_every = 0;
  /// Where periodic checkpoints go; a runtime setting, not serialized with the config.
  std::string checkpoint_path;

  double lr_mean_init = 1.6e-4;
  double lr_mean_final = 1.6e-6;
  double lr_opacity = 0.05;
  double lr_scale = 5e-3;
  double lr_rot = 1e-3;
  double lr_sh = 2.5e-3;
  double lr_net = 1e-3;
  double lr_focus = 1e-3;
  /// Multiplies every learning rate.
  double lr_multiplier = 1.0;

  double k_init = 0.01;
  double init_opacity = 0.1;

  void validate() const;
  int h_theta_start() const;
  int cnn_start() const;
  CocConfig coc_config() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

enum class Phase { base_only, coc_average, coc_weighted };

/// Training views with defocused targets, held-out views with sharp targets and the initial points.
struct Dataset {
  std::vector<CameraView> train;
  std::vector<Image> train_images;
  std::vector<CameraView> eval;
  std::vector<Image> eval_images;
  RowMatX3 points;

  void validate() const;
};

/// Reads views.json, points.json, train/defocus_%03d.png and eval/sharp_%03d.png.
Dataset load_dataset(const std::filesystem::path& dir);

/// Parameters, optimizer state and scene constants. Gaussian fields live in the store as
/// gauss.{mean,log_scale,rot,opacity,sh}; view v's focus distance is focus_init[v] exp(focus.vNNN).
struct TrainState {
  TrainConfig cfg;
  CocConfig coc;
  EncodingFrame frame;
  std::vector<CameraView> views;
  std::vector<CameraView> eval_views;
  std::vector<double> focus_init;
  double camera_extent = 1;
  ParamStore store;
  CocMlp mlp{5};
  WeightCnn cnn{5};
  std::uint64_t iter = 0;
  std::uint64_t incidents = 0;

  Eigen::Index gaussian_count() const;
  GaussianSet gaussians() const;
  void set_gaussians(const GaussianSet& g);
  double focus(std::size_t view) const;
  Phase phase(std::uint64_t at) const;
  double mean_lr() const;
};

TrainState init_state(const Dataset& data, const TrainConfig& cfg);

struct StepReport {
  double loss = 0;
  Phase phase = Phase::base_only;
  bool rejected = false;
};

/// One optimization step on training view `view` against its defocused target.
StepReport train_step(TrainState& state, std::size_t view, const Image& gt);

/// Training objective of `view` composed as in `phase`.
double view_loss(const TrainState& state, std::size_t view, const Image& gt, Phase phase);
/// Zeroes the gradients, then writes d view_loss / d parameter into the store without stepping.
double view_loss_gradients(TrainState& state, std::size_t view, const Image& gt, Phase phase);

/// Training view visited at iteration `iter`: a per-epoch permutation seeded by (seed, epoch).
std::size_t view_for_iter(std::uint64_t seed, std::size_t views, std::uint64_t iter);

struct EvalRow {
  std::size_t view = 0;
  double psnr = 0;
  double ssim = 0;
};

/// Sharp renders scored against `gt`. With `quantize` the render is rounded to 8 bits first, as if
/// written to and read back from a PNG.
std::vector<EvalRow> evaluate(const GaussianSet& set, const std::vector<CameraView>& views,
                              const std::vector<Image>& gt, bool quantize = false);
std::vector<EvalRow> evaluate(const TrainState& state, const std::vector<CameraView>& views,
                              const std::vector<Image>& gt, bool quantize = false);

struct MetricsRow {
  std::uint64_t iter = 0;
  double loss = 0;
  std::optional<double> psnr, ssim;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_step;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricsRow> history;
};

TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {});
/// Continues `state` up to state.cfg.total_iters.
std::vector<MetricsRow> train_continue(TrainState& state, const Dataset& data, const TrainHooks& hooks = {});

/// Mean training objective over every training view, using the composition of the current phase.
double training_objective(const TrainState& state, const Dataset& data);

Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt);

struct ModelRender {
  Image image;
  double mean_coc = 0;
};

/// Sharp mode renders the base set; defocus mode composites CoC sets with the CNN weights,
/// K scaled by `kscale` and the focus distance taken from `focus`, else view.focus_plane.
ModelRender render_model(const TrainState& state, const CameraView& view, bool defocus, double kscale = 1.0,
                         std::optional<double> focus = std::nullopt);

/// Mean activated K (multiplier 1) over all Gaussians, averaged over the training views.
double learned_k_mean(const TrainState& state);

}  // namespace cocosplat
