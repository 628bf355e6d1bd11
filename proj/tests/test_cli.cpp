#include "doctest.h"
#include "test_util.hpp"
#include "toy_data.hpp"

#include "cocosplat/storage.hpp"
#include "cocosplat/trainer.hpp"

#include "httplib.h"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

using namespace cocosplat;
using namespace testutil;
namespace fs = std::filesystem;

extern char** environ;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(COCOSPLAT_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("cocosplat_cli_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// small dataset + short checkpoint shared by several cases
const fs::path& dataset() {
  static const fs::path d = [] {
    const fs::path out = workdir() / "data";
    const Run r = run("gen --preset planes3 --n 60 --views 3 --eval-views 2 --width 16 --samples 8 --seed 5 --out " +
                      q(out));
    REQUIRE(r.code == 0);
    return out;
  }();
  return d;
}

const fs::path& checkpoint() {
  static const fs::path ck = [] {
    const fs::path out = workdir() / "model.ckpt";
    const Run r = run("train --deterministic --data " + q(dataset()) + " --iters 8 --m 2 --no-beta --out " + q(out));
    INFO(r.out);
    REQUIRE(r.code == 0);
    return out;
  }();
  return ck;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("").code == 2);
  CHECK(run("bogus").code == 2);
  CHECK(run("gen --preset planes3").code == 2);
  CHECK(run("gen --n 0 --out " + q(workdir() / "x")).code == 2);
  CHECK(run("gen --preset cubes --out " + q(workdir() / "x")).code == 2);
  CHECK(run("gen --f -1 --out " + q(workdir() / "x")).code == 2);
  CHECK(run("train --data " + q(dataset())).code == 2);
  CHECK(run("render --ckpt a --out b.png --mode blurry").code == 2);
  CHECK(run("render --ckpt a --out b.png --kscale -1").code == 2);
  CHECK(run("eval --data " + q(dataset())).code == 2);
  CHECK(run("serve --port 70000").code == 2);
  const Run help = run("--help");
  CHECK(help.code == 0);
  CHECK(help.out.find("train") != std::string::npos);
}

TEST_CASE("gen writes the dataset layout and repeats exactly") {
  const fs::path d = dataset();
  for (const char* f : {"scene.json", "views.json", "points.json", "manifest.json", "train/defocus_000.png",
                        "train/defocus_002.png", "eval/sharp_000.png", "eval/sharp_001.png"}) {
    CHECK(fs::exists(d / f));
  }
  const fs::path again = workdir() / "data_again";
  REQUIRE(run("gen --preset planes3 --n 60 --views 3 --eval-views 2 --width 16 --samples 8 --seed 5 --out " +
              q(again)).code == 0);
  for (const auto& entry : fs::recursive_directory_iterator(d)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), d);
    CHECK(read_file(entry.path()) == read_file(again / rel));
  }
  const fs::path other = workdir() / "data_other";
  REQUIRE(run("gen --preset planes3 --n 60 --views 3 --eval-views 2 --width 16 --samples 8 --seed 6 --out " +
              q(other)).code == 0);
  CHECK(read_file(d / "scene.json") != read_file(other / "scene.json"));
}

TEST_CASE("train writes a checkpoint and a metrics CSV") {
  const fs::path ck = checkpoint();
  REQUIRE(fs::exists(ck));
  const fs::path csv = workdir() / "model.metrics.csv";
  REQUIRE(fs::exists(csv));
  const auto rows = read_csv(csv);
  REQUIRE(rows.size() == 9);
  CHECK(rows[0] == std::vector<std::string>{"iter", "loss", "psnr", "ssim"});
  CHECK(rows.back().size() == 4);  // final row carries the held-out scores

  const Checkpoint c = load_checkpoint(ck);
  CHECK(c.iter == 8);
  CHECK(c.meta["config"]["use_beta"] == false);
  CHECK(c.meta["config"]["use_coc"] == true);
  CHECK(c.meta["config"]["m"] == 2);
  CHECK(c.at("mlp.head_beta.b").data.size() == 2);
  CHECK(c.at("mlp.head_delta.b").data.size() == 14);
  CHECK(c.at("cnn.out.b").data.size() == 3);

  const fs::path ablate = workdir() / "ablate.ckpt";
  REQUIRE(run("train --data " + q(dataset()) + " --iters 0 --no-coc --no-direction --no-aperture --out " + q(ablate))
              .code == 0);
  const Checkpoint a = load_checkpoint(ablate);
  CHECK(a.meta["config"]["use_coc"] == false);
  CHECK(a.meta["config"]["learn_direction"] == false);
  CHECK(a.meta["config"]["use_aperture"] == false);
  CHECK(a.meta["config"]["use_beta"] == true);
  CHECK(a.meta["config"]["m"] == 5);

  CHECK(run("train --data " + q(workdir() / "missing") + " --out " + q(workdir() / "m.ckpt")).code == 3);
}

TEST_CASE("deterministic training repeats bit for bit") {
  const fs::path a = workdir() / "det_a.ckpt", b = workdir() / "det_b.ckpt";
  REQUIRE(run("train --deterministic --seed 3 --data " + q(dataset()) + " --iters 5 --m 2 --out " + q(a)).code == 0);
  REQUIRE(run("train --deterministic --seed 3 --data " + q(dataset()) + " --iters 5 --m 2 --out " + q(b)).code == 0);
  CHECK(read_file(a) == read_file(b));
  CHECK(read_file(workdir() / "det_a.metrics.csv") == read_file(workdir() / "det_b.metrics.csv"));
}

TEST_CASE("render modes") {
  const fs::path ck = checkpoint();
  const TrainState s = from_checkpoint(load_checkpoint(ck));
  const fs::path sharp = workdir() / "sharp.png", zero = workdir() / "zero.png", blur = workdir() / "blur.png";
  REQUIRE(run("render --ckpt " + q(ck) + " --view-index 1 --mode sharp --kscale 3 --out " + q(sharp)).code == 0);
  CHECK(read_file(sharp) == encode_png(render(s.gaussians(), s.views[1])));

  REQUIRE(run("render --ckpt " + q(ck) + " --view-index 1 --mode defocus --kscale 0 --out " + q(zero)).code == 0);
  const Image a = read_image(sharp), b = read_image(zero);
  CHECK((a.rgb - b.rgb).abs().maxCoeff() < 1e-6);

  const fs::path pts = workdir() / "points.csv";
  REQUIRE(run("render --ckpt " + q(ck) + " --view-index 0 --mode defocus --kscale 2 --dfocus 9 --out " + q(blur) +
              " --dump-points " + q(pts)).code == 0);
  const auto rows = read_csv(pts);
  CHECK(rows.size() == 1 + 3 * static_cast<std::size_t>(s.gaussian_count()));
  CHECK(rows[0] == std::vector<std::string>{"set", "x", "y", "z"});
  CHECK(read_file(blur) == encode_png(render_model(s, s.views[0], true, 2.0, 9.0).image));

  const fs::path pose = workdir() / "pose.json";
  write_file_atomic(pose, view_to_json(s.views[2]).dump());
  const fs::path posed = workdir() / "posed.png";
  REQUIRE(run("render --ckpt " + q(ck) + " --pose " + q(pose) + " --out " + q(posed)).code == 0);
  CHECK(read_file(posed) == encode_png(render(s.gaussians(), s.views[2])));

  const fs::path wide = workdir() / "wide.ppm";
  REQUIRE(run("render --ckpt " + q(ck) + " --view-index 0 --width 40 --out " + q(wide)).code == 0);
  CHECK(read_image(wide).width == 40);

  CHECK(run("render --ckpt " + q(ck) + " --view-index 3 --out " + q(workdir() / "bad.png")).code == 2);
  CHECK(run("render --ckpt " + q(workdir() / "nope.ckpt") + " --out " + q(workdir() / "bad.png")).code == 3);
}

TEST_CASE("dfocus sweep moves the sharp band") {
  SceneSpec spec;
  spec.train_views = 2;
  const ToyScene scene = gen_scene(spec);
  TrainState s = gt_state(scene);
  plain_networks(s, 0.2);
  const fs::path ck = workdir() / "gt.ckpt";
  save_checkpoint(ck, to_checkpoint(s));
  const std::vector<double> centres{0.4 * spec.focus, spec.focus, 2.3 * spec.focus};
  const Eigen::ArrayXd depth = depth_map(s.gaussians(), s.views[1]);
  const Image sharp = render(s.gaussians(), s.views[1]);
  for (std::size_t b = 0; b < centres.size(); ++b) {
    const fs::path out = workdir() / ("sweep_" + std::to_string(b) + ".png");
    std::ostringstream df;
    df.precision(17);
    df << centres[b];
    REQUIRE(run("render --ckpt " + q(ck) + " --view-index 1 --mode defocus --dfocus " + df.str() + " --out " + q(out))
                .code == 0);
    const auto score = band_sharpness(read_image(out), sharp, depth, centres);
    CAPTURE(score[0]);
    CAPTURE(score[1]);
    CAPTURE(score[2]);
    CHECK(argmax(score) == b);
  }
}

TEST_CASE("eval tables") {
  const fs::path gt_csv = workdir() / "gt_eval.csv";
  REQUIRE(run("eval --scene " + q(dataset() / "scene.json") + " --data " + q(dataset()) + " --out " + q(gt_csv))
              .code == 0);
  const auto gt = read_csv(gt_csv);
  REQUIRE(gt.size() == 4);
  for (std::size_t i = 1; i < gt.size(); ++i) CHECK(std::stod(gt[i][1]) == 100.0);

  const fs::path csv = workdir() / "ck_eval.csv";
  REQUIRE(run("eval --ckpt " + q(checkpoint()) + " --data " + q(dataset()) + " --out " + q(csv)).code == 0);
  const auto rows = read_csv(csv);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == std::vector<std::string>{"view", "psnr", "ssim"});
  CHECK(rows[3][0] == "mean");
  for (int col : {1, 2}) {
    const double mean = (std::stod(rows[1][col]) + std::stod(rows[2][col])) / 2;
    CHECK(std::stod(rows[3][col]) == doctest::Approx(mean).epsilon(1e-15));
  }
  const Run both = run("eval --ckpt " + q(checkpoint()) + " --scene " + q(dataset() / "scene.json") + " --data " +
                       q(dataset()));
  CHECK(both.code == 2);
}

TEST_CASE("serve answers health checks and reports a busy port") {
  int pipefd[2];
  REQUIRE(pipe(pipefd) == 0);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, pipefd[1], STDOUT_FILENO);
  posix_spawn_file_actions_addclose(&fa, pipefd[0]);
  const std::string ck = checkpoint().string();
  std::vector<std::string> args{COCOSPLAT_CLI, "serve", "--port", "0", "--ckpt", ck};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  REQUIRE(posix_spawn(&pid, COCOSPLAT_CLI, &fa, nullptr, argv.data(), environ) == 0);
  posix_spawn_file_actions_destroy(&fa);
  close(pipefd[1]);

  std::string line;
  char c;
  while (read(pipefd[0], &c, 1) == 1 && c != '\n') line += c;
  close(pipefd[0]);
  const auto colon = line.rfind(':');
  REQUIRE(colon != std::string::npos);
  const int port = std::stoi(line.substr(colon + 1));

  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(health->body == "ok");
  auto meta = cli.Get("/scene/meta");
  REQUIRE(meta);
  CHECK(meta->status == 200);

  const Run busy = run("serve --port " + std::to_string(port));
  CHECK(busy.code == 3);
  CHECK(busy.out.find("port") != std::string::npos);

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
}
