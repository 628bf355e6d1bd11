#include "cocosplat/service.hpp"

#include "cocosplat/storage.hpp"

#include "httplib.h"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cocosplat {

namespace {

using json = nlohmann::json;

HttpReply error_reply(int status, const std::string& msg) {
  HttpReply r;
  r.status = status;
  r.content_type = "application/json";
  r.body = json{{"error", msg}}.dump();
  return r;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

HttpReply handle_meta(const TrainState* s) {
  if (!s) return error_reply(503, "no checkpoint loaded");
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t v = 0; v < s->views.size(); ++v) {
    lo = std::min(lo, s->focus(v));
    hi = std::max(hi, s->focus(v));
  }
  json presets = json::array();
  for (std::size_t v = 0; v < s->views.size(); ++v) presets.push_back(v);
  const json meta = {{"views", s->views.size()},
                     {"width", s->views.front().width},
                     {"height", s->views.front().height},
                     {"d_f_range", {lo, hi}},
                     {"k_learned_mean", learned_k_mean(*s)},
                     {"presets", presets}};
  HttpReply r;
  r.content_type = "application/json";
  r.body = meta.dump();
  return r;
}

HttpReply handle_render(const TrainState* s, const std::string& body) {
  if (!s) return error_reply(503, "no checkpoint loaded");
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error_reply(400, "body is not valid JSON");
  }
  if (!req.is_object()) return error_reply(400, "body must be a JSON object");
  if (!req.contains("view") || !req["view"].is_number_integer()) return error_reply(400, "view must be an integer");
  if (!req.contains("mode") || !req["mode"].is_string()) return error_reply(400, "mode must be \"sharp\" or \"defocus\"");
  const std::string mode = req["mode"].get<std::string>();
  if (mode != "sharp" && mode != "defocus") return error_reply(400, "mode must be \"sharp\" or \"defocus\"");

  double kscale = 1.0;
  if (req.contains("kscale")) {
    if (!req["kscale"].is_number()) return error_reply(400, "kscale must be a number");
    kscale = req["kscale"].get<double>();
    if (!(kscale >= 0) || !std::isfinite(kscale)) return error_reply(400, "kscale must be >= 0");
  }
  std::optional<double> dfocus;
  if (req.contains("dfocus")) {
    if (!req["dfocus"].is_number()) return error_reply(400, "dfocus must be a number");
    dfocus = req["dfocus"].get<double>();
    if (!(*dfocus > 0) || !std::isfinite(*dfocus)) return error_reply(400, "dfocus must be > 0");
  }
  std::optional<int> width;
  if (req.contains("width")) {
    if (!req["width"].is_number_integer()) return error_reply(400, "width must be an integer");
    width = req["width"].get<int>();
    if (*width < 8 || *width > 4096) return error_reply(400, "width must be in [8, 4096]");
  }

  const auto view = req["view"].get<long long>();
  if (view < 0 || view >= static_cast<long long>(s->views.size())) {
    return error_reply(422, "view " + std::to_string(view) + " out of range [0, " +
                                std::to_string(s->views.size()) + ")");
  }
  const auto v = static_cast<std::size_t>(view);
  const CameraView& native = s->views[v];
  const CameraView cam = native.resized(width ? *width : std::min(kServiceDefaultWidth, native.width));

  try {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelRender out = render_model(*s, cam, mode == "defocus", kscale, dfocus ? *dfocus : s->focus(v));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    HttpReply r;
    r.content_type = "image/png";
    r.body = encode_png(out.image);
    r.headers["X-Render-Ms"] = format_double(ms);
    r.headers["X-Mean-Coc"] = format_double(out.mean_coc);
    return r;
  } catch (const std::exception& e) {
    return error_reply(500, std::string("render failed: ") + e.what());
  }
}

RefocusService::RefocusService(std::shared_ptr<const TrainState> state)
    : state_(std::move(state)), server_(std::make_unique<httplib::Server>()) {
  // no SO_REUSEPORT: a second server on a busy port must fail to bind
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    res.set_content(r.body, r.content_type);
  };
  server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
  server_->Get("/scene/meta", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, handle_meta(state_.get()));
  });
  server_->Post("/render", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_render(state_.get(), req.body));
  });
}

RefocusService::~RefocusService() { stop(); }

int RefocusService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = server_->bind_to_any_port(host);
    if (p <= 0) throw std::runtime_error("serve: cannot bind " + host);
    return p;
  }
  if (!server_->bind_to_port(host, port)) {
    throw std::runtime_error("serve: cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
  }
  return port;
}

void RefocusService::run() { server_->listen_after_bind(); }

void RefocusService::stop() {
  if (server_) server_->stop();
}

}  // namespace cocosplat
