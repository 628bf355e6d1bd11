#pragma once

#include "cocosplat/trainer.hpp"

#include <map>
#include <memory>
#include <string>

namespace httplib {
class Server;
}

namespace cocosplat {

struct HttpReply {
  int status = 200;
  std::string content_type = "text/plain";
  std::string body;
  std::map<std::string, std::string> headers;
};

/// Renders at most this width unless the request asks for more.
inline constexpr int kServiceDefaultWidth = 256;

/// GET /scene/meta. A null state answers 503.
HttpReply handle_meta(const TrainState* state);

/// POST /render with {view, mode, kscale?, dfocus?, width?}. kscale defaults to 1 and dfocus to the
/// view's learned focus distance; both are ignored in sharp mode.
HttpReply handle_render(const TrainState* state, const std::string& body);

/// Wraps an httplib server around an immutable trained state.
class RefocusService {
 public:
  explicit RefocusService(std::shared_ptr<const TrainState> state);
  ~RefocusService();
  RefocusService(const RefocusService&) = delete;
  RefocusService& operator=(const RefocusService&) = delete;

  /// Binds to `port` (0 picks a free one) and returns the bound port; throws when binding fails.
  int bind(const std::string& host, int port);
  /// Blocks serving requests until stop().
  void run();
  void stop();

 private:
  std::shared_ptr<const TrainState> state_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace cocosplat
