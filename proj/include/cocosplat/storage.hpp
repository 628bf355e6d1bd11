#pragma once

#include "cocosplat/types.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace cocosplat {

/// Any malformed, truncated or unreadable artifact. Messages carry the file path and, for JSON,
/// the offending element path.
class StorageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSceneVersion = 1;

struct SceneFile {
  GaussianSet gaussians;
  std::vector<CameraView> views;
};

/// Train and held-out camera lists of a dataset.
struct ViewsFile {
  std::vector<CameraView> train;
  std::vector<CameraView> eval;
};

nlohmann::json view_to_json(const CameraView& v);
/// `where` prefixes error messages, e.g. "views[3]".
CameraView view_from_json(const nlohmann::json& j, const std::string& where);

nlohmann::json gaussians_to_json(const GaussianSet& s);
GaussianSet gaussians_from_json(const nlohmann::json& j, const std::string& where);

SceneFile parse_scene(const std::string& text, const std::string& origin = "scene");
std::string format_scene(const SceneFile& scene);
SceneFile read_scene(const std::filesystem::path& path);
void write_scene(const std::filesystem::path& path, const SceneFile& scene);

ViewsFile read_views(const std::filesystem::path& path);
void write_views(const std::filesystem::path& path, const ViewsFile& views);

RowMatX3 read_points(const std::filesystem::path& path);
void write_points(const std::filesystem::path& path, const RowMatX3& points);

nlohmann::json read_json(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// round(255 clamp(v, 0, 1)), halves rounded up.
std::uint8_t to_byte(double v);

/// 8-bit RGB PNG or binary PPM (P6), chosen by extension.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);
std::string encode_png(const Image& img);
Image decode_png(const std::string& bytes, const std::string& origin = "png");
std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes, const std::string& origin = "ppm");

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<double> data;
};

/// Little-endian: "CCGS", u32 version, u64 iter, u32 + bytes of a JSON block, u32 tensor count,
/// then per tensor u32 + name bytes, u8 dtype, u64 count, count values.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t iter = 0;
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor& at(const std::string& name) const;
  const NamedTensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cocosplat
