#include "cocosplat/storage.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cocosplat {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

[[noreturn]] void fail(const std::string& where, const std::string& what) { throw StorageError(where + ": " + what); }

const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object()) fail(where, "expected an object");
  const auto it = j.find(key);
  if (it == j.end()) fail(where + "." + key, "missing");
  return *it;
}

double number(const json& j, const std::string& where) {
  if (!j.is_number()) fail(where, "expected a number");
  return j.get<double>();
}

int integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) fail(where, "expected an integer");
  return j.get<int>();
}

template <int N>
Eigen::Matrix<double, N, 1> fixed_array(const json& j, const std::string& where) {
  if (!j.is_array() || static_cast<int>(j.size()) != N) fail(where, "expected an array of " + std::to_string(N));
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v[i] = number(j[static_cast<std::size_t>(i)], where + "[" + std::to_string(i) + "]");
  return v;
}

template <typename Row>
json row_json(const Row& r) {
  json a = json::array();
  for (Eigen::Index i = 0; i < r.size(); ++i) a.push_back(r[i]);
  return a;
}

void check_version(const json& j, const std::string& where) {
  const int v = integer(field(j, "version", where), where + ".version");
  if (v != kSceneVersion) fail(where + ".version", "unsupported version " + std::to_string(v));
}

json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(origin, std::string("invalid JSON: ") + e.what());
  }
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) fail(origin_, std::string("truncated while reading ") + what);
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

json view_to_json(const CameraView& v) {
  json w2c = json::array();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) w2c.push_back(v.world_to_camera(r, c));
  }
  return {{"w2c", w2c}, {"fx", v.fx}, {"fy", v.fy}, {"cx", v.cx}, {"cy", v.cy},
          {"w", v.width}, {"h", v.height}, {"d_f", v.focus_plane}};
}

CameraView view_from_json(const json& j, const std::string& where) {
  CameraView v;
  const Eigen::Matrix<double, 16, 1> m = fixed_array<16>(field(j, "w2c", where), where + ".w2c");
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) v.world_to_camera(r, c) = m[r * 4 + c];
  }
  v.fx = number(field(j, "fx", where), where + ".fx");
  v.fy = number(field(j, "fy", where), where + ".fy");
  v.cx = number(field(j, "cx", where), where + ".cx");
  v.cy = number(field(j, "cy", where), where + ".cy");
  v.width = integer(field(j, "w", where), where + ".w");
  v.height = integer(field(j, "h", where), where + ".h");
  v.focus_plane = number(field(j, "d_f", where), where + ".d_f");
  try {
    v.validate();
  } catch (const std::invalid_argument& e) {
    fail(where, e.what());
  }
  if (v.focus_plane < 0) fail(where + ".d_f", "must be >= 0");
  return v;
}

json gaussians_to_json(const GaussianSet& s) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    arr.push_back({{"mu", row_json(s.mean.row(i))},
                   {"log_scale", row_json(s.log_scale.row(i))},
                   {"rot", row_json(s.rot.row(i))},
                   {"opacity_logit", s.opacity_logit[i]},
                   {"sh", row_json(s.sh.row(i))}});
  }
  return arr;
}

GaussianSet gaussians_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) fail(where, "expected an array");
  GaussianSet s(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string at = where + "[" + std::to_string(i) + "]";
    const json& g = j[i];
    const auto n = static_cast<Eigen::Index>(i);
    s.mean.row(n) = fixed_array<3>(field(g, "mu", at), at + ".mu").transpose();
    s.log_scale.row(n) = fixed_array<3>(field(g, "log_scale", at), at + ".log_scale").transpose();
    s.rot.row(n) = fixed_array<4>(field(g, "rot", at), at + ".rot").transpose();
    s.opacity_logit[n] = number(field(g, "opacity_logit", at), at + ".opacity_logit");
    s.sh.row(n) = fixed_array<12>(field(g, "sh", at), at + ".sh").transpose();
    if (s.rot.row(n).norm() == 0) fail(at + ".rot", "zero quaternion");
  }
  return s;
}

SceneFile parse_scene(const std::string& text, const std::string& origin) {
  const json j = parse_json_text(text, origin);
  check_version(j, origin);
  SceneFile scene;
  scene.gaussians = gaussians_from_json(field(j, "gaussians", origin), "gaussians");
  const json& views = field(j, "views", origin);
  if (!views.is_array()) fail("views", "expected an array");
  for (std::size_t i = 0; i < views.size(); ++i) {
    scene.views.push_back(view_from_json(views[i], "views[" + std::to_string(i) + "]"));
  }
  return scene;
}

std::string format_scene(const SceneFile& scene) {
  json views = json::array();
  for (const CameraView& v : scene.views) views.push_back(view_to_json(v));
  const json j = {{"version", kSceneVersion}, {"gaussians", gaussians_to_json(scene.gaussians)}, {"views", views}};
  return j.dump(1) + "\n";
}

SceneFile read_scene(const fs::path& path) {
  try {
    return parse_scene(read_file(path));
  } catch (const StorageError& e) {
    throw StorageError(path.string() + ": " + e.what());
  }
}

void write_scene(const fs::path& path, const SceneFile& scene) { write_file_atomic(path, format_scene(scene)); }

ViewsFile read_views(const fs::path& path) {
  const json j = read_json(path);
  const std::string origin = path.string();
  check_version(j, origin);
  ViewsFile out;
  for (const char* role : {"train", "eval"}) {
    const json& arr = field(j, role, origin);
    if (!arr.is_array()) fail(origin + ": " + role, "expected an array");
    auto& dst = std::string(role) == "train" ? out.train : out.eval;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      dst.push_back(view_from_json(arr[i], origin + ": " + role + "[" + std::to_string(i) + "]"));
    }
  }
  return out;
}

void write_views(const fs::path& path, const ViewsFile& views) {
  json train = json::array(), eval = json::array();
  for (const CameraView& v : views.train) train.push_back(view_to_json(v));
  for (const CameraView& v : views.eval) eval.push_back(view_to_json(v));
  write_file_atomic(path, json{{"version", kSceneVersion}, {"train", train}, {"eval", eval}}.dump(1) + "\n");
}

RowMatX3 read_points(const fs::path& path) {
  const json j = read_json(path);
  const std::string origin = path.string();
  check_version(j, origin);
  const json& pts = field(j, "points", origin);
  if (!pts.is_array()) fail(origin + ": points", "expected an array");
  RowMatX3 p(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    p.row(static_cast<Eigen::Index>(i)) =
        fixed_array<3>(pts[i], origin + ": points[" + std::to_string(i) + "]").transpose();
  }
  return p;
}

void write_points(const fs::path& path, const RowMatX3& points) {
  json pts = json::array();
  for (Eigen::Index i = 0; i < points.rows(); ++i) pts.push_back(row_json(points.row(i)));
  write_file_atomic(path, json{{"version", kSceneVersion}, {"points", pts}}.dump() + "\n");
}

json read_json(const fs::path& path) { return parse_json_text(read_file(path), path.string()); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path.string(), "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(path.string(), "read error");
  return std::move(ss).str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(tmp.string(), "cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(tmp.string(), "write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(path.string(), "rename failed");
  }
}

std::uint8_t to_byte(double v) {
  if (!(v > 0)) return 0;  // also maps NaN to 0
  if (v >= 1) return 255;
  return static_cast<std::uint8_t>(std::floor(255.0 * v + 0.5));
}

namespace {

std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(img.rgb.size()));
  for (Eigen::Index i = 0; i < img.pixels(); ++i) {
    for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>(i * 3 + c)] = to_byte(img.rgb(i, c));
  }
  return px;
}

Image from_bytes(const std::uint8_t* px, int w, int h) {
  Image img(w, h);
  for (Eigen::Index i = 0; i < img.pixels(); ++i) {
    for (int c = 0; c < 3; ++c) img.rgb(i, c) = px[i * 3 + c] / 255.0;
  }
  return img;
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  for (char& c : e) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

}  // namespace

std::string encode_png(const Image& img) {
  if (img.pixels() == 0) throw StorageError("png: empty image");
  const std::vector<std::uint8_t> px = to_bytes(img);
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw StorageError(std::string("png: ") + pi.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw StorageError(std::string("png: ") + pi.message);
  }
  out.resize(size);
  return out;
}

Image decode_png(const std::string& bytes, const std::string& origin) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) fail(origin, pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    fail(origin, msg);
  }
  return from_bytes(px.data(), static_cast<int>(pi.width), static_cast<int>(pi.height));
}

std::string encode_ppm(const Image& img) {
  const std::vector<std::uint8_t> px = to_bytes(img);
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  return out;
}

Image decode_ppm(const std::string& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(origin, "truncated header");
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") fail(origin, "not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    fail(origin, "malformed header");
  }
  if (w <= 0 || h <= 0) fail(origin, "bad dimensions");
  if (maxval != 255) fail(origin, "only 8-bit PPM is supported");
  ++pos;  // single whitespace before the raster
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (pos > bytes.size() || bytes.size() - pos < need) fail(origin, "truncated raster");
  return from_bytes(reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), w, h);
}

Image read_image(const fs::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return decode_png(read_file(path), path.string());
  if (ext == ".ppm") return decode_ppm(read_file(path), path.string());
  fail(path.string(), "unsupported image format '" + ext + "'");
}

void write_image(const fs::path& path, const Image& img) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return write_file_atomic(path, encode_png(img));
  if (ext == ".ppm") return write_file_atomic(path, encode_ppm(img));
  fail(path.string(), "unsupported image format '" + ext + "'");
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const NamedTensor& Checkpoint::at(const std::string& name) const {
  const NamedTensor* t = find(name);
  if (!t) throw StorageError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "CCGS";
  put_u32(out, Checkpoint::kVersion);
  put_u64(out, ckpt.iter);
  const std::string meta = ckpt.meta.dump();
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const NamedTensor& t : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.dtype));
    put_u64(out, t.data.size());
    for (double v : t.data) {
      if (t.dtype == DType::f32) {
        const float f = static_cast<float>(v);
        out.append(reinterpret_cast<const char*>(&f), 4);
      } else {
        out.append(reinterpret_cast<const char*>(&v), 8);
      }
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.str(4, "magic") != "CCGS") fail(origin, "bad magic (not a checkpoint)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion) fail(origin, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.iter = r.get<std::uint64_t>("iteration");
  const std::string meta = r.str(r.get<std::uint32_t>("config length"), "config");
  c.meta = parse_json_text(meta, origin + ": config");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get<std::uint32_t>("name length"), "tensor name");
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt > 1) fail(origin, "tensor '" + t.name + "' has unknown dtype");
    t.dtype = static_cast<DType>(dt);
    const auto n = r.get<std::uint64_t>("element count");
    if (n > bytes.size()) fail(origin, "truncated while reading tensor '" + t.name + "'");
    t.data.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      t.data[k] = t.dtype == DType::f32 ? static_cast<double>(r.get<float>("tensor data")) : r.get<double>("tensor data");
    }
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) fail(origin, "trailing bytes after the last tensor");
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path), path.string()); }

}  // namespace cocosplat
