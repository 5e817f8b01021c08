#pragma once

// KITTI-style label, calibration and ground-plane files, and the conversion
// between camera-frame labels and ego boxes.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "heightformer/box.hpp"
#include "heightformer/errors.hpp"
#include "heightformer/geometry.hpp"
#include "heightformer/metrics.hpp"

namespace hf {

/// One object line: type, truncation, occlusion code, alpha, 2D box,
/// dimensions (h, w, l), bottom-center location in the camera frame,
/// rotation_y.
struct LabelRecord {
  std::string category;
  double truncation = 0.0;
  int occlusion = 0;
  double alpha = 0.0;
  std::array<double, 4> bbox2d{};
  double h = 1.0, w = 1.0, l = 1.0;
  double x = 0.0, y = 0.0, z = 1.0;
  double rotation_y = 0.0;

  bool operator==(const LabelRecord&) const = default;
};

inline DifficultyLevel difficulty_bin(const LabelRecord& r) { return difficulty_bin(r.occlusion); }

namespace io {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
T parse_number(std::string_view tok, std::size_t line, const char* field) {
  T v{};
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(std::string("bad ") + field + " '" + std::string(tok) + "'", line);
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) throw ParseError(std::string("non-finite ") + field, line);
  }
  return v;
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// Lines with their 1-based numbers, skipping blank ones.
inline std::vector<std::pair<std::size_t, std::string_view>> content_lines(std::string_view text) {
  std::vector<std::pair<std::size_t, std::string_view>> out;
  std::size_t n = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++n;
    if (!split_ws(line).empty()) out.emplace_back(n, line);
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace io

inline constexpr std::size_t kLabelFields = 15;

inline LabelRecord parse_label_line(std::string_view line, std::size_t line_no) {
  const auto tok = io::split_ws(line);
  if (tok.size() != kLabelFields) {
    throw ParseError("expected " + std::to_string(kLabelFields) + " fields, found " + std::to_string(tok.size()),
                     line_no);
  }
  using io::parse_number;
  LabelRecord r;
  r.category = std::string(tok[0]);
  r.truncation = parse_number<double>(tok[1], line_no, "truncation");
  r.occlusion = parse_number<int>(tok[2], line_no, "occlusion");
  r.alpha = parse_number<double>(tok[3], line_no, "alpha");
  for (std::size_t i = 0; i < 4; ++i) r.bbox2d[i] = parse_number<double>(tok[4 + i], line_no, "bbox");
  r.h = parse_number<double>(tok[8], line_no, "height");
  r.w = parse_number<double>(tok[9], line_no, "width");
  r.l = parse_number<double>(tok[10], line_no, "length");
  r.x = parse_number<double>(tok[11], line_no, "x");
  r.y = parse_number<double>(tok[12], line_no, "y");
  r.z = parse_number<double>(tok[13], line_no, "z");
  r.rotation_y = parse_number<double>(tok[14], line_no, "rotation_y");
  if (!(r.h > 0.0 && r.w > 0.0 && r.l > 0.0)) throw ParseError("dimensions must be positive", line_no);
  return r;
}

inline std::vector<LabelRecord> parse_labels(std::string_view text) {
  std::vector<LabelRecord> out;
  for (const auto& [n, line] : io::content_lines(text)) out.push_back(parse_label_line(line, n));
  return out;
}

inline std::string serialize_labels(const std::vector<LabelRecord>& labels) {
  using io::format_number;
  std::string s;
  for (const auto& r : labels) {
    s += r.category + ' ' + format_number(r.truncation) + ' ' + std::to_string(r.occlusion) + ' ' +
         format_number(r.alpha);
    for (double b : r.bbox2d) s += ' ' + format_number(b);
    for (double v : {r.h, r.w, r.l, r.x, r.y, r.z, r.rotation_y}) s += ' ' + format_number(v);
    s += '\n';
  }
  return s;
}

/// Reads fx, fy, cx, cy from the 3x4 "P2:" projection matrix.
inline CameraIntrinsics parse_calib(std::string_view text) {
  const auto lines = io::content_lines(text);
  for (const auto& [n, line] : lines) {
    const auto tok = io::split_ws(line);
    if (tok[0] != "P2:") continue;
    if (tok.size() != 13) throw ParseError("P2 needs 12 values, found " + std::to_string(tok.size() - 1), n);
    std::array<double, 12> p{};
    for (std::size_t i = 0; i < 12; ++i) p[i] = io::parse_number<double>(tok[i + 1], n, "P2 entry");
    CameraIntrinsics k{p[0], p[5], p[2], p[6]};
    if (!(k.fx > 0.0 && k.fy > 0.0)) throw ParseError("P2 focal lengths must be positive", n);
    return k;
  }
  throw ParseError("no P2: line", lines.empty() ? 1 : lines.back().first);
}

inline std::string serialize_calib(const CameraIntrinsics& k) {
  using io::format_number;
  return "P2: " + format_number(k.fx) + " 0 " + format_number(k.cx) + " 0 0 " + format_number(k.fy) + ' ' +
         format_number(k.cy) + " 0 0 0 1 0\n";
}

/// Single line "a b c d".
inline GroundPlane parse_ground_plane(std::string_view text) {
  const auto lines = io::content_lines(text);
  if (lines.empty()) throw ParseError("empty ground plane file", 1);
  const auto& [n, line] = lines.front();
  const auto tok = io::split_ws(line);
  if (tok.size() != 4) throw ParseError("ground plane needs 4 values, found " + std::to_string(tok.size()), n);
  GroundPlane g{io::parse_number<double>(tok[0], n, "a"), io::parse_number<double>(tok[1], n, "b"),
                io::parse_number<double>(tok[2], n, "c"), io::parse_number<double>(tok[3], n, "d")};
  try {
    g.validate();
  } catch (const Error& e) {
    throw ParseError(e.what(), n);
  }
  return g;
}

inline std::string serialize_ground_plane(const GroundPlane& g) {
  using io::format_number;
  return format_number(g.a) + ' ' + format_number(g.b) + ' ' + format_number(g.c) + ' ' + format_number(g.d) + '\n';
}

// ------------------------------------------------------------- conversion

/// Ego yaw -> rotation_y: the heading's camera-frame direction d gives
/// rotation_y = atan2(-d.z, d.x). With a level camera this is -yaw - pi/2.
inline double yaw_to_rotation_y(double yaw, const VirtualCameraFrame& f) {
  const Vec3 d_ego(std::cos(yaw), std::sin(yaw), 0.0);
  const Vec3 d = f.cam_to_virtual.inverse().apply_direction(f.virtual_to_ego.inverse().apply_direction(d_ego));
  return normalize_angle(std::atan2(-d.z(), d.x()));
}

/// Inverse of yaw_to_rotation_y: the ground heading whose camera direction
/// has xz angle rotation_y.
inline double rotation_y_to_yaw(double rotation_y, const VirtualCameraFrame& f) {
  const Mat3 m = f.cam_to_virtual.inverse().rotation * f.virtual_to_ego.inverse().rotation;
  const double cr = std::cos(rotation_y), sr = std::sin(rotation_y);
  const double a = -m(2, 0) * cr - m(0, 0) * sr;
  const double b = -m(2, 1) * cr - m(0, 1) * sr;
  double c = b, s = -a;
  const double dx = m(0, 0) * c + m(0, 1) * s, dz = m(2, 0) * c + m(2, 1) * s;
  if (dx * cr - dz * sr < 0.0) {
    c = -c;
    s = -s;
  }
  return normalize_angle(std::atan2(s, c));
}

struct EgoLabel {
  LabeledBox labeled;
  int occlusion = 0;
};

struct GtConversion {
  std::vector<EgoLabel> boxes;
  std::size_t behind_camera = 0;
  std::size_t unknown_category = 0;
};

/// Labels to ego boxes: the bottom center is lifted to ego and raised by
/// half the box height. Labels at or behind the camera plane, and unknown
/// categories, are skipped and counted.
inline GtConversion gt_to_ego_boxes(const std::vector<LabelRecord>& labels, const VirtualCameraFrame& f) {
  GtConversion out;
  for (const auto& r : labels) {
    const auto cat = category_from_name(r.category);
    if (!cat) {
      ++out.unknown_category;
      continue;
    }
    if (!(r.z > 0.0)) {
      ++out.behind_camera;
      continue;
    }
    const Vec3 bottom = camera_to_ego(Vec3(r.x, r.y, r.z), f);
    Box3D b{bottom.x(), bottom.y(), bottom.z() + 0.5 * r.h, r.l, r.w, r.h, rotation_y_to_yaw(r.rotation_y, f)};
    out.boxes.push_back({{b, *cat}, r.occlusion});
  }
  return out;
}

/// Camera-frame label for an ego box. 2D fields are passed through.
inline LabelRecord ego_box_to_label(const LabeledBox& lb, const VirtualCameraFrame& f, int occlusion = 0,
                                    double truncation = 0.0, double alpha = 0.0,
                                    const std::array<double, 4>& bbox2d = {}) {
  const Box3D& b = lb.box;
  const Vec3 cam = ego_to_camera(Vec3(b.cx, b.cy, b.bottom()), f);
  LabelRecord r;
  r.category = std::string(category_name(lb.category));
  r.truncation = truncation;
  r.occlusion = occlusion;
  r.alpha = alpha;
  r.bbox2d = bbox2d;
  r.h = b.height;
  r.w = b.width;
  r.l = b.length;
  r.x = cam.x();
  r.y = cam.y();
  r.z = cam.z();
  r.rotation_y = yaw_to_rotation_y(b.yaw, f);
  return r;
}

// ------------------------------------------------------------ scene folders

inline constexpr const char* kLabelFile = "label.txt";
inline constexpr const char* kCalibFile = "calib.txt";
inline constexpr const char* kGroundFile = "denorm.txt";
inline constexpr const char* kImageFile = "image.ppm";

struct SceneAnnotation {
  std::string name;
  CameraIntrinsics intrinsics;
  GroundPlane ground;
  std::vector<LabelRecord> labels;
  std::size_t image_width = 0, image_height = 0;

  VirtualCameraFrame frame() const { return make_camera_frame(ground, intrinsics); }
};

/// Sorted scene folder names under `dir` (folders holding a label file).
inline std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / kLabelFile)) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Parse errors are rethrown with the offending file name prefixed.
template <typename Fn>
auto parse_file(const std::filesystem::path& path, Fn parse) {
  const std::string text = io::read_file(path);
  try {
    return parse(text);
  } catch (const ParseError& e) {
    ParseError wrapped(path.filename().string() + ": " + e.what(), 0);
    wrapped.line = e.line;
    throw wrapped;
  }
}

inline SceneAnnotation load_annotation(const std::filesystem::path& dir) {
  SceneAnnotation a;
  a.name = dir.filename().string();
  a.labels = parse_file(dir / kLabelFile, parse_labels);
  a.intrinsics = parse_file(dir / kCalibFile, parse_calib);
  a.ground = parse_file(dir / kGroundFile, parse_ground_plane);
  return a;
}

inline void save_annotation(const SceneAnnotation& a, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / kLabelFile, serialize_labels(a.labels));
  io::write_file(dir / kCalibFile, serialize_calib(a.intrinsics));
  io::write_file(dir / kGroundFile, serialize_ground_plane(a.ground));
}

}  // namespace hf
