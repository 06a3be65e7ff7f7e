// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Persistence: scene JSON, 8/16-bit PNG, raw float depth with a JSON
// sidecar, and the little-endian FeatureImage cache format.

#pragma once

#include "spine/common.hpp"
#include "spine/features.hpp"
#include "spine/geometry.hpp"
#include "spine/scene.hpp"

#include <json.hpp>
#include <png.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace spine {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

/// Parses JSON, converting parser failures into ParseError with a line
/// number computed from the byte offset.
inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < e.byte && i < text.size(); ++i)
      if (text[i] == '\n') ++line;
    throw ParseError(source + ":" + std::to_string(line), "malformed JSON");
  }
}

inline json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec3 vec_from_json(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 3) throw ParseError(ctx, "expected an array of 3 numbers");
  Vec3 v;
  for (int i = 0; i < 3; ++i) {
    if (!j[i].is_number()) throw ParseError(ctx, "expected an array of 3 numbers");
    v[i] = j[i].get<double>();
  }
  return v;
}

inline json matrix_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return rows;
}

inline Mat3 matrix_from_json(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 3) throw ParseError(ctx, "expected a 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r) m.row(r) = vec_from_json(j[r], ctx).transpose();
  return m;
}

inline json intrinsics_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy},
          {"width", k.width}, {"height", k.height}};
}

inline CameraIntrinsics intrinsics_from_json(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ParseError(ctx, "expected an intrinsics object");
  CameraIntrinsics k;
  try {
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
    k.width = j.at("width").get<int>();
    k.height = j.at("height").get<int>();
  } catch (const json::exception& e) {
    throw ParseError(ctx, e.what());
  }
  try {
    k.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(ctx, e.what());
  }
  return k;
}

inline json pose_json(const PoseSE3& p) {
  json m = json::array();
  const Eigen::Matrix4d t = p.matrix();
  for (int r = 0; r < 4; ++r) m.push_back(json::array({t(r, 0), t(r, 1), t(r, 2), t(r, 3)}));
  return m;
}

inline PoseSE3 pose_from_json(const json& j, const std::string& ctx, double tol = 1e-6) {
  if (!j.is_array() || (j.size() != 4 && j.size() != 3))
    throw ParseError(ctx, "expected a 4x4 (or 3x4) transform");
  Eigen::Matrix<double, 3, 4> m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw ParseError(ctx, "row " + std::to_string(r) + " must have 4 entries");
    for (int c = 0; c < 4; ++c) {
      if (!j[r][c].is_number()) throw ParseError(ctx, "non-numeric transform entry");
      m(r, c) = j[r][c].get<double>();
    }
  }
  PoseSE3 p;
  try {
    p.rotation = Rotation(m.leftCols<3>(), tol);
  } catch (const InvalidArgument& e) {
    throw ParseError(ctx, std::string("rotation block invalid: ") + e.what());
  }
  p.translation = m.col(3);
  if (!p.translation.allFinite()) throw ParseError(ctx, "translation is not finite");
  return p;
}

// ---------------------------------------------------------------------------
// Scene JSON
// ---------------------------------------------------------------------------

inline constexpr int kSceneSchemaVersion = 1;

/// Columnar document: parallel arrays means / scales / matrices (or
/// quaternions, w-x-y-z) / opacity / color / label.
inline json scene_to_json(const Scene& s) {
  json means = json::array(), scales = json::array(), mats = json::array(),
       opac = json::array(), color = json::array(), label = json::array();
  for (const auto& p : s.primitives) {
    means.push_back(vec_json(p.mean));
    scales.push_back(vec_json(p.scale));
    mats.push_back(matrix_json(p.orientation.matrix()));
    opac.push_back(p.opacity);
    color.push_back(vec_json(p.color));
    label.push_back(p.label);
  }
  return {{"schema", "spine.scene"},
          {"version", kSceneSchemaVersion},
          {"background", vec_json(s.background)},
          {"bounds", {{"min", vec_json(s.bounds.min)}, {"max", vec_json(s.bounds.max)}}},
          {"means", means},
          {"scales", scales},
          {"matrices", mats},
          {"opacity", opac},
          {"color", color},
          {"label", label}};
}

inline Scene scene_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("scene", "expected a JSON object");
  if (j.value("schema", "") != "spine.scene") throw ParseError("scene.schema", "expected 'spine.scene'");
  if (j.value("version", 0) != kSceneSchemaVersion)
    throw ParseError("scene.version", "unsupported schema version");
  Scene s;
  try {
    s.background = vec_from_json(j.at("background"), "scene.background");
    s.bounds.min = vec_from_json(j.at("bounds").at("min"), "scene.bounds.min");
    s.bounds.max = vec_from_json(j.at("bounds").at("max"), "scene.bounds.max");
    const json& means = j.at("means");
    const std::size_t n = means.size();
    const bool has_mats = j.contains("matrices");
    const json& rots = has_mats ? j.at("matrices") : j.at("quaternions");
    for (const char* key : {"scales", "opacity", "color", "label"})
      if (j.at(key).size() != n) throw ParseError(std::string("scene.") + key, "length differs from means");
    if (rots.size() != n) throw ParseError("scene.rotations", "length differs from means");
    for (std::size_t i = 0; i < n; ++i) {
      const std::string at = "[" + std::to_string(i) + "]";
      GaussianPrimitive p;
      p.mean = vec_from_json(means[i], "scene.means" + at);
      p.scale = vec_from_json(j["scales"][i], "scene.scales" + at);
      if (has_mats) {
        try {
          p.orientation = Rotation(matrix_from_json(rots[i], "scene.matrices" + at), 1e-9);
        } catch (const InvalidArgument& e) {
          throw ParseError("scene.matrices" + at, e.what());
        }
      } else {
        const json& q = rots[i];
        if (!q.is_array() || q.size() != 4) throw ParseError("scene.quaternions" + at, "expected [w,x,y,z]");
        Eigen::Quaterniond qq(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                              q[3].get<double>());
        if (qq.norm() < 1e-12) throw ParseError("scene.quaternions" + at, "zero quaternion");
        p.orientation = Rotation::unchecked(qq.normalized().toRotationMatrix());
      }
      p.opacity = j["opacity"][i].get<double>();
      p.color = vec_from_json(j["color"][i], "scene.color" + at);
      p.label = j["label"][i].get<int>();
      s.primitives.push_back(p);
    }
  } catch (const json::exception& e) {
    throw ParseError("scene", e.what());
  }
  s.validate();
  return s;
}

inline void save_scene(const Scene& s, const fs::path& path) {
  write_text_file(path, scene_to_json(s).dump(2));
}

inline Scene load_scene(const fs::path& path) {
  return scene_from_json(parse_json(read_text_file(path), path.string()));
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Raw PNG pixels: 8 or 16 bits per sample, 1 or 3 channels.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

inline void write_png(const fs::path& path, const PngImage& img) {
  require(img.channels == 1 || img.channels == 3, "write_png: 1 or 3 channels supported");
  require(img.bit_depth == 8 || img.bit_depth == 16, "write_png: bit depth must be 8 or 16");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int bytes = img.bit_depth / 8;
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels * bytes);
  for (int y = 0; y < img.height; ++y) {
    for (int i = 0; i < img.width * img.channels; ++i) {
      const std::uint16_t v = img.samples[static_cast<std::size_t>(y) * img.width * img.channels + i];
      if (bytes == 1) {
        row[i] = static_cast<png_byte>(v);
      } else {
        row[2 * i] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<png_byte>(v & 0xFF);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline PngImage read_png(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw InvalidArgument("cannot open '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError(path.string(), "not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  img.samples.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int i = 0; i < img.width * img.channels; ++i) {
      const std::size_t o = static_cast<std::size_t>(y) * img.width * img.channels + i;
      img.samples[o] = img.bit_depth == 16
                           ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1])
                           : row[i];
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Writes a [0,1] image with 1 or 3 channels as 8-bit PNG.
inline void write_png8(const fs::path& path, const ImageD& img) {
  PngImage p{img.width, img.height, img.channels, 8, {}};
  p.samples.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    p.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  write_png(path, p);
}

/// Reads an 8- or 16-bit PNG into a [0,1] image.
inline ImageD read_png_unit(const fs::path& path) {
  const PngImage p = read_png(path);
  ImageD img(p.width, p.height, p.channels);
  const double scale = p.bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < p.samples.size(); ++i) img.data[i] = p.samples[i] / scale;
  return img;
}

/// Labels are stored shifted by one in a 16-bit grey PNG (0 = background).
inline void write_label_png(const fs::path& path, const LabelMap& labels) {
  PngImage p{labels.width, labels.height, 1, 16, {}};
  p.samples.resize(labels.data.size());
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    require(labels.data[i] >= kBackgroundLabel && labels.data[i] < 65535, "label out of range");
    p.samples[i] = static_cast<std::uint16_t>(labels.data[i] + 1);
  }
  write_png(path, p);
}

inline LabelMap read_label_png(const fs::path& path) {
  const PngImage p = read_png(path);
  if (p.channels != 1) throw ParseError(path.string(), "label PNG must be single-channel");
  LabelMap l(p.width, p.height, 1);
  for (std::size_t i = 0; i < p.samples.size(); ++i) l.data[i] = static_cast<int>(p.samples[i]) - 1;
  return l;
}

// ---------------------------------------------------------------------------
// Little-endian binary
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos, const std::string& ctx) {
  if (pos + 4 > in.size()) throw ParseError(ctx, "truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline double get_f64(const std::string& in, std::size_t& pos, const std::string& ctx) {
  const std::uint64_t lo = get_u32(in, pos, ctx);
  const std::uint64_t hi = get_u32(in, pos, ctx);
  return std::bit_cast<double>(lo | (hi << 32));
}

}  // namespace detail

/// Raw little-endian float32 depth, row-major.
inline void write_depth_f32(const fs::path& path, const ImageD& depth) {
  std::string out;
  out.reserve(depth.data.size() * 4);
  for (double d : depth.data) detail::put_f32(out, static_cast<float>(d));
  write_text_file(path, out);
}

inline ImageD read_depth_f32(const fs::path& path, int width, int height) {
  const std::string in = read_text_file(path);
  if (in.size() != static_cast<std::size_t>(width) * height * 4)
    throw ParseError(path.string(), "depth file size does not match width x height");
  ImageD d(width, height, 1);
  std::size_t pos = 0;
  for (double& v : d.data) v = std::bit_cast<float>(detail::get_u32(in, pos, path.string()));
  return d;
}

// FeatureImage cache: "SPFI" | version | H | W | d | dtype(1 = f32) | payload.
inline constexpr std::uint32_t kFeatureMagic = 0x49465053;  // "SPFI" little-endian
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

inline std::string encode_feature_image(const FeatureImage& f) {
  std::string out;
  out.reserve(24 + f.data.size() * 4);
  detail::put_u32(out, kFeatureMagic);
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(f.height));
  detail::put_u32(out, static_cast<std::uint32_t>(f.width));
  detail::put_u32(out, static_cast<std::uint32_t>(f.channels));
  detail::put_u32(out, kDtypeF32);
  for (double v : f.data) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline FeatureImage decode_feature_image(const std::string& in, const std::string& ctx = "feature image") {
  std::size_t pos = 0;
  if (detail::get_u32(in, pos, ctx) != kFeatureMagic) throw ParseError(ctx, "bad magic");
  if (detail::get_u32(in, pos, ctx) != kFeatureVersion) throw ParseError(ctx, "unsupported version");
  const auto h = detail::get_u32(in, pos, ctx);
  const auto w = detail::get_u32(in, pos, ctx);
  const auto d = detail::get_u32(in, pos, ctx);
  if (detail::get_u32(in, pos, ctx) != kDtypeF32) throw ParseError(ctx, "unsupported dtype");
  const std::size_t n = static_cast<std::size_t>(h) * w * d;
  if (in.size() != pos + 4 * n) throw ParseError(ctx, "payload size mismatch");
  FeatureImage f(static_cast<int>(w), static_cast<int>(h), static_cast<int>(d));
  for (double& v : f.data) v = std::bit_cast<float>(detail::get_u32(in, pos, ctx));
  return f;
}

inline void save_feature_image(const FeatureImage& f, const fs::path& path) {
  write_text_file(path, encode_feature_image(f));
}

inline FeatureImage load_feature_image(const fs::path& path) {
  return decode_feature_image(read_text_file(path), path.string());
}

}  // namespace spine
