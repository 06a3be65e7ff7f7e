// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints for the semantic field and the inverse pose model. Layout:
// "SPCK" | version | kind length | kind | header length | JSON header |
// count | count little-endian float64 parameters.

#pragma once

#include "spine/distill.hpp"
#include "spine/inverse.hpp"
#include "spine/io.hpp"

#include <string>
#include <vector>

namespace spine {

inline constexpr std::uint32_t kCheckpointMagic = 0x4B435053;  // "SPCK" little-endian
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "field" or "inverse"
  json header;
  std::vector<double> params;
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out;
  detail::put_u32(out, kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(c.kind.size()));
  out += c.kind;
  const std::string h = c.header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  detail::put_u32(out, static_cast<std::uint32_t>(c.params.size()));
  for (double v : c.params) detail::put_f64(out, v);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& in, const std::string& ctx) {
  std::size_t pos = 0;
  if (detail::get_u32(in, pos, ctx) != kCheckpointMagic) throw ParseError(ctx, "not a checkpoint");
  if (detail::get_u32(in, pos, ctx) != kCheckpointVersion)
    throw ParseError(ctx, "unsupported checkpoint version");
  auto take = [&](std::uint32_t n) {
    if (pos + n > in.size()) throw ParseError(ctx, "truncated checkpoint");
    std::string s = in.substr(pos, n);
    pos += n;
    return s;
  };
  Checkpoint c;
  c.kind = take(detail::get_u32(in, pos, ctx));
  c.header = parse_json(take(detail::get_u32(in, pos, ctx)), ctx);
  const std::uint32_t n = detail::get_u32(in, pos, ctx);
  if (in.size() != pos + 8ull * n) throw ParseError(ctx, "parameter payload size mismatch");
  c.params.resize(n);
  for (double& v : c.params) v = detail::get_f64(in, pos, ctx);
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  write_text_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const fs::path& path, const std::string& expected_kind) {
  Checkpoint c = decode_checkpoint(read_text_file(path), path.string());
  if (c.kind != expected_kind)
    throw ParseError(path.string(), "expected a '" + expected_kind + "' checkpoint, found '" +
                                        c.kind + "'");
  return c;
}

namespace detail {

template <typename T>
T header_get(const json& h, const char* key, const std::string& ctx) {
  try {
    return h.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(ctx + "." + key, e.what());
  }
}

inline json vecx_json(const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VecX vecx_from_json(const json& j, const std::string& ctx) {
  std::vector<double> v;
  try {
    v = j.get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ParseError(ctx, e.what());
  }
  return Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Semantic field
// ---------------------------------------------------------------------------

inline Checkpoint field_checkpoint(const SemanticFieldParams& p,
                                   const std::vector<double>& loss_trace, const json& extra = {}) {
  const auto& c = p.config;
  json h = {{"resolutions", c.grid.resolutions},
            {"features_per_level", c.grid.features_per_level},
            {"bounds", {{"min", vec_json(c.grid.bounds.min)}, {"max", vec_json(c.grid.bounds.max)}}},
            {"hidden", c.hidden},
            {"spatial_dim", c.spatial_dim},
            {"language_dim", c.language_dim},
            {"grid_init_amplitude", c.grid_init_amplitude},
            {"loss_trace", loss_trace}};
  if (!extra.is_null()) h["meta"] = extra;
  return {"field", h, p.flatten()};
}

inline SemanticFieldParams field_from_checkpoint(const Checkpoint& ck, const std::string& ctx) {
  const json& h = ck.header;
  FieldConfig c;
  c.grid.resolutions = detail::header_get<std::vector<int>>(h, "resolutions", ctx);
  c.grid.features_per_level = detail::header_get<int>(h, "features_per_level", ctx);
  try {
    c.grid.bounds.min = vec_from_json(h.at("bounds").at("min"), ctx + ".bounds.min");
    c.grid.bounds.max = vec_from_json(h.at("bounds").at("max"), ctx + ".bounds.max");
  } catch (const json::exception& e) {
    throw ParseError(ctx + ".bounds", e.what());
  }
  c.hidden = detail::header_get<int>(h, "hidden", ctx);
  c.spatial_dim = detail::header_get<int>(h, "spatial_dim", ctx);
  c.language_dim = detail::header_get<int>(h, "language_dim", ctx);
  c.grid_init_amplitude = detail::header_get<double>(h, "grid_init_amplitude", ctx);
  SemanticFieldParams p;
  try {
    p = SemanticFieldParams::init(c, 0);
  } catch (const InvalidArgument& e) {
    throw ParseError(ctx, e.what());
  }
  if (ck.params.size() != p.parameter_count())
    throw ParseError(ctx, "parameter count does not match the stored configuration");
  p.unflatten(ck.params);
  return p;
}

inline void save_field(const SemanticFieldParams& p, const std::vector<double>& trace,
                       const fs::path& path, const json& extra = {}) {
  save_checkpoint(field_checkpoint(p, trace, extra), path);
}

inline SemanticFieldParams load_field(const fs::path& path) {
  return field_from_checkpoint(load_checkpoint(path, "field"), path.string());
}

// ---------------------------------------------------------------------------
// Inverse model
// ---------------------------------------------------------------------------

inline Checkpoint inverse_checkpoint(const InverseModelParams& p,
                                     const std::vector<double>& loss_trace,
                                     const json& extra = {}) {
  std::vector<double> flat;
  p.net.visit([&](const double* d, std::size_t n) { flat.insert(flat.end(), d, d + n); });
  json h = {{"embedding_dim", p.config.embedding_dim},
            {"hidden", p.config.hidden},
            {"components", p.config.components},
            {"input_mean", detail::vecx_json(p.input_mean)},
            {"input_scale", detail::vecx_json(p.input_scale)},
            {"output_mean", detail::vecx_json(p.output_mean)},
            {"output_scale", detail::vecx_json(p.output_scale)},
            {"loss_trace", loss_trace}};
  if (!extra.is_null()) h["meta"] = extra;
  return {"inverse", h, flat};
}

inline InverseModelParams inverse_from_checkpoint(const Checkpoint& ck, const std::string& ctx) {
  const json& h = ck.header;
  InverseModelConfig c;
  c.embedding_dim = detail::header_get<int>(h, "embedding_dim", ctx);
  c.hidden = detail::header_get<int>(h, "hidden", ctx);
  c.components = detail::header_get<int>(h, "components", ctx);
  InverseModelParams p;
  try {
    p = InverseModelParams::init(c, 0);
  } catch (const InvalidArgument& e) {
    throw ParseError(ctx, e.what());
  }
  auto get_vec = [&](const char* key, Eigen::Index n) {
    if (!h.contains(key)) throw ParseError(ctx + "." + key, "missing field");
    VecX v = detail::vecx_from_json(h.at(key), ctx + "." + key);
    if (v.size() != n) throw ParseError(ctx + "." + key, "wrong length");
    return v;
  };
  p.input_mean = get_vec("input_mean", c.embedding_dim);
  p.input_scale = get_vec("input_scale", c.embedding_dim);
  p.output_mean = get_vec("output_mean", 6);
  p.output_scale = get_vec("output_scale", 6);
  std::size_t total = 0;
  p.net.visit([&](const double*, std::size_t n) { total += n; });
  if (ck.params.size() != total)
    throw ParseError(ctx, "parameter count does not match the stored configuration");
  std::size_t off = 0;
  p.net.visit([&](double* d, std::size_t n) {
    std::copy_n(ck.params.begin() + static_cast<std::ptrdiff_t>(off), n, d);
    off += n;
  });
  return p;
}

inline void save_inverse_model(const InverseModelParams& p, const std::vector<double>& trace,
                               const fs::path& path, const json& extra = {}) {
  save_checkpoint(inverse_checkpoint(p, trace, extra), path);
}

inline InverseModelParams load_inverse_model(const fs::path& path) {
  return inverse_from_checkpoint(load_checkpoint(path, "inverse"), path.string());
}

}  // namespace spine
