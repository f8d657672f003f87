#pragma once

// Predictor wire protocol. Every message travels as a u32 little-endian byte
// length followed by the body.
//
// Request body:  "PRED", u32 version, u32 request id, u8 op, then one image
//                (op 1) or two images (op 0), each u32 H, u32 W, u8 channels,
//                H*W*channels raw bytes.
// Response body: "PRSP", u32 request id, u8 status. Status 0 is followed by
//                eight grids X_ii, X_ij, C_ii, C_ij, D_ii, D_ij, Q_ii, Q_ij,
//                each u32 H, u32 W, u32 channels, channel-planar float32.
//                Masked points are NaN. Any other status is followed by u32
//                length + UTF-8 error message.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/io.hpp"
#include "mslam/pointmap.hpp"
#include "mslam/predictor.hpp"

namespace mslam::wire {

inline constexpr std::uint32_t kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 64u << 20;

enum class Op : std::uint8_t { predict = 0, monocular_init = 1 };

enum Status : std::uint8_t {
  kOk = 0,
  kMalformed = 1,
  kTooLarge = 2,
  kModelError = 3,
};

struct Image {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint8_t channels = 0;
  std::vector<std::uint8_t> data;
  bool operator==(const Image&) const = default;
};

struct Request {
  std::uint32_t id = 0;
  Op op = Op::predict;
  std::vector<Image> images;
};

struct Response {
  std::uint32_t id = 0;
  std::uint8_t status = kOk;
  std::string error;
  PredictionPair pair;
};

inline std::vector<std::uint8_t> encode_request(const Request& r) {
  const std::size_t expected = r.op == Op::predict ? 2 : 1;
  if (r.images.size() != expected) throw ConfigError("request carries the wrong number of images");
  io::ByteWriter w;
  w.magic("PRED");
  w.u32(kProtocolVersion);
  w.u32(r.id);
  w.u8(static_cast<std::uint8_t>(r.op));
  for (const auto& im : r.images) {
    if (im.data.size() != static_cast<std::size_t>(im.height) * im.width * im.channels) {
      throw ConfigError("image payload size does not match its header");
    }
    w.u32(im.height);
    w.u32(im.width);
    w.u8(im.channels);
    w.bytes(im.data.data(), im.data.size());
  }
  return w.take();
}

inline Request decode_request(std::span<const std::uint8_t> body) {
  io::ByteReader r(body);
  r.expect_magic("PRED");
  const std::size_t vat = r.offset();
  if (r.u32() != kProtocolVersion) throw ParseError("unsupported protocol version", vat);
  Request req;
  req.id = r.u32();
  const std::size_t oat = r.offset();
  const std::uint8_t op = r.u8();
  if (op > 1) throw ParseError("unknown op", oat);
  req.op = static_cast<Op>(op);
  const std::size_t n = req.op == Op::predict ? 2 : 1;
  for (std::size_t i = 0; i < n; ++i) {
    Image im;
    const std::size_t at = r.offset();
    im.height = r.u32();
    im.width = r.u32();
    im.channels = r.u8();
    const std::uint64_t size = static_cast<std::uint64_t>(im.height) * im.width * im.channels;
    if (size > r.remaining()) throw ParseError("image payload exceeds the frame", at);
    im.data.resize(size);
    r.bytes(im.data.data(), im.data.size());
    req.images.push_back(std::move(im));
  }
  if (!r.done()) throw ParseError("trailing bytes after request", r.offset());
  return req;
}

namespace detail {

inline void grid_header(io::ByteWriter& w, int h, int wd, int c) {
  w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(wd));
  w.u32(static_cast<std::uint32_t>(c));
}

inline void put_points(io::ByteWriter& w, const Pointmap& p) {
  grid_header(w, p.height(), p.width(), 3);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      w.f32(p.valid(i) ? static_cast<float>(p.point(i)(c)) : std::numeric_limits<float>::quiet_NaN());
    }
  }
}

inline void put_conf(io::ByteWriter& w, const ConfidenceMap& m) {
  grid_header(w, m.height(), m.width(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m[i]));
}

inline void put_desc(io::ByteWriter& w, const FeatureMap& f) {
  grid_header(w, f.height(), f.width(), f.dim());
  for (int c = 0; c < f.dim(); ++c) {
    for (std::size_t i = 0; i < f.size(); ++i) w.f32(static_cast<float>(f.descriptor(i)[c]));
  }
}

inline void put_q(io::ByteWriter& w, const FeatureMap& f) {
  grid_header(w, f.height(), f.width(), 1);
  for (std::size_t i = 0; i < f.size(); ++i) w.f32(static_cast<float>(f.confidence(i)));
}

struct Grid {
  std::uint32_t h = 0, w = 0, c = 0;
  std::vector<float> data;  // channel-planar
  float at(std::uint32_t ch, std::size_t i) const { return data[ch * static_cast<std::size_t>(h) * w + i]; }
};

inline Grid get_grid(io::ByteReader& r) {
  const std::size_t at = r.offset();
  Grid g;
  g.h = r.u32();
  g.w = r.u32();
  g.c = r.u32();
  const std::uint64_t n = static_cast<std::uint64_t>(g.h) * g.w * g.c;
  if (g.h > 1u << 15 || g.w > 1u << 15 || g.c > 4096 || 4 * n > r.remaining()) {
    throw ParseError("grid exceeds the frame", at);
  }
  g.data.resize(n);
  for (auto& v : g.data) v = r.f32();
  return g;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_response(const Response& resp) {
  io::ByteWriter w;
  w.magic("PRSP");
  w.u32(resp.id);
  w.u8(resp.status);
  if (resp.status != kOk) {
    w.u32(static_cast<std::uint32_t>(resp.error.size()));
    w.bytes(resp.error.data(), resp.error.size());
    return w.take();
  }
  const auto& p = resp.pair;
  detail::put_points(w, p.x_ii);
  detail::put_points(w, p.x_ij);
  detail::put_conf(w, p.c_ii);
  detail::put_conf(w, p.c_ij);
  detail::put_desc(w, p.f_ii);
  detail::put_desc(w, p.f_ij);
  detail::put_q(w, p.f_ii);
  detail::put_q(w, p.f_ij);
  return w.take();
}

inline Response decode_response(std::span<const std::uint8_t> body) {
  io::ByteReader r(body);
  r.expect_magic("PRSP");
  Response resp;
  resp.id = r.u32();
  resp.status = r.u8();
  if (resp.status != kOk) {
    const std::size_t at = r.offset();
    const std::uint32_t n = r.u32();
    if (n > r.remaining()) throw ParseError("error message exceeds the frame", at);
    resp.error.resize(n);
    r.bytes(resp.error.data(), n);
    if (!r.done()) throw ParseError("trailing bytes after response", r.offset());
    return resp;
  }
  const std::size_t grids_at = r.offset();
  std::vector<detail::Grid> g;
  for (int k = 0; k < 8; ++k) g.push_back(detail::get_grid(r));
  if (!r.done()) throw ParseError("trailing bytes after response", r.offset());
  const std::uint32_t h = g[0].h, w = g[0].w, d = g[4].c;
  const std::uint32_t channels[8] = {3, 3, 1, 1, d, d, 1, 1};
  for (int k = 0; k < 8; ++k) {
    if (g[k].h != h || g[k].w != w || g[k].c != channels[k] || d == 0) {
      throw ParseError("response grids disagree in shape", grids_at);
    }
  }
  const int hh = static_cast<int>(h), ww = static_cast<int>(w), dd = static_cast<int>(d);
  auto points = [&](const detail::Grid& src) {
    Pointmap p(hh, ww);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Vec3 x(src.at(0, i), src.at(1, i), src.at(2, i));
      if (x.allFinite()) p.set(i, x);
    }
    return p;
  };
  auto conf = [&](const detail::Grid& src) {
    ConfidenceMap c(hh, ww);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = src.at(0, i);
    return c;
  };
  auto features = [&](const detail::Grid& desc, const detail::Grid& q) {
    FeatureMap f(hh, ww, dd);
    for (std::size_t i = 0; i < f.size(); ++i) {
      for (std::uint32_t c = 0; c < d; ++c) f.descriptor(i)[c] = desc.at(c, i);
      f.set_confidence(i, q.at(0, i));
    }
    return f;
  };
  resp.pair = {points(g[0]), points(g[1]), conf(g[2]), conf(g[3]), features(g[4], g[6]), features(g[5], g[7])};
  return resp;
}

/// Prefixes a body with its u32 length.
inline std::vector<std::uint8_t> frame(std::span<const std::uint8_t> body) {
  if (body.size() > kMaxFrameBytes) throw ConfigError("frame exceeds the 64 MB limit");
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body.data(), body.size());
  return w.take();
}

}  // namespace mslam::wire
