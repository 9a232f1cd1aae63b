// Copyright 2026 The QStream Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>

#include "qstream/error.hpp"
#include "qstream/query.hpp"
#include "qstream/rng.hpp"

namespace qstream::channel {

// Query packet layout (all little-endian):
//   "QSTR" | u16 version | u32 agent_id | u64 frame_id | 12 x f32 pose
//   (rotation row-major, then translation) | u16 query_count | u16 feature_dim
//   records: u16 class_id | f32 confidence | 3 x f32 ref_point | D x f32 feature
//   trailer: u32 CRC-32 (reflected, poly 0xEDB88320) over every preceding byte
inline constexpr std::array<char, 4> kQueryMagic{'Q', 'S', 'T', 'R'};
inline constexpr std::array<char, 4> kRequestMagic{'Q', 'R', 'E', 'Q'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 70;
inline constexpr std::size_t kTrailerBytes = 4;
inline constexpr std::size_t kRecordFixedBytes = 18;
// Decoded box record used by result-level cooperation: class, score, center, dims, yaw.
inline constexpr std::size_t kBoxRecordBytes = 46;

inline constexpr std::uint64_t packet_bytes(std::uint64_t n, std::uint64_t feature_dim) {
  return kHeaderBytes + kTrailerBytes + n * (kRecordFixedBytes + 4 * feature_dim);
}

inline constexpr std::uint64_t box_packet_bytes(std::uint64_t n) {
  return kHeaderBytes + kTrailerBytes + n * kBoxRecordBytes;
}

namespace detail {

inline constexpr std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> t{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1U) ? 0xEDB88320U ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

inline constexpr auto kCrcTable = make_crc_table();

class Writer {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  std::string& str() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::string_view bytes(std::size_t n) { need(n); auto s = in_.substr(pos_, n); pos_ += n; return s; }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) fail(ErrorCode::kTruncatedPacket, "unexpected end of packet");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void write_pose(Writer& w, const Pose& p) {
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) w.f32(p.rotation(r, c));
  for (int i = 0; i < 3; ++i) w.f32(p.translation[i]);
}

inline Pose read_pose(Reader& rd) {
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = rd.f32();
  Vec3 t;
  for (int i = 0; i < 3; ++i) t[i] = rd.f32();
  return {orthonormalize(m), t};
}

inline std::uint32_t stored_crc(std::string_view bytes) {
  Reader rd(bytes.substr(bytes.size() - kTrailerBytes));
  return rd.u32();
}

}  // namespace detail

inline std::uint32_t crc32(std::string_view data, std::uint32_t crc = 0) {
  crc = ~crc;
  for (unsigned char b : data) crc = detail::kCrcTable[(crc ^ b) & 0xFFU] ^ (crc >> 8);
  return ~crc;
}

inline std::string encode_packet(const QueryBatch& b) {
  if (b.queries.size() > 0xFFFF) fail(ErrorCode::kTooManyQueries, "at most 65535 queries per packet");
  const Eigen::Index dim = b.queries.empty() ? 0 : b.queries.front().feature.size();
  for (const auto& q : b.queries)
    if (q.feature.size() != dim) fail(ErrorCode::kMixedFeatureDims, "queries disagree on feature_dim");
  if (dim > 0xFFFF) fail(ErrorCode::kMixedFeatureDims, "feature_dim exceeds u16");

  detail::Writer w;
  w.str().reserve(packet_bytes(b.queries.size(), static_cast<std::uint64_t>(dim)));
  w.bytes(std::string_view(kQueryMagic.data(), kQueryMagic.size()));
  w.u16(kVersion);
  w.u32(b.agent_id);
  w.u64(b.frame_id);
  detail::write_pose(w, b.pose);
  w.u16(static_cast<std::uint16_t>(b.queries.size()));
  w.u16(static_cast<std::uint16_t>(dim));
  for (const auto& q : b.queries) {
    w.u16(static_cast<std::uint16_t>(q.class_id));
    w.f32(q.confidence);
    for (int i = 0; i < 3; ++i) w.f32(q.ref_point[i]);
    for (Eigen::Index i = 0; i < dim; ++i) w.f32(q.feature[i]);
  }
  w.u32(crc32(w.str()));
  return std::move(w.str());
}

struct PacketHeader {
  std::uint16_t version = 0;
  std::uint32_t agent_id = 0;
  std::uint64_t frame_id = 0;
  std::uint16_t query_count = 0;
  std::uint16_t feature_dim = 0;
};

// Check order: minimum size, magic, version, declared length, CRC. Decoded
// queries are numbered by record index.
inline QueryBatch decode_packet(std::string_view bytes, PacketHeader* header_out = nullptr) {
  if (bytes.size() < kHeaderBytes + kTrailerBytes) {
    fail(ErrorCode::kTruncatedPacket, "packet shorter than header and trailer");
  }
  detail::Reader rd(bytes);
  const auto magic = rd.bytes(4);
  if (magic != std::string_view(kQueryMagic.data(), 4)) fail(ErrorCode::kBadMagic, "expected QSTR");
  PacketHeader h;
  h.version = rd.u16();
  if (h.version != kVersion) fail(ErrorCode::kBadVersion, "unsupported version " + std::to_string(h.version));
  h.agent_id = rd.u32();
  h.frame_id = rd.u64();
  const Pose pose = detail::read_pose(rd);
  h.query_count = rd.u16();
  h.feature_dim = rd.u16();
  const std::uint64_t expected = packet_bytes(h.query_count, h.feature_dim);
  if (bytes.size() != expected) {
    fail(ErrorCode::kTruncatedPacket, "packet is " + std::to_string(bytes.size()) + " bytes, header declares " +
                                          std::to_string(expected));
  }
  const std::string_view covered = bytes.substr(0, bytes.size() - kTrailerBytes);
  if (crc32(covered) != detail::stored_crc(bytes)) fail(ErrorCode::kCrcMismatch, "checksum does not match");

  QueryBatch b;
  b.agent_id = h.agent_id;
  b.frame_id = h.frame_id;
  b.pose = pose;
  b.queries.reserve(h.query_count);
  for (std::uint16_t n = 0; n < h.query_count; ++n) {
    ObjectQuery q;
    q.class_id = rd.u16();
    q.confidence = rd.f32();
    for (int i = 0; i < 3; ++i) q.ref_point[i] = rd.f32();
    q.feature.resize(h.feature_dim);
    for (int i = 0; i < h.feature_dim; ++i) q.feature[i] = rd.f32();
    q.query_id = n;
    b.queries.push_back(std::move(q));
  }
  if (header_out) *header_out = h;
  return b;
}

// ---- lossy link ----

struct ChannelConfig {
  double dropout_ratio = 0.0;
  std::uint64_t seed = 0;

  bool is_valid() const { return dropout_ratio >= 0.0 && dropout_ratio <= 1.0; }
};

struct TransmissionReport {
  std::uint64_t bytes_sent = 0;
  std::uint64_t queries_sent = 0;     // delivered over the link
  std::uint64_t queries_dropped = 0;  // lost on the link

  bool operator==(const TransmissionReport&) const = default;
};

// Independent per-query loss; one uniform draw per query, in order.
inline std::pair<QueryBatch, TransmissionReport> apply_dropout(const QueryBatch& b,
                                                               const ChannelConfig& cfg) {
  if (!cfg.is_valid()) fail(ErrorCode::kInvalidArgument, "dropout ratio must lie in [0, 1]");
  Rng rng(cfg.seed);
  QueryBatch out = b;
  out.queries.clear();
  TransmissionReport rep;
  for (const auto& q : b.queries) {
    if (rng.uniform() < cfg.dropout_ratio) {
      ++rep.queries_dropped;
    } else {
      out.queries.push_back(q);
    }
  }
  rep.queries_sent = out.queries.size();
  const auto dim = b.queries.empty() ? 0 : static_cast<std::uint64_t>(b.queries.front().feature.size());
  rep.bytes_sent = packet_bytes(rep.queries_sent, dim);
  return {std::move(out), rep};
}

// ---- cooperation request ----
//   "QREQ" | u16 version | u32 requester_id | u64 frame_id | f32 min_confidence
//   | u8 mask_present | [6 x f32 x_min y_min x_max y_max z_min z_max] | u32 CRC

struct Request {
  Requirement requirement;
  std::uint32_t requester_id = 0;
  std::uint64_t frame_id = 0;
};

inline std::string build_request(const Requirement& req, std::uint32_t requester_id,
                                 std::uint64_t frame_id) {
  if (!req.is_valid()) fail(ErrorCode::kInvalidArgument, "min_confidence must lie in [0, 1]");
  detail::Writer w;
  w.bytes(std::string_view(kRequestMagic.data(), 4));
  w.u16(kVersion);
  w.u32(requester_id);
  w.u64(frame_id);
  w.f32(req.min_confidence);
  w.u8(req.region_mask ? 1 : 0);
  if (req.region_mask) {
    const auto& m = *req.region_mask;
    for (double v : {m.x_min, m.y_min, m.x_max, m.y_max, m.z_min, m.z_max}) w.f32(v);
  }
  w.u32(crc32(w.str()));
  return std::move(w.str());
}

inline Request decode_request(std::string_view bytes) {
  if (bytes.size() < 27) fail(ErrorCode::kTruncatedPacket, "request shorter than 27 bytes");
  detail::Reader rd(bytes);
  if (rd.bytes(4) != std::string_view(kRequestMagic.data(), 4)) fail(ErrorCode::kBadMagic, "expected QREQ");
  if (rd.u16() != kVersion) fail(ErrorCode::kBadVersion, "unsupported request version");
  Request r;
  r.requester_id = rd.u32();
  r.frame_id = rd.u64();
  r.requirement.min_confidence = rd.f32();
  const std::uint8_t has_mask = rd.u8();
  const std::size_t expected = has_mask ? 51 : 27;
  if (bytes.size() != expected) fail(ErrorCode::kTruncatedPacket, "request length does not match mask flag");
  if (crc32(bytes.substr(0, bytes.size() - 4)) != detail::stored_crc(bytes)) {
    fail(ErrorCode::kCrcMismatch, "request checksum does not match");
  }
  if (has_mask) {
    PerceptionRange m;
    m.x_min = rd.f32();
    m.y_min = rd.f32();
    m.x_max = rd.f32();
    m.y_max = rd.f32();
    m.z_min = rd.f32();
    m.z_max = rd.f32();
    r.requirement.region_mask = m;
  }
  return r;
}

}  // namespace qstream::channel
