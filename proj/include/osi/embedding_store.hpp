// Copyright 2026 The osieval Authors
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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "osi/common.hpp"

namespace osi {

/// One speaker embedding. Vectors are length-normalized at ingestion; the
/// pre-normalization Euclidean norm is kept as `raw_magnitude` because the
/// calibration quality measures need it while scoring needs unit vectors.
/// The raw vector is retained verbatim so that re-serializing a store
/// reproduces the input bytes exactly.
struct EmbeddingRecord {
  std::string speaker_id;
  std::string recording_id;
  std::vector<float> raw;    ///< as ingested, pre-normalization
  std::vector<float> unit;   ///< normalized to Euclidean norm 1 (within 1e-6)
  double raw_magnitude = 0.0;
  std::optional<float> snr_db;
  std::optional<float> duration_s;
};

/// In-memory embedding collection with random access by recording id and a
/// speaker -> recordings index. Immutable after ingestion: all accessors are
/// const and safe for unlimited concurrent readers. add() is single-threaded.
class EmbeddingStore {
 public:
  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const EmbeddingRecord& record(std::size_t idx) const { return records_[idx]; }
  const std::vector<EmbeddingRecord>& records() const { return records_; }

  const EmbeddingRecord* find_recording(const std::string& recording_id) const {
    auto it = recording_index_.find(recording_id);
    return it == recording_index_.end() ? nullptr : &records_[it->second];
  }

  const EmbeddingRecord& by_recording(const std::string& recording_id) const {
    const EmbeddingRecord* r = find_recording(recording_id);
    if (!r) throw ContractError("unknown recording id: " + recording_id);
    return *r;
  }

  /// Speaker ids in first-seen (ingestion) order.
  const std::vector<std::string>& speakers() const { return speaker_order_; }

  bool has_speaker(const std::string& speaker_id) const {
    return speaker_index_.find(speaker_id) != speaker_index_.end();
  }

  /// Record indices of one speaker, in ingestion order.
  const std::vector<std::size_t>& recordings_of(const std::string& speaker_id) const {
    auto it = speaker_index_.find(speaker_id);
    if (it == speaker_index_.end())
      throw ContractError("unknown speaker id: " + speaker_id);
    return it->second;
  }

  /// Validates, normalizes, and appends one record. Rejects zero/non-finite
  /// vectors, duplicate recording ids, and dimension mismatches.
  void add(std::string speaker_id, std::string recording_id,
           std::vector<float> raw_vector, std::optional<float> snr_db = {},
           std::optional<float> duration_s = {}) {
    if (raw_vector.empty())
      throw ContractError("empty embedding vector for recording '" + recording_id + "'");
    if (records_.empty()) {
      dimension_ = raw_vector.size();
    } else if (raw_vector.size() != dimension_) {
      throw ContractError("dimension mismatch for recording '" + recording_id +
                          "': got " + std::to_string(raw_vector.size()) +
                          ", store dimension is " + std::to_string(dimension_));
    }
    if (recording_index_.count(recording_id))
      throw ContractError("duplicate recording id: " + recording_id);

    double sumsq = 0.0;
    for (float v : raw_vector) {
      if (!std::isfinite(v))
        throw ContractError("non-finite component in recording '" + recording_id + "'");
      sumsq += static_cast<double>(v) * static_cast<double>(v);
    }
    const double magnitude = std::sqrt(sumsq);
    if (magnitude <= 0.0)
      throw ContractError("zero-norm embedding vector for recording '" + recording_id + "'");

    EmbeddingRecord rec;
    rec.speaker_id = std::move(speaker_id);
    rec.recording_id = std::move(recording_id);
    rec.unit.resize(raw_vector.size());
    for (std::size_t i = 0; i < raw_vector.size(); ++i)
      rec.unit[i] = static_cast<float>(static_cast<double>(raw_vector[i]) / magnitude);
    rec.raw = std::move(raw_vector);
    rec.raw_magnitude = magnitude;
    rec.snr_db = snr_db;
    rec.duration_s = duration_s;

    auto it = speaker_index_.find(rec.speaker_id);
    if (it == speaker_index_.end()) {
      speaker_order_.push_back(rec.speaker_id);
      it = speaker_index_.emplace(rec.speaker_id, std::vector<std::size_t>{}).first;
    }
    it->second.push_back(records_.size());
    recording_index_.emplace(rec.recording_id, records_.size());
    records_.push_back(std::move(rec));
  }

 private:
  std::size_t dimension_ = 0;
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<std::string, std::size_t> recording_index_;
  std::unordered_map<std::string, std::vector<std::size_t>> speaker_index_;
  std::vector<std::string> speaker_order_;
};

/// Cosine similarity of the stored unit vectors, accumulated in double and
/// clamped to [-1, 1].
inline double cosine(const EmbeddingRecord& a, const EmbeddingRecord& b) {
  if (a.unit.size() != b.unit.size())
    throw ContractError("cosine: dimension mismatch (" +
                        std::to_string(a.unit.size()) + " vs " +
                        std::to_string(b.unit.size()) + ")");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.unit.size(); ++i)
    dot += static_cast<double>(a.unit[i]) * static_cast<double>(b.unit[i]);
  return std::clamp(dot, -1.0, 1.0);
}

enum class StoreFormat { kBinary, kJsonl };

inline StoreFormat store_format_from_string(const std::string& s) {
  if (s == "binary") return StoreFormat::kBinary;
  if (s == "jsonl") return StoreFormat::kJsonl;
  throw ContractError("unknown store format '" + s + "' (expected binary or jsonl)");
}

namespace detail {

// Binary store layout, all integers and floats little-endian:
//   magic "OSIE", u32 version=1, u32 dimension, then per record:
//   u16 speaker-id length + bytes, u16 recording-id length + bytes,
//   dimension f32 vector components, u8 flags (bit0 snr, bit1 duration),
//   optional f32 snr_db, optional f32 duration_s.

inline constexpr char kMagic[4] = {'O', 'S', 'I', 'E'};
inline constexpr std::uint32_t kBinaryVersion = 1;

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& path)
      : data_(data), path_(path) {}

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

  std::uint16_t get_u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(data_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(data_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint8_t get_u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  float get_f32() {
    const std::uint32_t bits = get_u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size())
      throw ContractError("truncated binary store: " + path_);
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace detail

inline EmbeddingStore ingest_binary(const std::string& path) {
  const std::string data = detail::read_file_bytes(path);
  detail::ByteReader r(data, path);
  if (data.size() < 4 || std::memcmp(data.data(), detail::kMagic, 4) != 0)
    throw ContractError("bad magic bytes (not an OSIE store): " + path);
  r.get_bytes(4);
  const std::uint32_t version = r.get_u32();
  if (version != detail::kBinaryVersion)
    throw ContractError("unsupported store version " + std::to_string(version) +
                        " in " + path);
  const std::uint32_t dim = r.get_u32();
  if (dim == 0) throw ContractError("zero dimension in store header: " + path);

  EmbeddingStore store;
  std::size_t index = 0;
  while (!r.at_end()) {
    try {
      const std::string speaker = r.get_bytes(r.get_u16());
      const std::string recording = r.get_bytes(r.get_u16());
      std::vector<float> vec(dim);
      for (std::uint32_t i = 0; i < dim; ++i) vec[i] = r.get_f32();
      const std::uint8_t flags = r.get_u8();
      std::optional<float> snr, dur;
      if (flags & 0x01) snr = r.get_f32();
      if (flags & 0x02) dur = r.get_f32();
      store.add(speaker, recording, std::move(vec), snr, dur);
    } catch (const ContractError& e) {
      throw ContractError("record " + std::to_string(index) + ": " + e.what());
    }
    ++index;
  }
  return store;
}

inline EmbeddingStore ingest_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open file: " + path);
  EmbeddingStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      if (!j.is_object() || !j.contains("speaker") || !j.contains("recording") ||
          !j.contains("vector"))
        throw ContractError("expected object with speaker, recording, vector");
      std::vector<float> vec;
      for (const auto& v : j.at("vector"))
        vec.push_back(static_cast<float>(v.get<double>()));
      std::optional<float> snr, dur;
      if (j.contains("snr_db") && !j.at("snr_db").is_null())
        snr = static_cast<float>(j.at("snr_db").get<double>());
      if (j.contains("duration_s") && !j.at("duration_s").is_null())
        dur = static_cast<float>(j.at("duration_s").get<double>());
      store.add(j.at("speaker").get<std::string>(),
                j.at("recording").get<std::string>(), std::move(vec), snr, dur);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("line " + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const ContractError& e) {
      throw ContractError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

inline EmbeddingStore ingest(const std::string& path, StoreFormat format) {
  return format == StoreFormat::kBinary ? ingest_binary(path) : ingest_jsonl(path);
}

inline std::string serialize_binary(const EmbeddingStore& store) {
  std::string out;
  out.append(detail::kMagic, 4);
  detail::put_u32(out, detail::kBinaryVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(store.dimension()));
  for (const EmbeddingRecord& rec : store.records()) {
    if (rec.speaker_id.size() > 0xffff || rec.recording_id.size() > 0xffff)
      throw ContractError("id longer than 65535 bytes: " + rec.recording_id);
    detail::put_u16(out, static_cast<std::uint16_t>(rec.speaker_id.size()));
    out += rec.speaker_id;
    detail::put_u16(out, static_cast<std::uint16_t>(rec.recording_id.size()));
    out += rec.recording_id;
    for (float v : rec.raw) detail::put_f32(out, v);
    std::uint8_t flags = 0;
    if (rec.snr_db) flags |= 0x01;
    if (rec.duration_s) flags |= 0x02;
    out.push_back(static_cast<char>(flags));
    if (rec.snr_db) detail::put_f32(out, *rec.snr_db);
    if (rec.duration_s) detail::put_f32(out, *rec.duration_s);
  }
  return out;
}

inline void write_binary(const EmbeddingStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  const std::string bytes = serialize_binary(store);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ContractError("write failed: " + path);
}

inline void write_jsonl(const EmbeddingStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write file: " + path);
  for (const EmbeddingRecord& rec : store.records()) {
    nlohmann::ordered_json j;
    j["speaker"] = rec.speaker_id;
    j["recording"] = rec.recording_id;
    j["vector"] = rec.raw;
    if (rec.snr_db) j["snr_db"] = *rec.snr_db;
    if (rec.duration_s) j["duration_s"] = *rec.duration_s;
    out << j.dump() << "\n";
  }
  if (!out) throw ContractError("write failed: " + path);
}

}  // namespace osi
