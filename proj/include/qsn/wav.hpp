// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal RIFF/WAVE reader and writer. Reads 16-bit PCM and 32-bit IEEE
// float (plain or WAVE_FORMAT_EXTENSIBLE), any channel count. Writes 16-bit
// PCM only.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "qsn/error.hpp"

namespace qsn::wav {

struct WavData {
  int sample_rate = 0;
  int channels = 0;
  // Interleaved, scaled to [-1, 1].
  std::vector<double> interleaved;

  size_t frames() const {
    return channels > 0 ? interleaved.size() / static_cast<size_t>(channels) : 0;
  }
};

namespace internal {

inline uint32_t ReadU32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint16_t ReadU16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline void PutU32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void PutU16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace internal

inline WavData Decode(const std::vector<unsigned char>& bytes, const std::string& origin) {
  using internal::ReadU16;
  using internal::ReadU32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    Fail(ErrorCode::kUnreadableFile, origin + ": not a RIFF/WAVE file");
  }
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  size_t data_size = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    uint32_t size = ReadU32(chunk + 4);
    size_t body = pos + 8;
    size_t avail = bytes.size() - body;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) {
        Fail(ErrorCode::kUnreadableFile, origin + ": truncated fmt chunk");
      }
      format = ReadU16(chunk + 8);
      channels = ReadU16(chunk + 10);
      rate = ReadU32(chunk + 12);
      bits = ReadU16(chunk + 22);
      if (format == 0xFFFE) {
        if (size < 40 || avail < 40) {
          Fail(ErrorCode::kUnreadableFile, origin + ": truncated extensible fmt chunk");
        }
        format = ReadU16(chunk + 8 + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      // Tolerate writers that leave the data size unpatched.
      data_size = std::min<size_t>(size, avail);
      break;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt) Fail(ErrorCode::kUnreadableFile, origin + ": missing fmt chunk");
  if (data == nullptr) Fail(ErrorCode::kUnreadableFile, origin + ": missing data chunk");
  if (channels == 0 || rate == 0) {
    Fail(ErrorCode::kUnsupportedEncoding, origin + ": zero channels or sample rate");
  }
  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32) {
    Fail(ErrorCode::kUnsupportedEncoding,
         origin + ": format " + std::to_string(format) + " with " + std::to_string(bits) +
             " bits (need 16-bit PCM or 32-bit float)");
  }

  WavData out;
  out.sample_rate = static_cast<int>(rate);
  out.channels = channels;
  const size_t width = bits / 8;
  const size_t frames = data_size / (width * channels);
  if (frames == 0) Fail(ErrorCode::kEmptyAudio, origin + ": no samples");
  out.interleaved.resize(frames * channels);
  for (size_t i = 0; i < out.interleaved.size(); ++i) {
    const unsigned char* p = data + i * width;
    if (pcm16) {
      out.interleaved[i] = static_cast<int16_t>(ReadU16(p)) / 32768.0;
    } else {
      uint32_t raw = ReadU32(p);
      float f;
      std::memcpy(&f, &raw, sizeof f);
      if (!std::isfinite(f)) {
        Fail(ErrorCode::kUnsupportedEncoding, origin + ": non-finite float sample");
      }
      out.interleaved[i] = std::clamp(static_cast<double>(f), -1.0, 1.0);
    }
  }
  return out;
}

inline WavData Read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kUnreadableFile, path.string() + ": cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return Decode(bytes, path.string());
}

/// Encodes mono samples as 16-bit PCM. Samples are clipped to [-1, 1] and
/// rounded to nearest.
inline std::string EncodePcm16(const std::vector<double>& samples, int sample_rate) {
  using internal::PutU16;
  using internal::PutU32;
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out.append("RIFF");
  PutU32(out, 36 + data_bytes);
  out.append("WAVEfmt ");
  PutU32(out, 16);
  PutU16(out, 1);
  PutU16(out, 1);
  PutU32(out, static_cast<uint32_t>(sample_rate));
  PutU32(out, static_cast<uint32_t>(sample_rate) * 2);
  PutU16(out, 2);
  PutU16(out, 16);
  out.append("data");
  PutU32(out, data_bytes);
  for (double s : samples) {
    // Same 1/32768 scale as the decoder; +1.0 saturates at 32767.
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    PutU16(out, static_cast<uint16_t>(static_cast<int16_t>(scaled)));
  }
  return out;
}

inline void WritePcm16(const std::filesystem::path& path, const std::vector<double>& samples,
                       int sample_rate) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": cannot open for writing");
  const std::string bytes = EncodePcm16(samples, sample_rate);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": write failed");
}

}  // namespace qsn::wav
