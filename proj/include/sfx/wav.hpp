#pragma once

// Minimal RIFF/WAVE reader and writer: PCM 16-bit and IEEE float 32-bit.
// Multichannel input is downmixed to mono by averaging.

#include "sfx/dsp.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace sfx {

enum class WavFormat { pcm16, float32 };

struct WavInfo {
  int channels = 1;
  int sample_rate = 0;
  int bits_per_sample = 0;
  WavFormat format = WavFormat::pcm16;
  bool downmixed = false;
};

namespace detail {

inline std::uint32_t read_u32(const std::vector<unsigned char>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}
inline std::uint16_t read_u16(const std::vector<unsigned char>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace detail

inline AudioBuffer read_wav(const std::filesystem::path& path, WavInfo* info = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& what, std::size_t offset) {
    throw IoError(path.string() + ": " + what + " at byte offset " + std::to_string(offset));
  };
  if (bytes.size() < 12) fail("truncated RIFF header", bytes.size());
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) fail("missing RIFF tag", 0);
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) fail("missing WAVE tag", 8);

  WavInfo wi;
  bool have_fmt = false;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_len = detail::read_u32(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_len > bytes.size()) fail("chunk extends past end of file", pos);
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (chunk_len < 16) fail("fmt chunk too short", pos);
      std::uint16_t tag = detail::read_u16(bytes, body);
      wi.channels = detail::read_u16(bytes, body + 2);
      wi.sample_rate = static_cast<int>(detail::read_u32(bytes, body + 4));
      wi.bits_per_sample = detail::read_u16(bytes, body + 14);
      if (tag == 0xFFFE && chunk_len >= 26) tag = detail::read_u16(bytes, body + 24);  // extensible
      if (tag == 1 && wi.bits_per_sample == 16) {
        wi.format = WavFormat::pcm16;
      } else if (tag == 3 && wi.bits_per_sample == 32) {
        wi.format = WavFormat::float32;
      } else {
        fail("unsupported sample format (need PCM16 or float32)", body);
      }
      if (wi.channels < 1) fail("zero channels", body + 2);
      if (wi.sample_rate <= 0) fail("invalid sample rate", body + 4);
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data_off = body;
      data_len = chunk_len;
    }
    pos = body + chunk_len + (chunk_len & 1u);
  }
  if (!have_fmt) fail("missing fmt chunk", 12);
  if (data_off == 0) fail("missing data chunk", 12);

  const std::size_t width = static_cast<std::size_t>(wi.bits_per_sample / 8);
  const std::size_t frame_bytes = width * static_cast<std::size_t>(wi.channels);
  if (data_len % frame_bytes != 0) fail("data chunk is not a whole number of frames", data_off);
  const std::size_t frames = data_len / frame_bytes;

  AudioBuffer out;
  out.sample_rate = wi.sample_rate;
  out.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (int c = 0; c < wi.channels; ++c) {
      const std::size_t off = data_off + f * frame_bytes + static_cast<std::size_t>(c) * width;
      if (wi.format == WavFormat::pcm16) {
        acc += static_cast<std::int16_t>(detail::read_u16(bytes, off)) / 32768.0;
      } else {
        const std::uint32_t raw = detail::read_u32(bytes, off);
        float v;
        std::memcpy(&v, &raw, sizeof v);
        if (!std::isfinite(v)) fail("non-finite float sample", off);
        acc += v;
      }
    }
    out.samples[f] = acc / wi.channels;
  }
  wi.downmixed = wi.channels > 1;
  if (info) *info = wi;
  return out;
}

inline void write_wav(const std::filesystem::path& path, const AudioBuffer& audio,
                      WavFormat format = WavFormat::float32) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open WAV file for writing: " + path.string());
  const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(audio.size() * (bits / 8));
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::put_u32(os, 16);
  detail::put_u16(os, format == WavFormat::pcm16 ? 1 : 3);
  detail::put_u16(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(audio.sample_rate));
  detail::put_u32(os, static_cast<std::uint32_t>(audio.sample_rate) * (bits / 8));
  detail::put_u16(os, bits / 8);
  detail::put_u16(os, bits);
  os.write("data", 4);
  detail::put_u32(os, data_len);
  for (double s : audio.samples) {
    if (format == WavFormat::pcm16) {
      const double clamped = std::clamp(s, -1.0, 32767.0 / 32768.0);
      detail::put_u16(os, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clamped * 32768.0))));
    } else {
      const float v = static_cast<float>(s);
      std::uint32_t raw;
      std::memcpy(&raw, &v, sizeof raw);
      detail::put_u32(os, raw);
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace sfx
