#pragma once

// Mono 16-bit PCM little-endian RIFF/WAVE reader and writer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssem {

struct WavError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Audio {
  std::uint32_t sample_rate = 16000;
  std::vector<double> samples;  // [-1, 1)
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

inline Audio parse_wav(std::span<const unsigned char> bytes) {
  using detail::read_u16le;
  using detail::read_u32le;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw WavError("not a RIFF/WAVE file");
  }
  Audio audio;
  bool have_fmt = false, have_data = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32le(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw WavError("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw WavError("short fmt chunk");
      const std::uint16_t format = read_u16le(bytes.data() + body);
      const std::uint16_t channels = read_u16le(bytes.data() + body + 2);
      audio.sample_rate = read_u32le(bytes.data() + body + 4);
      const std::uint16_t bits = read_u16le(bytes.data() + body + 14);
      if (format != 1) throw WavError("only PCM WAV is supported");
      if (channels != 1) throw WavError("only mono WAV is supported (got " + std::to_string(channels) + " channels)");
      if (bits != 16) throw WavError("only 16-bit WAV is supported (got " + std::to_string(bits) + " bits)");
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) throw WavError("data chunk before fmt chunk");
      audio.samples.resize(size / 2);
      for (std::size_t i = 0; i < audio.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(read_u16le(bytes.data() + body + 2 * i));
        audio.samples[i] = static_cast<double>(v) / 32768.0;
      }
      have_data = true;
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt || !have_data) throw WavError("missing fmt or data chunk");
  return audio;
}

inline Audio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

inline std::int16_t to_pcm16(double x) {
  const double s = std::nearbyint(std::clamp(x, -1.0, 1.0) * 32768.0);
  return static_cast<std::int16_t>(std::clamp(s, -32768.0, 32767.0));
}

inline std::vector<unsigned char> encode_wav(const Audio& audio) {
  using detail::put_u16le;
  using detail::put_u32le;
  const auto data_bytes = static_cast<std::uint32_t>(audio.samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32le(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32le(out, 16);
  put_u16le(out, 1);
  put_u16le(out, 1);
  put_u32le(out, audio.sample_rate);
  put_u32le(out, audio.sample_rate * 2);
  put_u16le(out, 2);
  put_u16le(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32le(out, data_bytes);
  for (double s : audio.samples) put_u16le(out, static_cast<std::uint16_t>(to_pcm16(s)));
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Audio& audio) {
  const auto bytes = encode_wav(audio);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WavError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ssem
