#include "m2d/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "m2d/errors.hpp"

namespace m2d {

namespace {

uint32_t read_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

uint16_t read_u16(const unsigned char* p) {
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}

}  // namespace

WavData read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open wav file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError("not a RIFF/WAVE file: " + path);
  }

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const unsigned char* data = nullptr;
  size_t data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    uint32_t chunk_len = read_u32(hdr + 4);
    if (pos + 8 + chunk_len > bytes.size())
      throw DataError("truncated wav chunk in " + path);
    const unsigned char* body = hdr + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw DataError("malformed fmt chunk in " + path);
      format = read_u16(body);
      channels = read_u16(body + 2);
      rate = read_u32(body + 4);
      bits = read_u16(body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr)
    throw DataError("wav file missing fmt or data chunk: " + path);
  if (channels != 1)
    throw DataError("expected single-channel audio, got " +
                    std::to_string(channels) + " channels: " + path);

  WavData out;
  out.sample_rate = int(rate);
  if (format == 1 && bits == 16) {
    size_t n = data_len / 2;
    out.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      int16_t v = int16_t(read_u16(data + 2 * i));
      out.samples[i] = double(v) / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    size_t n = data_len / 4;
    out.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
      uint32_t u = read_u32(data + 4 * i);
      float f;
      std::memcpy(&f, &u, 4);
      out.samples[i] = double(f);
    }
  } else {
    throw DataError("unsupported wav encoding (format " + std::to_string(format) +
                    ", " + std::to_string(bits) + " bits): " + path);
  }
  return out;
}

WavData read_wav(const std::string& path, int expected_rate) {
  WavData w = read_wav(path);
  if (w.sample_rate != expected_rate) {
    throw DataError("sample rate mismatch in " + path + ": file has " +
                    std::to_string(w.sample_rate) + " Hz, expected " +
                    std::to_string(expected_rate) +
                    " Hz (resampling not supported)");
  }
  return w;
}

void write_wav_pcm16(const std::string& path, const std::vector<double>& samples,
                     int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write wav file: " + path);

  auto put_u32 = [&](uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8 & 0xff),
                          (unsigned char)(v >> 16 & 0xff),
                          (unsigned char)(v >> 24 & 0xff)};
    out.write(reinterpret_cast<char*>(b), 4);
  };
  auto put_u16 = [&](uint16_t v) {
    unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8 & 0xff)};
    out.write(reinterpret_cast<char*>(b), 2);
  };

  uint32_t data_len = uint32_t(samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(36 + data_len);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(uint32_t(sample_rate));
  put_u32(uint32_t(sample_rate) * 2);  // byte rate
  put_u16(2);                          // block align
  put_u16(16);
  out.write("data", 4);
  put_u32(data_len);
  for (double s : samples) {
    double c = std::clamp(s, -1.0, 1.0);
    int v = int(std::lround(c * 32767.0));
    put_u16(uint16_t(int16_t(v)));
  }
  if (!out) throw IoError("short write to wav file: " + path);
}

}  // namespace m2d
