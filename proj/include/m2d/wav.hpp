#pragma once

#include <string>
#include <vector>

namespace m2d {

struct WavData {
  int sample_rate = 0;
  std::vector<double> samples;
};

// Reads a single-channel RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE
// float samples. Anything else (stereo, other codecs, truncated chunks) is a
// DataError. Resampling is out of scope: pass expected_rate to reject files
// recorded at a different rate.
WavData read_wav(const std::string& path);
WavData read_wav(const std::string& path, int expected_rate);

// 16-bit PCM writer; samples are clamped to [-1, 1] before quantization.
void write_wav_pcm16(const std::string& path, const std::vector<double>& samples,
                     int sample_rate);

}  // namespace m2d
