#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "masr/matrix.hpp"

namespace masr::features {

// T x F log-mel energies (natural log). Stored as f32.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t frames, std::size_t bins);
  explicit FeatureMatrix(Matrix<float> values);

  std::size_t frames() const { return values_.rows(); }
  std::size_t bins() const { return values_.cols(); }
  const Matrix<float>& values() const { return values_; }
  Matrix<float>& values() { return values_; }

  float operator()(std::size_t t, std::size_t f) const { return values_(t, f); }
  float& operator()(std::size_t t, std::size_t f) { return values_(t, f); }

  // Throws masr::Error(numeric/shape) if T or F is zero or any value is non-finite.
  void validate() const;

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;

 private:
  Matrix<float> values_;
};

struct LogmelConfig {
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t mel_bins = 40;
  double floor = 1e-10;
};

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;
};

std::size_t frame_length(int sample_rate, const LogmelConfig& config);
std::size_t hop_length(int sample_rate, const LogmelConfig& config);
std::size_t fft_size(std::size_t frame_len);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// HTK mel scale, triangular filters spanning 0 Hz to Nyquist.
// Returns mel_bins x (n_fft/2 + 1) weights.
Matrix<double> mel_filterbank(int sample_rate, std::size_t n_fft, std::size_t mel_bins);

// Hann window, power spectrum, mel energies, ln(max(energy, floor)).
FeatureMatrix logmel(std::span<const float> samples, int sample_rate, const LogmelConfig& config = {});

// RIFF/WAVE PCM16 mono only; samples scaled by 1/32768.
Waveform read_wav(const std::filesystem::path& path);
// Interleaved PCM16 writer (multichannel allowed so tests can build rejects).
void write_wav(const std::filesystem::path& path, std::span<const std::int16_t> pcm, int sample_rate,
               int channels = 1);

}  // namespace masr::features
