#include "masr/features.hpp"

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "masr/binary_io.hpp"
#include "masr/error.hpp"

namespace masr::features {

FeatureMatrix::FeatureMatrix(std::size_t frames, std::size_t bins) : values_(frames, bins) {}

FeatureMatrix::FeatureMatrix(Matrix<float> values) : values_(std::move(values)) {}

void FeatureMatrix::validate() const {
  if (frames() == 0 || bins() == 0)
    fail(ErrorKind::shape, "feature matrix must have T >= 1 and F >= 1 (got " + std::to_string(frames()) + "x" +
                               std::to_string(bins()) + ")");
  for (std::size_t t = 0; t < frames(); ++t)
    for (std::size_t f = 0; f < bins(); ++f)
      if (!std::isfinite(values_(t, f)))
        fail(ErrorKind::numeric, "non-finite feature value at frame " + std::to_string(t) + ", bin " +
                                     std::to_string(f));
}

namespace {

void check_rate(int sample_rate) {
  if (sample_rate != 8000 && sample_rate != 16000)
    fail(ErrorKind::unsupported, "unsupported sample rate " + std::to_string(sample_rate) + " Hz (8000 or 16000)");
}

// FFTW planning is not thread-safe; execution with new-array functions is.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    in_ = fftw_alloc_real(n);
    out_ = fftw_alloc_complex(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  // Power spectrum |X_k|^2 for k = 0..n/2.
  void power(std::span<double> out) {
    fftw_execute(plan_);
    for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1];
  }

 private:
  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

}  // namespace

std::size_t frame_length(int sample_rate, const LogmelConfig& config) {
  return static_cast<std::size_t>(std::lround(sample_rate * config.frame_ms / 1000.0));
}

std::size_t hop_length(int sample_rate, const LogmelConfig& config) {
  return static_cast<std::size_t>(std::lround(sample_rate * config.hop_ms / 1000.0));
}

std::size_t fft_size(std::size_t frame_len) {
  std::size_t n = 1;
  while (n < frame_len) n <<= 1;
  return n;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix<double> mel_filterbank(int sample_rate, std::size_t n_fft, std::size_t mel_bins) {
  const std::size_t n_freq = n_fft / 2 + 1;
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(mel_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_hi * static_cast<double>(i) / static_cast<double>(mel_bins + 1));

  Matrix<double> bank(mel_bins, n_freq);
  for (std::size_t m = 0; m < mel_bins; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < n_freq; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > lo && f < center)
        w = (f - lo) / (center - lo);
      else if (f >= center && f < hi)
        w = (hi - f) / (hi - center);
      bank(m, k) = w;
    }
  }
  return bank;
}

FeatureMatrix logmel(std::span<const float> samples, int sample_rate, const LogmelConfig& config) {
  check_rate(sample_rate);
  if (config.mel_bins == 0) fail(ErrorKind::invalid_argument, "mel_bins must be positive");
  if (!(config.floor > 0.0)) fail(ErrorKind::invalid_argument, "log floor must be positive");
  const std::size_t frame_len = frame_length(sample_rate, config);
  const std::size_t hop = hop_length(sample_rate, config);
  if (frame_len == 0 || hop == 0) fail(ErrorKind::invalid_argument, "frame and hop must be positive");
  if (samples.size() < frame_len)
    fail(ErrorKind::shape, "waveform has " + std::to_string(samples.size()) + " samples, shorter than one frame (" +
                               std::to_string(frame_len) + ")");

  const std::size_t frames = 1 + (samples.size() - frame_len) / hop;
  const std::size_t n_fft = fft_size(frame_len);
  const Matrix<double> bank = mel_filterbank(sample_rate, n_fft, config.mel_bins);

  std::vector<double> window(frame_len);
  for (std::size_t i = 0; i < frame_len; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(frame_len - 1));

  RealFft fft(n_fft);
  std::vector<double> power(n_fft / 2 + 1);
  FeatureMatrix out(frames, config.mel_bins);
  for (std::size_t t = 0; t < frames; ++t) {
    double* in = fft.input();
    const std::size_t start = t * hop;
    for (std::size_t i = 0; i < frame_len; ++i) in[i] = window[i] * static_cast<double>(samples[start + i]);
    for (std::size_t i = frame_len; i < n_fft; ++i) in[i] = 0.0;
    fft.power(power);
    for (std::size_t m = 0; m < config.mel_bins; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < power.size(); ++k) e += bank(m, k) * power[k];
      out(t, m) = static_cast<float>(std::log(std::max(e, config.floor)));
    }
  }
  return out;
}

Waveform read_wav(const std::filesystem::path& path) {
  const auto data = io::read_file(path);
  io::ByteReader r(data, "wav '" + path.string() + "'");
  if (!r.tag_matches("RIFF")) fail(ErrorKind::format, "wav '" + path.string() + "': missing RIFF header");
  r.u32();
  if (!r.tag_matches("WAVE")) fail(ErrorKind::format, "wav '" + path.string() + "': missing WAVE tag");

  bool have_fmt = false;
  int channels = 0, bits = 0, sample_rate = 0;
  while (r.remaining() >= 8) {
    const auto id_bytes = r.bytes(4);
    const std::string id(reinterpret_cast<const char*>(id_bytes.data()), 4);
    const std::uint32_t size = r.u32();
    if (id == "fmt ") {
      if (size < 16) fail(ErrorKind::format, "wav '" + path.string() + "': fmt chunk too short");
      io::ByteReader fmt(r.bytes(size), "wav fmt chunk");
      const std::uint16_t format = fmt.u16();
      channels = fmt.u16();
      sample_rate = static_cast<int>(fmt.u32());
      fmt.u32();
      fmt.u16();
      bits = fmt.u16();
      if (format != 1 || bits != 16)
        fail(ErrorKind::unsupported, "wav '" + path.string() + "': only PCM16 is supported (format " +
                                         std::to_string(format) + ", " + std::to_string(bits) + " bits)");
      if (channels != 1)
        fail(ErrorKind::unsupported,
             "wav '" + path.string() + "': expected mono, got channel count " + std::to_string(channels));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail(ErrorKind::format, "wav '" + path.string() + "': data chunk before fmt chunk");
      if (size % 2 != 0) fail(ErrorKind::format, "wav '" + path.string() + "': odd PCM16 data size");
      io::ByteReader pcm(r.bytes(size), "wav data chunk");
      Waveform w;
      w.sample_rate = sample_rate;
      w.samples.resize(size / 2);
      for (auto& s : w.samples) s = static_cast<float>(pcm.i16()) / 32768.0f;
      return w;
    } else {
      r.bytes(size + (size & 1u));
    }
  }
  fail(ErrorKind::format, "wav '" + path.string() + "': no data chunk");
}

void write_wav(const std::filesystem::path& path, std::span<const std::int16_t> pcm, int sample_rate, int channels) {
  io::ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
  w.tag("RIFF");
  w.u32(36 + data_bytes);
  w.tag("WAVE");
  w.tag("fmt ");
  w.u32(16);
  w.u16(1);
  w.u16(static_cast<std::uint16_t>(channels));
  w.u32(static_cast<std::uint32_t>(sample_rate));
  w.u32(static_cast<std::uint32_t>(sample_rate * channels * 2));
  w.u16(static_cast<std::uint16_t>(channels * 2));
  w.u16(16);
  w.tag("data");
  w.u32(data_bytes);
  for (auto s : pcm) w.i16(s);
  io::write_file(path, w.data());
}

}  // namespace masr::features
