#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "probebench/embedding.hpp"
#include "probebench/error.hpp"

namespace probebench::embedding {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

/// Per-rate analysis setup: Hann window, FFTW plan, mel weights.
/// Built once and then only read, so concurrent users share it safely;
/// frames run through fftw_execute_dft_r2c on their own buffers.
struct Analysis {
  std::size_t win = 0;
  std::size_t hop = 0;
  std::size_t nfft = 0;
  std::vector<double> window;
  // Sparse triangular filters: per band, first bin and weights.
  std::vector<std::size_t> band_first;
  std::vector<std::vector<double>> band_weights;
  fftw_plan plan = nullptr;

  Analysis(std::uint32_t rate) {
    win = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.025 * rate)));
    hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.010 * rate)));
    nfft = next_pow2(win);
    window.resize(win);
    for (std::size_t i = 0; i < win; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);

    const std::size_t n_bins = nfft / 2 + 1;
    const double nyquist = rate / 2.0;
    const double mel_lo = hz_to_mel(kMelMinHz);
    const double mel_hi = hz_to_mel(nyquist);
    std::vector<double> edges(kMelBands + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
      edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMelBands + 1));
    }
    const double bin_hz = static_cast<double>(rate) / nfft;
    band_first.resize(kMelBands);
    band_weights.resize(kMelBands);
    for (std::size_t b = 0; b < kMelBands; ++b) {
      const double lo = edges[b], centre = edges[b + 1], hi = edges[b + 2];
      std::vector<double> w(n_bins, 0.0);
      for (std::size_t k = 0; k < n_bins; ++k) {
        const double f = k * bin_hz;
        if (f > lo && f < hi) w[k] = f <= centre ? (f - lo) / (centre - lo) : (hi - f) / (hi - centre);
      }
      auto first = std::find_if(w.begin(), w.end(), [](double x) { return x > 0.0; });
      if (first == w.end()) {
        // Band narrower than one bin: take the bin nearest its centre.
        const auto k = std::min(n_bins - 1, static_cast<std::size_t>(std::llround(centre / bin_hz)));
        band_first[b] = k;
        band_weights[b] = {1.0};
        continue;
      }
      auto last = std::find_if(w.rbegin(), w.rend(), [](double x) { return x > 0.0; }).base();
      band_first[b] = static_cast<std::size_t>(first - w.begin());
      band_weights[b].assign(first, last);
    }

    std::unique_ptr<double, FftwDeleter> in(static_cast<double*>(fftw_malloc(sizeof(double) * nfft)));
    std::unique_ptr<fftw_complex, FftwDeleter> out(
        static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_bins)));
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in.get(), out.get(), FFTW_ESTIMATE);
  }

  Analysis(const Analysis&) = delete;
  Analysis& operator=(const Analysis&) = delete;
};

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

const Analysis& analysis_for(std::uint32_t rate) {
  static std::map<std::uint32_t, std::unique_ptr<Analysis>> cache;
  std::lock_guard lock(planner_mutex());
  auto& slot = cache[rate];
  if (!slot) slot = std::make_unique<Analysis>(rate);
  return *slot;
}

}  // namespace

std::vector<double> log_mel_statistics(std::span<const float> frame, std::uint32_t rate) {
  if (frame.empty()) throw ValidationError("reference_embed: empty frame");
  if (rate == 0) throw ValidationError("reference_embed: rate must be positive");
  const Analysis& a = analysis_for(rate);

  const std::size_t n = std::max(frame.size(), a.win);
  const std::size_t n_windows = 1 + (n - a.win) / a.hop;
  const std::size_t n_bins = a.nfft / 2 + 1;

  std::unique_ptr<double, FftwDeleter> in(static_cast<double*>(fftw_malloc(sizeof(double) * a.nfft)));
  std::unique_ptr<fftw_complex, FftwDeleter> out(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_bins)));
  std::vector<double> power(n_bins);

  // Log-mel energies, one row of kMelBands per STFT window.
  std::vector<double> logmel(n_windows * kMelBands);
  for (std::size_t w = 0; w < n_windows; ++w) {
    const std::size_t start = w * a.hop;
    std::fill(in.get(), in.get() + a.nfft, 0.0);
    for (std::size_t i = 0; i < a.win; ++i) {
      const std::size_t idx = start + i;
      if (idx < frame.size()) in.get()[i] = a.window[i] * frame[idx];
    }
    fftw_execute_dft_r2c(a.plan, in.get(), out.get());
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double re = out.get()[k][0], im = out.get()[k][1];
      power[k] = re * re + im * im;
    }
    for (std::size_t b = 0; b < kMelBands; ++b) {
      double e = 0.0;
      const auto& weights = a.band_weights[b];
      for (std::size_t j = 0; j < weights.size(); ++j) e += weights[j] * power[a.band_first[b] + j];
      logmel[w * kMelBands + b] = std::log(std::max(e, kLogMelFloor));
    }
  }

  std::vector<double> features(kReferenceDim);
  const double count = static_cast<double>(n_windows);
  for (std::size_t b = 0; b < kMelBands; ++b) {
    double sum = 0.0, lo = INFINITY, hi = -INFINITY;
    for (std::size_t w = 0; w < n_windows; ++w) {
      const double v = logmel[w * kMelBands + b];
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    double mean = sum / count;
    double sd = 0.0;
    if (lo == hi) {
      mean = lo;
    } else {
      double sq = 0.0;
      for (std::size_t w = 0; w < n_windows; ++w) {
        const double d = logmel[w * kMelBands + b] - mean;
        sq += d * d;
      }
      sd = std::sqrt(sq / count);
    }
    features[b] = mean;
    features[kMelBands + b] = sd;
    features[2 * kMelBands + b] = lo;
    features[3 * kMelBands + b] = hi;
  }
  return features;
}

EmbeddingVector reference_embed(std::span<const float> frame, std::uint32_t rate) {
  const auto features = log_mel_statistics(frame, rate);
  return EmbeddingVector(features.begin(), features.end());
}

}  // namespace probebench::embedding
