#include "probebench/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "probebench/error.hpp"

namespace probebench::audio {

namespace {

std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

bool tag_is(std::span<const std::uint8_t> b, std::size_t at, const char* tag) {
  return std::memcmp(b.data() + at, tag, 4) == 0;
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

double bessel_i0(double x) {
  // Power series; converges quickly for the arguments a Kaiser window needs.
  double sum = 1.0;
  double term = 1.0;
  const double half_sq = 0.25 * x * x;
  for (int k = 1; k < 200; ++k) {
    term *= half_sq / (static_cast<double>(k) * k);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

constexpr double kKaiserBeta = 8.6;
constexpr std::size_t kTapsPerPhase = 64;
constexpr double kCutoffFraction = 0.97;
constexpr std::uint64_t kMaxTablePhases = 4096;

/// Polyphase bank for the rational ratio up/down (already reduced).
class PolyphaseResampler {
 public:
  PolyphaseResampler(std::uint64_t up, std::uint64_t down) : up_(up), down_(down) {
    if (up_ >= down_) {
      cutoff_ = kCutoffFraction;
      taps_ = kTapsPerPhase;
    } else {
      const double ratio = static_cast<double>(up_) / static_cast<double>(down_);
      cutoff_ = kCutoffFraction * ratio;
      taps_ = static_cast<std::size_t>(std::ceil(kTapsPerPhase / ratio));
      taps_ += taps_ % 2;
    }
    half_ = taps_ / 2;
    i0_beta_ = bessel_i0(kKaiserBeta);
    if (up_ <= kMaxTablePhases) {
      table_.resize(up_ * taps_);
      for (std::uint64_t p = 0; p < up_; ++p) fill_phase(p, table_.data() + p * taps_);
    }
  }

  std::vector<float> run(std::span<const float> input, std::size_t out_len) const {
    std::vector<float> output(out_len);
    std::vector<double> scratch(table_.empty() ? taps_ : 0);
    const auto n_in = static_cast<std::int64_t>(input.size());
    for (std::size_t n = 0; n < out_len; ++n) {
      const std::uint64_t pos = static_cast<std::uint64_t>(n) * down_;
      const auto base = static_cast<std::int64_t>(pos / up_);
      const std::uint64_t phase = pos % up_;
      const double* h = nullptr;
      if (table_.empty()) {
        fill_phase(phase, scratch.data());
        h = scratch.data();
      } else {
        h = table_.data() + phase * taps_;
      }
      const std::int64_t first = base - static_cast<std::int64_t>(half_) + 1;
      double acc = 0.0;
      for (std::size_t j = 0; j < taps_; ++j) {
        const std::int64_t idx = first + static_cast<std::int64_t>(j);
        if (idx < 0 || idx >= n_in) continue;
        acc += h[j] * input[static_cast<std::size_t>(idx)];
      }
      output[n] = static_cast<float>(acc);
    }
    return output;
  }

 private:
  void fill_phase(std::uint64_t phase, double* h) const {
    const double frac = static_cast<double>(phase) / static_cast<double>(up_);
    double sum = 0.0;
    for (std::size_t j = 0; j < taps_; ++j) {
      // Distance from the output instant to input sample (first + j).
      const double tau = static_cast<double>(j) - static_cast<double>(half_) + 1.0 - frac;
      const double r = tau / static_cast<double>(half_);
      double w = 0.0;
      if (std::abs(r) <= 1.0) w = bessel_i0(kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta_;
      const double arg = M_PI * cutoff_ * tau;
      const double sinc = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      h[j] = cutoff_ * sinc * w;
      sum += h[j];
    }
    for (std::size_t j = 0; j < taps_; ++j) h[j] /= sum;
  }

  std::uint64_t up_;
  std::uint64_t down_;
  double cutoff_ = 1.0;
  std::size_t taps_ = 0;
  std::size_t half_ = 0;
  double i0_beta_ = 1.0;
  std::vector<double> table_;
};

}  // namespace

void validate(const AudioClip& clip) {
  if (clip.sample_rate == 0) throw ValidationError("audio clip '" + clip.source_id + "' has sample rate 0");
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    if (!std::isfinite(clip.samples[i])) {
      throw ValidationError("audio clip '" + clip.source_id + "' has a non-finite sample at index " +
                            std::to_string(i));
    }
  }
}

AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id) {
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError("wav decode" + (source_id.empty() ? std::string() : " '" + source_id + "'") +
                       ": " + what);
  };
  if (bytes.size() < 12) throw fail("truncated RIFF header");
  if (!tag_is(bytes, 0, "RIFF")) throw fail("missing RIFF magic");
  if (!tag_is(bytes, 8, "WAVE")) throw fail("missing WAVE form type");

  bool have_fmt = false;
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t block_align = 0;
  std::uint16_t bits = 0;
  std::span<const std::uint8_t> data;
  bool have_data = false;

  std::size_t at = 12;
  while (at + 8 <= bytes.size()) {
    const std::uint32_t chunk_size = read_u32(bytes, at + 4);
    const std::size_t body = at + 8;
    if (chunk_size > bytes.size() - body) {
      throw fail(std::string("chunk '") + std::string(reinterpret_cast<const char*>(bytes.data() + at), 4) +
                 "' truncated");
    }
    if (tag_is(bytes, at, "fmt ")) {
      if (chunk_size < 16) throw fail("fmt chunk shorter than 16 bytes");
      format = read_u16(bytes, body);
      channels = read_u16(bytes, body + 2);
      rate = read_u32(bytes, body + 4);
      block_align = read_u16(bytes, body + 12);
      bits = read_u16(bytes, body + 14);
      if (format == kFormatExtensible) {
        if (chunk_size < 40) throw fail("extensible fmt chunk shorter than 40 bytes");
        format = read_u16(bytes, body + 24);
      }
      have_fmt = true;
    } else if (tag_is(bytes, at, "data")) {
      data = bytes.subspan(body, chunk_size);
      have_data = true;
    }
    at = body + chunk_size + (chunk_size & 1u);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (!have_data) throw fail("missing data chunk");
  if (channels == 0) throw fail("zero channels");
  if (rate == 0) throw fail("zero sample rate");
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw fail("unsupported codec (format tag " + std::to_string(format) + ", " +
               std::to_string(bits) + " bits); need PCM16 or float32");
  }
  const std::size_t sample_bytes = bits / 8;
  if (block_align != channels * sample_bytes) throw fail("block align disagrees with channel count");
  const std::size_t n_frames = data.size() / block_align;
  if (n_frames == 0) throw fail("zero-length data chunk");

  AudioClip clip;
  clip.sample_rate = rate;
  clip.source_id = std::move(source_id);
  clip.samples.resize(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = i * block_align + c * sample_bytes;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(data, off)) / 32768.0;
      } else {
        std::uint32_t raw = read_u32(data, off);
        float v;
        std::memcpy(&v, &raw, sizeof v);
        acc += v;
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  validate(clip);
  return clip;
}

AudioClip read_wav_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open audio file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding) {
  const bool pcm = encoding == WavEncoding::pcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, pcm ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, clip.sample_rate);
  put_u32(out, clip.sample_rate * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (float s : clip.samples) {
    if (pcm) {
      const double scaled = std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
    } else {
      std::uint32_t raw;
      std::memcpy(&raw, &s, sizeof raw);
      put_u32(out, raw);
    }
  }
  return out;
}

void write_wav_file(const std::string& path, const AudioClip& clip, WavEncoding encoding) {
  const auto bytes = encode_wav(clip, encoding);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write audio file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AudioClip resample(const AudioClip& clip, std::uint32_t target_rate) {
  if (target_rate == 0) throw ValidationError("resample: target rate must be positive");
  if (clip.sample_rate == 0) throw ValidationError("resample: source rate must be positive");
  if (clip.sample_rate == target_rate) return clip;

  const std::uint64_t g = std::gcd<std::uint64_t, std::uint64_t>(clip.sample_rate, target_rate);
  const std::uint64_t up = target_rate / g;
  const std::uint64_t down = clip.sample_rate / g;
  const std::uint64_t len = clip.samples.size();
  const std::size_t out_len = static_cast<std::size_t>((2 * len * up + down) / (2 * down));

  AudioClip out;
  out.sample_rate = target_rate;
  out.source_id = clip.source_id;
  out.samples = PolyphaseResampler(up, down).run(clip.samples, out_len);
  return out;
}

AudioClip reinterpret_rate(const AudioClip& clip, std::uint32_t declared_rate) {
  if (declared_rate == 0) throw ValidationError("reinterpret_rate: declared rate must be positive");
  AudioClip out = clip;
  out.sample_rate = declared_rate;
  return out;
}

AudioClip center_pad(const AudioClip& clip, std::size_t target_samples) {
  const std::size_t len = clip.samples.size();
  if (target_samples < len) {
    throw ValidationError("center_pad: target " + std::to_string(target_samples) +
                          " is shorter than clip length " + std::to_string(len));
  }
  const std::size_t left = (target_samples - len) / 2;
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.source_id = clip.source_id;
  out.samples.assign(target_samples, 0.0f);
  std::copy(clip.samples.begin(), clip.samples.end(), out.samples.begin() + static_cast<std::ptrdiff_t>(left));
  return out;
}

FrameSet frame(const AudioClip& clip, std::size_t window_samples, const FrameOptions& options) {
  if (window_samples == 0) throw ValidationError("frame: window must be at least one sample");
  const std::size_t len = clip.samples.size();
  if (len == 0) throw ValidationError("frame: clip '" + clip.source_id + "' is empty");

  FrameSet set;
  set.window_samples = window_samples;
  set.hop_samples = window_samples;
  if (len < window_samples) {
    set.frames.push_back(center_pad(clip, window_samples).samples);
    set.real_samples.push_back(len);
    set.pad_left.push_back((window_samples - len) / 2);
    return set;
  }
  const std::size_t full = len / window_samples;
  const std::size_t rest = len % window_samples;
  for (std::size_t f = 0; f < full; ++f) {
    const auto begin = clip.samples.begin() + static_cast<std::ptrdiff_t>(f * window_samples);
    set.frames.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(window_samples));
    set.real_samples.push_back(window_samples);
    set.pad_left.push_back(0);
  }
  if (rest > 0 && static_cast<double>(rest) >= options.min_trailing_fraction * static_cast<double>(window_samples)) {
    std::vector<float> tail(window_samples, 0.0f);
    std::copy(clip.samples.end() - static_cast<std::ptrdiff_t>(rest), clip.samples.end(), tail.begin());
    set.frames.push_back(std::move(tail));
    set.real_samples.push_back(rest);
    set.pad_left.push_back(0);
  }
  return set;
}

}  // namespace probebench::audio
