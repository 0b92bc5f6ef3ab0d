#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace probebench::audio {

/// Mono sample buffer with its declared sample rate.
struct AudioClip {
  std::vector<float> samples;
  std::uint32_t sample_rate = 0;
  std::string source_id;

  double duration_seconds() const {
    return sample_rate == 0 ? 0.0
                            : static_cast<double>(samples.size()) / sample_rate;
  }
};

/// Equal-length windows cut from a clip. `real_samples[i]` counts how many
/// leading/centred samples of frame i came from the clip rather than padding.
struct FrameSet {
  std::vector<std::vector<float>> frames;
  std::size_t window_samples = 0;
  std::size_t hop_samples = 0;
  std::vector<std::size_t> real_samples;
  std::vector<std::size_t> pad_left;
};

struct FrameOptions {
  /// Minimum fraction of real samples a trailing partial frame needs to be kept.
  double min_trailing_fraction = 0.25;
};

/// Throws ValidationError unless rate > 0 and every sample is finite.
void validate(const AudioClip& clip);

/// Decodes a RIFF/WAVE byte buffer (PCM16 or IEEE float32, any channel count).
/// Channels are mean-downmixed; PCM16 is scaled by 1/32768.
AudioClip decode_wav(std::span<const std::uint8_t> bytes, std::string source_id = {});
AudioClip read_wav_file(const std::string& path);

enum class WavEncoding { pcm16, float32 };

/// Mono WAV writer, used for fixtures and round-trip tests.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip,
                                     WavEncoding encoding = WavEncoding::float32);
void write_wav_file(const std::string& path, const AudioClip& clip,
                    WavEncoding encoding = WavEncoding::float32);

/// Band-limited rational resampling (polyphase Kaiser-windowed sinc).
/// Output length is round(len * target / source). Matching rates return the
/// input buffer unchanged.
AudioClip resample(const AudioClip& clip, std::uint32_t target_rate);

/// Relabels the sample rate without touching the buffer.
AudioClip reinterpret_rate(const AudioClip& clip, std::uint32_t declared_rate);

/// Centred zero padding; an odd remainder goes to the right.
AudioClip center_pad(const AudioClip& clip, std::size_t target_samples);

/// Non-overlapping framing. Clips shorter than the window produce one centred
/// frame; a trailing partial frame is right-padded and kept only when its real
/// fraction reaches `options.min_trailing_fraction`.
FrameSet frame(const AudioClip& clip, std::size_t window_samples,
               const FrameOptions& options = {});

}  // namespace probebench::audio
