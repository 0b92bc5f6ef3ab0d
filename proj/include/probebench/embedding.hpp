#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "probebench/audio.hpp"

namespace probebench::embedding {

enum class ResampleMode {
  resample,     ///< band-limited conversion to the provider's native rate
  reinterpret,  ///< feed the buffer as if it were recorded at the native rate
};

std::string to_string(ResampleMode mode);
ResampleMode parse_resample_mode(const std::string& text);

/// Static description of an embedding model: how audio must be prepared for
/// it and how wide its output is.
struct ProviderSpec {
  std::string name;
  std::uint32_t native_rate = 16000;
  double window_seconds = 1.0;
  std::size_t embedding_dim = 1;
  ResampleMode resample_mode = ResampleMode::resample;

  std::size_t window_samples() const;
  void validate() const;

  friend bool operator==(const ProviderSpec&, const ProviderSpec&) = default;
};

/// Known model presets (window length and width of published backbones).
/// Recognised names: perch, birdnet-2.2, birdnet-2.3, audiomae, yamnet, vggish,
/// reference.
std::optional<ProviderSpec> provider_preset(const std::string& name);

using EmbeddingVector = std::vector<float>;

/// Frozen per-example representation produced by one provider.
struct EmbeddingTable {
  ProviderSpec provider;
  std::map<std::string, EmbeddingVector> rows;

  std::size_t dim() const { return provider.embedding_dim; }
  std::size_t size() const { return rows.size(); }
  const EmbeddingVector& at(const std::string& id) const;

  /// Throws unless every row has `dim()` finite values.
  void validate() const;

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

/// Anything that maps one audio window to a vector.
class FrameEmbedder {
 public:
  virtual ~FrameEmbedder() = default;

  virtual EmbeddingVector embed_frame(std::span<const float> frame, std::uint32_t rate) = 0;

  /// Batch entry point; the default loops over `embed_frame`.
  virtual std::vector<EmbeddingVector> embed_frames(const std::vector<std::vector<float>>& frames,
                                                    std::uint32_t rate);

  /// True when concurrent calls from several threads are safe.
  virtual bool reentrant() const { return false; }
};

/// Elementwise mean. Throws on an empty list or ragged dimensions.
EmbeddingVector mean_pool(std::span<const EmbeddingVector> frame_vectors);

/// Rate-adjusts, frames, embeds, and mean-pools one clip. Every returned
/// frame vector is checked against `spec.embedding_dim`; failures name the
/// frame index.
EmbeddingVector embed_example(FrameEmbedder& provider, const ProviderSpec& spec,
                              const audio::AudioClip& clip,
                              const audio::FrameOptions& frame_options = {});

// ---------------------------------------------------------------------------
// Reference provider

inline constexpr std::size_t kMelBands = 64;
inline constexpr std::size_t kReferenceDim = 4 * kMelBands;
inline constexpr double kLogMelFloor = 1e-10;
inline constexpr double kMelMinHz = 60.0;

/// Log-mel statistics in double precision: 64 band means, then standard
/// deviations, minima, maxima (256 values). STFT uses 25 ms Hann windows with
/// a 10 ms hop; bands span 60 Hz to Nyquist on the HTK mel scale.
std::vector<double> log_mel_statistics(std::span<const float> frame, std::uint32_t rate);

/// `log_mel_statistics` rounded to f32.
EmbeddingVector reference_embed(std::span<const float> frame, std::uint32_t rate);

class ReferenceEmbedder final : public FrameEmbedder {
 public:
  EmbeddingVector embed_frame(std::span<const float> frame, std::uint32_t rate) override {
    return reference_embed(frame, rate);
  }
  bool reentrant() const override { return true; }
};

/// Spec for the reference provider at the given rate and window.
ProviderSpec reference_spec(std::uint32_t native_rate = 16000, double window_seconds = 1.0);

/// Returns the frame itself as the embedding. With a window of `dim` samples
/// this lets precomputed vectors flow through the full audio pipeline.
class IdentityEmbedder final : public FrameEmbedder {
 public:
  EmbeddingVector embed_frame(std::span<const float> frame, std::uint32_t) override {
    return {frame.begin(), frame.end()};
  }
  bool reentrant() const override { return true; }
};

ProviderSpec identity_spec(std::size_t dim, std::uint32_t native_rate = 16000);

// ---------------------------------------------------------------------------
// External provider (child process, newline-delimited JSON over stdio)

struct CommandSpec {
  std::string command;  ///< run through /bin/sh -c
  std::size_t expected_dim = 0;
  std::chrono::milliseconds timeout{60000};  ///< per read/write inactivity limit
};

/// Long-lived child process speaking the embedder wire protocol.
class ExternalEmbedder final : public FrameEmbedder {
 public:
  explicit ExternalEmbedder(CommandSpec spec);
  ~ExternalEmbedder() override;
  ExternalEmbedder(const ExternalEmbedder&) = delete;
  ExternalEmbedder& operator=(const ExternalEmbedder&) = delete;

  EmbeddingVector embed_frame(std::span<const float> frame, std::uint32_t rate) override;
  std::vector<EmbeddingVector> embed_frames(const std::vector<std::vector<float>>& frames,
                                            std::uint32_t rate) override;

 private:
  class Session;
  CommandSpec spec_;
  std::unique_ptr<Session> session_;
};

/// One-shot bridge: starts the command, sends every frame, returns vectors in
/// request order, then closes the child.
std::vector<EmbeddingVector> external_embed(const CommandSpec& command,
                                            const std::vector<std::vector<float>>& frames,
                                            std::uint32_t rate);

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::uint32_t kTableFormatVersion = 1;

std::vector<std::uint8_t> serialize_table(const EmbeddingTable& table);
/// Parses the binary layout; provider metadata other than dim is left at the
/// values in `provider_hint` (its dim must agree with the header when set).
EmbeddingTable parse_table(std::span<const std::uint8_t> bytes,
                           const std::optional<ProviderSpec>& provider_hint = std::nullopt);

/// Writes `path` and a `path.meta.json` sidecar holding the ProviderSpec.
void write_table(const EmbeddingTable& table, const std::string& path);
EmbeddingTable read_table(const std::string& path);

void export_table_csv(const EmbeddingTable& table, const std::string& path);

/// Keeps the first `dims` coordinates of every row.
EmbeddingTable truncate_dims(const EmbeddingTable& table, std::size_t dims);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace probebench::embedding
