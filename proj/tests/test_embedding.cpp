#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "probebench/csv.hpp"
#include "probebench/embedding.hpp"
#include "probebench/error.hpp"
#include "test_support.hpp"

using namespace probebench;
using namespace probebench::embedding;

namespace {

/// Returns a fixed vector per call, in order.
class ScriptedEmbedder final : public FrameEmbedder {
 public:
  explicit ScriptedEmbedder(std::vector<EmbeddingVector> script) : script_(std::move(script)) {}
  EmbeddingVector embed_frame(std::span<const float>, std::uint32_t) override { return script_.at(next_++); }

 private:
  std::vector<EmbeddingVector> script_;
  std::size_t next_ = 0;
};

class CountingEmbedder final : public FrameEmbedder {
 public:
  EmbeddingVector embed_frame(std::span<const float> frame, std::uint32_t rate) override {
    frames.emplace_back(frame.begin(), frame.end());
    rates.push_back(rate);
    return {static_cast<float>(frame.size()), frame.empty() ? 0.0f : frame[0]};
  }
  std::vector<std::vector<float>> frames;
  std::vector<std::uint32_t> rates;
};

audio::AudioClip noise(std::size_t n, std::uint32_t rate, std::uint64_t seed, float amp = 0.3f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, amp);
  audio::AudioClip c;
  c.sample_rate = rate;
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(g(rng));
  return c;
}

// Naive re-derivation of the reference features: direct DFT, dense HTK mel
// weights. Shares only the definitions, not the code.
std::vector<double> naive_log_mel_statistics(const std::vector<float>& x, std::uint32_t rate) {
  const std::size_t win = static_cast<std::size_t>(std::llround(0.025 * rate));
  const std::size_t hop = static_cast<std::size_t>(std::llround(0.010 * rate));
  std::size_t nfft = 1;
  while (nfft < win) nfft *= 2;
  const std::size_t bins = nfft / 2 + 1;
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> edges(66);
  for (std::size_t i = 0; i < 66; ++i) edges[i] = hz(mel(60.0) + (mel(rate / 2.0) - mel(60.0)) * i / 65.0);
  std::vector<std::vector<double>> w(64, std::vector<double>(bins, 0.0));
  for (std::size_t b = 0; b < 64; ++b) {
    bool any = false;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = k * static_cast<double>(rate) / nfft;
      if (f > edges[b] && f < edges[b + 2]) {
        w[b][k] = f <= edges[b + 1] ? (f - edges[b]) / (edges[b + 1] - edges[b])
                                    : (edges[b + 2] - f) / (edges[b + 2] - edges[b + 1]);
        any = any || w[b][k] > 0;
      }
    }
    if (!any) w[b][std::min(bins - 1, static_cast<std::size_t>(std::llround(edges[b + 1] * nfft / rate)))] = 1.0;
  }
  const std::size_t n = std::max(x.size(), win);
  const std::size_t windows = 1 + (n - win) / hop;
  std::vector<std::vector<double>> lm(64);
  for (std::size_t t = 0; t < windows; ++t) {
    std::vector<double> seg(nfft, 0.0);
    for (std::size_t i = 0; i < win; ++i) {
      const std::size_t idx = t * hop + i;
      if (idx < x.size()) seg[i] = x[idx] * (0.5 - 0.5 * std::cos(2 * M_PI * i / win));
    }
    std::vector<double> power(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      double re = 0, im = 0;
      for (std::size_t i = 0; i < nfft; ++i) {
        re += seg[i] * std::cos(2 * M_PI * k * i / nfft);
        im -= seg[i] * std::sin(2 * M_PI * k * i / nfft);
      }
      power[k] = re * re + im * im;
    }
    for (std::size_t b = 0; b < 64; ++b) {
      double e = 0;
      for (std::size_t k = 0; k < bins; ++k) e += w[b][k] * power[k];
      lm[b].push_back(std::log(std::max(e, 1e-10)));
    }
  }
  std::vector<double> out(256);
  for (std::size_t b = 0; b < 64; ++b) {
    double mean = 0;
    for (double v : lm[b]) mean += v;
    mean /= lm[b].size();
    double var = 0;
    for (double v : lm[b]) var += (v - mean) * (v - mean);
    out[b] = mean;
    out[64 + b] = std::sqrt(var / lm[b].size());
    out[128 + b] = *std::min_element(lm[b].begin(), lm[b].end());
    out[192 + b] = *std::max_element(lm[b].begin(), lm[b].end());
  }
  return out;
}

EmbeddingTable random_table(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  EmbeddingTable t;
  t.provider = ProviderSpec{"rand", 16000, 1.0, dim, ResampleMode::resample};
  for (std::size_t r = 0; r < rows; ++r) {
    EmbeddingVector v(dim);
    for (auto& x : v) x = g(rng);
    t.rows.emplace("id" + std::to_string(r), std::move(v));
  }
  return t;
}

}  // namespace

TEST(MeanPool, ElementwiseAverage) {
  const std::vector<EmbeddingVector> frames = {{1, 2}, {3, 4}};
  EXPECT_EQ(mean_pool(frames), (EmbeddingVector{2, 3}));
  EXPECT_THROW(mean_pool(std::vector<EmbeddingVector>{}), ValidationError);
  EXPECT_THROW(mean_pool(std::vector<EmbeddingVector>{{1, 2}, {3}}), ValidationError);
}

TEST(MeanPool, IdenticalFramesPoolToThemselves) {
  std::mt19937 rng(1);
  std::normal_distribution<float> g;
  EmbeddingVector v(64);
  for (auto& x : v) x = g(rng);
  for (std::size_t n : {1u, 3u, 7u, 10u}) {
    EXPECT_EQ(mean_pool(std::vector<EmbeddingVector>(n, v)), v);
  }
}

TEST(EmbedExample, TwoFramesAreAveraged) {
  ScriptedEmbedder provider({{1, 2}, {3, 4}});
  ProviderSpec spec{"s", 10, 1.0, 2, ResampleMode::reinterpret};
  audio::AudioClip clip;
  clip.sample_rate = 10;
  clip.samples.assign(20, 0.5f);
  EXPECT_EQ(embed_example(provider, spec, clip), (EmbeddingVector{2, 3}));
}

TEST(EmbedExample, ShortClipIsOneCentredFrame) {
  CountingEmbedder provider;
  ProviderSpec spec{"c", 10, 1.0, 2, ResampleMode::reinterpret};
  audio::AudioClip clip;
  clip.sample_rate = 10;
  clip.samples = {1, 2, 3};
  const auto v = embed_example(provider, spec, clip);
  ASSERT_EQ(provider.frames.size(), 1u);
  EXPECT_EQ(provider.frames[0], audio::center_pad(clip, 10).samples);
  EXPECT_EQ(v, (EmbeddingVector{10.0f, 0.0f}));
}

TEST(EmbedExample, ResampleModeControlsRate) {
  ProviderSpec spec{"c", 8000, 0.5, 2, ResampleMode::resample};
  const auto clip = noise(16000, 16000, 2);

  CountingEmbedder resampled;
  embed_example(resampled, spec, clip);
  EXPECT_EQ(resampled.frames.size(), 2u);
  EXPECT_EQ(resampled.rates.front(), 8000u);

  spec.resample_mode = ResampleMode::reinterpret;
  CountingEmbedder reinterpreted;
  embed_example(reinterpreted, spec, clip);
  ASSERT_EQ(reinterpreted.frames.size(), 4u);
  EXPECT_TRUE(std::equal(reinterpreted.frames[0].begin(), reinterpreted.frames[0].end(), clip.samples.begin()));
}

TEST(EmbedExample, WrongDimensionNamesTheFrame) {
  ScriptedEmbedder provider({{1, 2}, {3}});
  ProviderSpec spec{"s", 10, 1.0, 2, ResampleMode::reinterpret};
  audio::AudioClip clip;
  clip.sample_rate = 10;
  clip.samples.assign(20, 0.5f);
  try {
    embed_example(provider, spec, clip);
    FAIL();
  } catch (const ProviderError& e) {
    EXPECT_NE(std::string(e.what()).find("frame 1"), std::string::npos) << e.what();
  }
}

TEST(EmbedExample, EqualsMeanOfFrameOutputs) {
  std::mt19937 rng(5);
  const ProviderSpec spec = reference_spec(16000, 0.25);
  ReferenceEmbedder provider;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t len = 100 + rng() % 20000;
    const auto clip = noise(len, 16000, trial);
    const auto frames = audio::frame(clip, spec.window_samples());
    std::vector<double> acc(kReferenceDim, 0.0);
    for (const auto& f : frames.frames) {
      const auto v = reference_embed(f, 16000);
      for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
    }
    EmbeddingVector expected(kReferenceDim);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = static_cast<float>(acc[i] / frames.frames.size());
    const auto got = embed_example(provider, spec, clip);
    ASSERT_EQ(got.size(), expected.size());
    EXPECT_EQ(0, std::memcmp(got.data(), expected.data(), got.size() * sizeof(float)));
  }
}

TEST(ReferenceEmbed, SilenceSitsAtTheFloor) {
  const std::vector<float> silent(16000, 0.0f);
  const auto f = log_mel_statistics(silent, 16000);
  ASSERT_EQ(f.size(), 256u);
  const double floor = std::log(kLogMelFloor);
  for (std::size_t b = 0; b < 64; ++b) {
    EXPECT_EQ(f[b], floor);
    EXPECT_EQ(f[64 + b], 0.0);
    EXPECT_EQ(f[128 + b], floor);
    EXPECT_EQ(f[192 + b], floor);
  }
}

TEST(ReferenceEmbed, MatchesNaiveDftOracle) {
  for (std::uint32_t rate : {8000u, 16000u, 22050u}) {
    const auto clip = noise(rate / 4, rate, rate);
    const auto fast = log_mel_statistics(clip.samples, rate);
    const auto slow = naive_log_mel_statistics(clip.samples, rate);
    for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(fast[i], slow[i], 1e-8 * std::max(1.0, std::abs(slow[i]))) << i;
  }
}

TEST(ReferenceEmbed, ScaleShiftsLocationBandsByLogGainSquared) {
  const auto clip = noise(8000, 16000, 11);
  const auto base = log_mel_statistics(clip.samples, 16000);
  for (float g : {0.5f, 2.0f, 3.0f}) {
    std::vector<float> scaled(clip.samples);
    for (auto& x : scaled) x *= g;
    const auto f = log_mel_statistics(scaled, 16000);
    const double shift = std::log(static_cast<double>(g) * g);
    for (std::size_t b = 0; b < 64; ++b) {
      EXPECT_NEAR(f[b] - base[b], shift, 1e-6);
      EXPECT_NEAR(f[64 + b], base[64 + b], 1e-6);
      EXPECT_NEAR(f[128 + b] - base[128 + b], shift, 1e-6);
      EXPECT_NEAR(f[192 + b] - base[192 + b], shift, 1e-6);
    }
  }
}

TEST(ReferenceEmbed, DeterministicAndFloatRounded) {
  const auto clip = noise(4000, 16000, 3);
  const auto a = reference_embed(clip.samples, 16000);
  const auto b = reference_embed(clip.samples, 16000);
  EXPECT_EQ(a, b);
  const auto d = log_mel_statistics(clip.samples, 16000);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], static_cast<float>(d[i]));
}

TEST(ReferenceEmbed, FrameShorterThanAnalysisWindow) {
  const std::vector<float> tiny = {0.1f, -0.2f, 0.3f};
  const auto f = log_mel_statistics(tiny, 16000);
  for (std::size_t b = 0; b < 64; ++b) EXPECT_EQ(f[64 + b], 0.0);  // a single STFT window
}

TEST(ProviderSpec, PresetsAndValidation) {
  const auto perch = provider_preset("perch");
  ASSERT_TRUE(perch);
  EXPECT_EQ(perch->native_rate, 32000u);
  EXPECT_EQ(perch->window_samples(), 160000u);
  EXPECT_EQ(perch->embedding_dim, 1280u);
  EXPECT_FALSE(provider_preset("nonsense"));
  ProviderSpec bad{"b", 16000, 0.0, 3, ResampleMode::resample};
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_EQ(identity_spec(16).window_samples(), 16u);
  EXPECT_EQ(parse_resample_mode(to_string(ResampleMode::reinterpret)), ResampleMode::reinterpret);
  EXPECT_THROW(parse_resample_mode("maybe"), ValidationError);
}

TEST(Table, RoundTripIsBitIdentical) {
  fixtures::TempDir dir;
  auto table = random_table(300, 17, 4);
  table.provider = ProviderSpec{"perchy", 32000, 5.0, 17, ResampleMode::reinterpret};
  write_table(table, dir.file("t.embt"));
  const auto back = read_table(dir.file("t.embt"));
  EXPECT_EQ(back, table);
}

TEST(Table, WithoutSidecarFallsBackToStem) {
  fixtures::TempDir dir;
  const auto table = random_table(5, 3, 1);
  const auto bytes = serialize_table(table);
  fixtures::spit(dir.file("birds.embt"), std::string(bytes.begin(), bytes.end()));
  const auto back = read_table(dir.file("birds.embt"));
  EXPECT_EQ(back.provider.name, "birds");
  EXPECT_EQ(back.rows, table.rows);
}

TEST(Table, BinaryLayout) {
  EmbeddingTable t;
  t.provider = ProviderSpec{"x", 16000, 1.0, 2, ResampleMode::resample};
  t.rows["a"] = {1.0f, -2.0f};
  const auto bytes = serialize_table(t);
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 8 + (2 + 1 + 8) + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "EMBT");
  EXPECT_EQ(bytes[4], 1);   // version
  EXPECT_EQ(bytes[8], 2);   // dim
  EXPECT_EQ(bytes[12], 1);  // rows
  float first;
  std::memcpy(&first, bytes.data() + 23, 4);
  EXPECT_EQ(first, 1.0f);
  std::uint32_t crc;
  std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(crc, crc32(std::span(bytes).first(bytes.size() - 4)));
}

TEST(Table, Crc32KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST(Table, EveryCorruptedByteIsRejected) {
  const auto table = random_table(4, 3, 2);
  const auto bytes = serialize_table(table);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x41;
    EXPECT_THROW(parse_table(bad), FormatError) << "byte " << i;
  }
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(parse_table(truncated), FormatError);
  EXPECT_THROW(parse_table(std::vector<std::uint8_t>{}), FormatError);
}

TEST(Table, ValidateRejectsRaggedOrNonFinite) {
  auto t = random_table(2, 3, 3);
  t.rows["id0"].pop_back();
  EXPECT_THROW(t.validate(), ValidationError);
  t = random_table(2, 3, 3);
  t.rows["id1"][0] = INFINITY;
  EXPECT_THROW(serialize_table(t), ValidationError);
}

TEST(Table, TruncateKeepsLeadingCoordinates) {
  const auto t = random_table(10, 8, 5);
  const auto small = truncate_dims(t, 3);
  EXPECT_EQ(small.dim(), 3u);
  for (const auto& [id, v] : small.rows) {
    EXPECT_EQ(v, EmbeddingVector(t.at(id).begin(), t.at(id).begin() + 3));
  }
  EXPECT_THROW(truncate_dims(t, 0), ValidationError);
  EXPECT_THROW(truncate_dims(t, 9), ValidationError);
}

TEST(Table, CsvExportRoundTripsValues) {
  fixtures::TempDir dir;
  auto t = random_table(3, 4, 6);
  t.rows["needs,quote"] = {1.5f, 2.5f, 3.5f, 4.5f};
  export_table_csv(t, dir.file("t.csv"));
  const auto rows = parse_csv(fixtures::slurp(dir.file("t.csv")));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"id", "v0", "v1", "v2", "v3"}));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& v = t.at(rows[r][0]);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(std::stof(rows[r][i + 1]), v[i]);
  }
}
