#include <gtest/gtest.h>

#include <chrono>
#include <functional>
#include <string>

#include "probebench/embedding.hpp"
#include "probebench/error.hpp"

using namespace probebench;
using namespace probebench::embedding;

namespace {

CommandSpec stub(const std::string& args, std::size_t dim, std::chrono::milliseconds timeout = std::chrono::seconds(20)) {
  return CommandSpec{std::string("'") + STUB_EMBEDDER_PATH + "' " + args, dim, timeout};
}

std::vector<std::vector<float>> frames(std::size_t n, std::size_t len) {
  std::vector<std::vector<float>> out(n, std::vector<float>(len));
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t i = 0; i < len; ++i) out[f][i] = static_cast<float>(f) + 0.125f * static_cast<float>(i);
  }
  return out;
}

EmbeddingVector expected(const std::vector<float>& frame, std::size_t dim) {
  EmbeddingVector e(dim);
  for (std::size_t j = 0; j < dim; ++j) e[j] = frame[j % frame.size()] + static_cast<float>(j);
  return e;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ProviderError& e) {
    return e.what();
  }
  return "(no ProviderError)";
}

}  // namespace

TEST(ExternalEmbedder, ReturnsVectorsInRequestOrder) {
  const auto input = frames(5, 8);
  const auto out = external_embed(stub("ok 4", 4), input, 16000);
  ASSERT_EQ(out.size(), 5u);
  for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(out[f], expected(input[f], 4));
}

TEST(ExternalEmbedder, OutOfOrderResponsesAreMatchedById) {
  const auto input = frames(6, 3);
  const auto out = external_embed(stub("reverse 5 6", 5), input, 16000);
  for (std::size_t f = 0; f < 6; ++f) EXPECT_EQ(out[f], expected(input[f], 5));
}

TEST(ExternalEmbedder, SessionServesManyBatches) {
  ExternalEmbedder e(stub("ok 2", 2));
  for (int round = 0; round < 20; ++round) {
    const auto input = frames(3, 4);
    const auto out = e.embed_frames(input, 8000);
    EXPECT_EQ(out[2], expected(input[2], 2));
  }
  EXPECT_EQ(e.embed_frame(std::vector<float>{0.5f, 1.0f}, 8000), (EmbeddingVector{0.5f, 2.0f}));
}

TEST(ExternalEmbedder, LargeFramesDoNotDeadlock) {
  // Several MB in flight each way exercises the non-blocking pump.
  const auto input = frames(40, 32000);
  const auto out = external_embed(stub("ok 3", 3), input, 32000);
  EXPECT_EQ(out[39], expected(input[39], 3));
}

TEST(ExternalEmbedder, HandshakeDimMismatch) {
  const auto msg = message_of([] { external_embed(stub("ok 4", 8), frames(1, 4), 16000); });
  EXPECT_NE(msg.find("handshake dim 4"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, BadHandshake) {
  const auto msg = message_of([] { external_embed(stub("bad-handshake 4", 4), frames(1, 4), 16000); });
  EXPECT_NE(msg.find("handshake"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, WrongResponseDimension) {
  const auto msg = message_of([] { external_embed(stub("wrong-dim 4", 4), frames(1, 4), 16000); });
  EXPECT_NE(msg.find("protocol violation"), std::string::npos) << msg;
  EXPECT_NE(msg.find("dimension 5"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, UnknownResponseId) {
  const auto msg = message_of([] { external_embed(stub("bad-id 4", 4), frames(1, 4), 16000); });
  EXPECT_NE(msg.find("unknown response id"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, CrashReportsExitAndStderr) {
  const auto msg = message_of([] { external_embed(stub("crash 4", 4), frames(2, 4), 16000); });
  EXPECT_NE(msg.find("simulated crash"), std::string::npos) << msg;
  EXPECT_NE(msg.find("exit"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, MissingCommand) {
  const auto msg = message_of([] {
    external_embed(CommandSpec{"/nonexistent/embedder-binary", 4, std::chrono::seconds(5)}, frames(1, 4), 16000);
  });
  EXPECT_NE(msg.find("external embedder"), std::string::npos) << msg;
}

TEST(ExternalEmbedder, Timeout) {
  const auto start = std::chrono::steady_clock::now();
  const auto msg = message_of([] { external_embed(stub("hang 4", 4, std::chrono::milliseconds(300)), frames(1, 4), 16000); });
  EXPECT_NE(msg.find("timeout after"), std::string::npos) << msg;
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(10));
}

TEST(ExternalEmbedder, RecoversAfterFailureWithFreshSession) {
  ExternalEmbedder e(stub("ok 2", 2));
  EXPECT_EQ(e.embed_frames(frames(1, 2), 16000).size(), 1u);
  // Empty batch is a no-op rather than a protocol exchange.
  EXPECT_TRUE(e.embed_frames({}, 16000).empty());
  EXPECT_EQ(e.embed_frames(frames(2, 2), 16000).size(), 2u);
}

TEST(ExternalEmbedder, EmbedExampleThroughChildProcess) {
  ExternalEmbedder e(stub("ok 3", 3));
  ProviderSpec spec{"ext", 100, 0.04, 3, ResampleMode::reinterpret};
  audio::AudioClip clip;
  clip.sample_rate = 100;
  clip.samples = {1, 2, 3, 4, 5, 6, 7, 8};
  // Frames [1..4] and [5..8] give [1, 3, 5] and [5, 7, 9].
  EXPECT_EQ(embed_example(e, spec, clip), (EmbeddingVector{3, 5, 7}));
}
