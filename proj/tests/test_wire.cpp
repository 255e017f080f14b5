#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include <fcntl.h>
#include <unistd.h>

#include "cfx/subprocess_predictor.hpp"
#include "cfx/tensor_io.hpp"
#include "cfx/wire.hpp"
#include "test_util.hpp"

namespace cfx {
namespace {

const std::filesystem::path kData = CFX_TEST_DATA;
const std::string kServer = CFX_SERVER_PATH;

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Wire, FrameLayout) {
  const wire::Frame f{{{"op", "scores"}, {"n", 1}, {"k", 1}}, {1.0f}};
  const auto bytes = wire::encode_frame(f);
  const std::string header = R"({"op":"scores","n":1,"k":1})";
  ASSERT_EQ(bytes.size(), 4 + header.size() + 4);
  EXPECT_EQ(bytes[0], header.size());
  EXPECT_EQ(bytes[1], 0);
  EXPECT_EQ(std::string(bytes.begin() + 4, bytes.begin() + 4 + header.size()), header);
  const std::vector<std::uint8_t> one{0x00, 0x00, 0x80, 0x3F};
  EXPECT_TRUE(std::equal(one.begin(), one.end(), bytes.end() - 4));
}

TEST(Wire, DecodeRoundTrip) {
  std::vector<std::uint8_t> stream;
  for (const auto& f : {wire::hello_request(), wire::hello_reply(3),
                        wire::Frame{{{"op", "predict"}, {"n", 1}, {"c", 1}, {"h", 1}, {"w", 2}},
                                    {0.25f, -2.0f}}}) {
    const auto b = wire::encode_frame(f);
    stream.insert(stream.end(), b.begin(), b.end());
  }
  const auto frames = wire::decode_frames(stream);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[1].header["num_classes"], 3);
  EXPECT_EQ(frames[2].payload, (std::vector<float>{0.25f, -2.0f}));
  stream.pop_back();
  EXPECT_THROW(wire::decode_frames(stream), TransportError);
}

TEST(Wire, PayloadSizeNeedsDimensions) {
  EXPECT_THROW(wire::payload_floats(nlohmann::ordered_json{{"op", "predict"}, {"n", 1}}),
               TransportError);
  EXPECT_THROW(wire::payload_floats(nlohmann::ordered_json{{"nop", 1}}), TransportError);
  EXPECT_EQ(wire::payload_floats(nlohmann::ordered_json{{"op", "hello"}}), 0u);
}

TEST(Wire, ReadFrameFromPipe) {
  int fds[2];
  ASSERT_EQ(::pipe(fds), 0);
  wire::FdWriter w(fds[1]);
  wire::write_frame(w, wire::hello_reply(4));
  ::close(fds[1]);
  wire::FdReader r(fds[0]);
  const auto f = wire::read_frame(r);
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->header["num_classes"], 4);
  EXPECT_FALSE(wire::read_frame(r).has_value());
  ::close(fds[0]);
}

// Runs the server on the golden request stream and compares every byte; the
// expected bytes were produced by an independent encoder and softmax.
TEST(Transcript, ReplayIsByteIdentical) {
  test::TempDir dir;
  const auto out = dir.path() / "response.bin";
  const std::string cmd = kServer + " --spec " + (kData / "linear_2x2.json").string() + " < " +
                          (kData / "transcript_request.bin").string() + " > " + out.string();
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  const auto got = slurp(out);
  const auto want = slurp(kData / "transcript_response.bin");
  ASSERT_FALSE(want.empty());
  EXPECT_EQ(got, want);

  const auto frames = wire::decode_frames(got);
  ASSERT_EQ(frames.size(), 5u);
  EXPECT_EQ(frames[0].header["num_classes"], 2);
  ASSERT_EQ(frames[1].payload.size(), 4u);
  EXPECT_FLOAT_EQ(frames[1].payload[0], 0.5f);
  EXPECT_FLOAT_EQ(frames[1].payload[1], 0.5f);
  EXPECT_NEAR(frames[1].payload[2], 1.0 / (1.0 + std::exp(3.0)), 1e-7);
  EXPECT_NEAR(frames[1].payload[3], 0.9526, 1e-4);
  for (std::size_t row = 0; row < 2; ++row) {
    EXPECT_NEAR(frames[1].payload[2 * row] + frames[1].payload[2 * row + 1], 1.0, 1e-5);
  }
  EXPECT_EQ(frames[2].header["op"], "error");
  EXPECT_EQ(frames[3].header["op"], "error");
  EXPECT_EQ(frames[4].header["op"], "scores");
}

TEST(Subprocess, MatchesInProcessPredictor) {
  const auto spec = kData / "linear_2x2.json";
  SubprocessPredictor remote(SubprocessPredictor::split_command(kServer + " --spec " + spec.string()),
                             3);
  std::ifstream in(spec);
  const auto local = make_synthetic_predictor(nlohmann::json::parse(in));
  EXPECT_EQ(remote.num_classes(), 2u);
  std::vector<ImageTensor> batch;
  for (int i = 0; i < 7; ++i) {
    batch.push_back(test::gray(2, 2, {0.1f * i, -0.2f * i, 0.3f, 0.05f * i}));
  }
  const auto a = predict_batch(remote, batch);
  const auto b = predict_batch(*local, batch);
  ASSERT_EQ(a.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(a[i].predicted_class, b[i].predicted_class);
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_EQ(a[i].class_scores[c], double(float(b[i].class_scores[c])));
    }
  }
}

TEST(Subprocess, ServerErrorBecomesTransportError) {
  const auto spec = kData / "linear_2x2.json";
  SubprocessPredictor remote(SubprocessPredictor::split_command(kServer + " --spec " + spec.string()));
  const std::vector<ImageTensor> wrong{test::gray(3, 3, std::vector<float>(9, 0.0f))};
  EXPECT_THROW(remote.predict(wrong), TransportError);
  // The server keeps serving after an error frame.
  const std::vector<ImageTensor> right{test::gray(2, 2, {1, 1, 1, 1})};
  EXPECT_EQ(remote.predict(right).front().predicted_class, 1u);
}

TEST(Subprocess, DeadChildFailsHandshake) {
  EXPECT_THROW(SubprocessPredictor({"/bin/false"}), TransportError);
  EXPECT_THROW(SubprocessPredictor({"/nonexistent/cfx_server"}), TransportError);
}

}  // namespace
}  // namespace cfx
