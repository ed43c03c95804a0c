#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "abus/checkpoint.hpp"
#include "abus/errors.hpp"
#include "support/tempdir.hpp"

using namespace abus;
namespace fs = std::filesystem;

namespace {

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

ModelConfig small(bool dual, int dims = 3) {
  ModelConfig c;
  c.depth = 1;
  c.base_channels = 2;
  c.dual_path = dual;
  c.dimensionality = dims;
  return c;
}

TensorF ramp(const Shape& s) {
  TensorF t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>((i * 37) % 11) - 5.0f;
  return t;
}

}  // namespace

TEST(Checkpoint, BitExactRoundTrip) {
  abus::testing::TempDir dir;
  for (bool dual : {false, true})
    for (int dims : {2, 3}) {
      Model m(small(dual, dims), 11);
      // Move the batch-norm running statistics away from their defaults.
      const Shape s = dims == 3 ? Shape{2, 1, 4, 4, 4} : Shape{2, 1, 4, 4};
      std::vector<TensorF> in{ramp(s)};
      if (dual) in.push_back(ramp(s));
      m.forward(std::span<const TensorF>(in), Mode::train);
      m.commit_batch_statistics();
      const fs::path p = dir.path() / ("m" + std::to_string(dual) + std::to_string(dims) + ".ckpt");
      save_checkpoint(m, p);
      Model back = load_checkpoint(p);
      EXPECT_EQ(back.config(), m.config());
      EXPECT_EQ(back.state(), m.state());
      EXPECT_EQ(back.forward(std::span<const TensorF>(in), Mode::infer), m.forward(std::span<const TensorF>(in), Mode::infer));
      EXPECT_EQ(read_checkpoint_config(p), m.config());
      // Saving the loaded model reproduces the file byte for byte.
      const fs::path again = dir.path() / "again.ckpt";
      save_checkpoint(back, again);
      EXPECT_EQ(bytes_of(again), bytes_of(p));
    }
}

TEST(Checkpoint, HeaderLayout) {
  abus::testing::TempDir dir;
  const fs::path p = dir.path() / "m.ckpt";
  save_checkpoint(Model(small(false), 1), p);
  const std::string b = bytes_of(p);
  ASSERT_GT(b.size(), 20u);
  EXPECT_EQ(b.substr(0, 8), "UNETCKPT");
  std::uint32_t version = 0;
  std::memcpy(&version, b.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  std::uint64_t len = 0;
  std::memcpy(&len, b.data() + 12, 8);
  EXPECT_EQ(nlohmann::json::parse(b.substr(20, len)).get<ModelConfig>(), small(false));
}

TEST(Checkpoint, CorruptFilesAreIoErrors) {
  abus::testing::TempDir dir;
  const fs::path p = dir.path() / "m.ckpt";
  save_checkpoint(Model(small(false), 2), p);
  const std::string good = bytes_of(p);
  const fs::path bad = dir.path() / "bad.ckpt";

  std::string b = good;
  b[0] = 'X';
  write_bytes(bad, b);
  EXPECT_THROW(load_checkpoint(bad), IoError);

  b = good;
  b[8] = 2;
  write_bytes(bad, b);
  EXPECT_THROW(load_checkpoint(bad), IoError);

  write_bytes(bad, good.substr(0, good.size() - 3));
  try {
    load_checkpoint(bad);
    FAIL() << "truncated checkpoint loaded";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset " + std::to_string(good.size() - 3)), std::string::npos) << e.what();
  }

  write_bytes(bad, good + "xx");
  EXPECT_THROW(load_checkpoint(bad), IoError);

  write_bytes(bad, good.substr(0, 5));
  EXPECT_THROW(read_checkpoint_config(bad), IoError);

  EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), IoError);
}

TEST(Checkpoint, ConfigMismatchedWithWeightsIsIoError) {
  abus::testing::TempDir dir;
  const fs::path p = dir.path() / "m.ckpt";
  save_checkpoint(Model(small(false), 3), p);
  std::string b = bytes_of(p);
  // Rewrite base_channels 2 -> 3 in the embedded config (same length).
  const auto at = b.find("\"base_channels\":2");
  ASSERT_NE(at, std::string::npos);
  b[at + 16] = '3';
  write_bytes(p, b);
  EXPECT_THROW(load_checkpoint(p), IoError);
}
