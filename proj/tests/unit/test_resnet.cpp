#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "beamsight/checkpoint.hpp"
#include "beamsight/resnet.hpp"
#include "beamsight/testing/gradcheck.hpp"

namespace bs = beamsight;
using bs::Model;
using bs::ModelConfig;
using bs::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.input_size = 32;
  c.stem_channels = 4;
  return c;
}

Tensor<float> random_batch(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  bs::RandomStream rng(seed);
  return bs::testing::random_tensor({n, c.input_channels, c.input_size, c.input_size}, rng, 0.0, 1.0).cast<float>();
}

// Parameter count derived from the architecture description alone.
std::size_t expected_parameter_count(const ModelConfig& c) {
  std::size_t total = c.stem_channels * c.input_channels * 9 + 2 * c.stem_channels;
  std::size_t in = c.stem_channels;
  for (std::size_t blocks : c.blocks_per_stage) {
    const std::size_t out = 2 * in;
    total += out * in * 9 + 2 * out + out * out * 9 + 2 * out;  // first block convs
    total += out * in + 2 * out;                                 // projection shortcut
    total += (blocks - 1) * (2 * (out * out * 9) + 4 * out);
    in = out;
  }
  return total + in * c.num_classes + c.num_classes;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("beamsight_test_" + name);
}

}  // namespace

TEST(ResNet, BuildIsDeterministicPerSeed) {
  const auto a = bs::build_model(small_config(), 42);
  const auto b = bs::build_model(small_config(), 42);
  const auto c = bs::build_model(small_config(), 43);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_TRUE(bs::bitwise_equal(a.params()[i].value, b.params()[i].value)) << a.params()[i].name;
    any_diff |= !bs::bitwise_equal(a.params()[i].value, c.params()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(ResNet, InvalidConfigIsRejected) {
  ModelConfig c = small_config();
  c.num_classes = 1;
  EXPECT_THROW(bs::build_model(c, 1), bs::Error);
  c = small_config();
  c.dropout_p = 1.0;
  EXPECT_THROW(bs::build_model(c, 1), bs::Error);
  c = small_config();
  c.input_size = 48;  // not a multiple of 32
  EXPECT_THROW(bs::build_model(c, 1), bs::Error);
}

TEST(ResNet, HeadParameterCountWith512Features) {
  ModelConfig c;
  c.stem_channels = 64;
  c.input_size = 32;
  ASSERT_EQ(c.head_features(), 512u);
  auto m = bs::Model<float>::zeros(c);
  m.apply_freeze_policy(bs::FreezePolicy::head_only);
  EXPECT_EQ(m.trainable_parameter_count(), 2u * 512u + 2u);
  m.apply_freeze_policy(bs::FreezePolicy::none);
  EXPECT_EQ(m.trainable_parameter_count(), m.parameter_count());
}

TEST(ResNet, DefaultConfigParameterCountMatchesShapeWalk) {
  const ModelConfig c;
  const auto m = bs::Model<float>::zeros(c);
  EXPECT_EQ(m.trainable_parameter_count(), expected_parameter_count(c));
  std::size_t manifest_sum = 0;
  for (const auto& p : m.params()) manifest_sum += bs::shape_size(p.value.shape());
  EXPECT_EQ(m.trainable_parameter_count(), manifest_sum);
}

TEST(ResNet, EvalClassifyIsDeterministicAndBatchIndependent) {
  auto m = bs::build_model(small_config(), 7);
  const auto one = random_batch(1, small_config(), 3);
  Tensor<float> copies({4, 1, 32, 32});
  for (std::size_t i = 0; i < 4; ++i) std::copy(one.values().begin(), one.values().end(), copies.data() + i * one.size());
  const auto a = m.classify(copies);
  const auto b = m.classify(copies);
  EXPECT_TRUE(bs::bitwise_equal(a, b));
  ASSERT_EQ(a.shape(), (bs::Shape{4, 2}));
  for (std::size_t i = 1; i < 4; ++i) {
    EXPECT_EQ(a[2 * i], a[0]);
    EXPECT_EQ(a[2 * i + 1], a[1]);
  }
  const auto p = bs::softmax_rows(a);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p[2 * i] + p[2 * i + 1], 1.0f, 1e-6f);
}

TEST(ResNet, ClassifyRejectsWrongShape) {
  auto m = bs::build_model(small_config(), 7);
  Tensor<float> bad({1, 1, 64, 64});
  EXPECT_THROW(m.classify(bad), bs::Error);
}

TEST(ResNet, StagesHalveResolutionAndPoolToHeadWidth) {
  for (std::size_t size : {32u, 64u, 96u}) {
    ModelConfig c = small_config();
    c.input_size = size;
    auto m = bs::build_model<double>(c, 1);
    bs::Graph<double> g;
    const auto pass = m.forward_eval(g, bs::testing::random_tensor({1, 1, size, size}, *std::make_unique<bs::RandomStream>(2)), {});
    // every stage's residual sum halves the spatial extent of the previous one
    std::vector<std::size_t> sums;
    for (std::size_t id = 0; id < g.size(); ++id)
      if (g.kind(id) == bs::OpKind::add) sums.push_back(g.value(id).dim(2));
    ASSERT_EQ(sums.size(), 6u);
    EXPECT_EQ(sums[0], size / 8);
    EXPECT_EQ(sums[2], size / 16);
    EXPECT_EQ(sums[4], size / 32);
    EXPECT_EQ(g.value(pass.features).shape(), (bs::Shape{1, c.head_features()}));
  }
}

TEST(ResNet, ResetHeadChangesClassCount) {
  auto m = bs::build_model(small_config(), 7);
  m.apply_freeze_policy(bs::FreezePolicy::head_only);
  ModelConfig four = small_config();
  four.num_classes = 4;
  auto src = bs::build_model(four, 1);
  src.reset_head(2, 9);
  EXPECT_EQ(src.config().num_classes, 2u);
  EXPECT_EQ(src.param("head.weight").value.shape(), (bs::Shape{src.config().head_features(), 2}));
  EXPECT_EQ(src.classify(random_batch(2, small_config(), 1)).shape(), (bs::Shape{2, 2}));
}

TEST(Checkpoint, RoundTripReproducesLogitsAndBytes) {
  auto m = bs::build_model(small_config(), 11);
  m.batch_norms()[0].stats.running_mean[1] = 0.25f;
  m.apply_freeze_policy(bs::FreezePolicy::head_only);
  const auto path = temp_path("roundtrip.ckpt");
  bs::save_checkpoint(m, path);
  const auto loaded = bs::load_checkpoint(path);
  const auto batch = random_batch(3, small_config(), 5);
  EXPECT_TRUE(bs::bitwise_equal(m.classify(batch), loaded.classify(batch)));
  EXPECT_EQ(loaded.trainable_parameter_count(), m.trainable_parameter_count());
  EXPECT_EQ(bs::checkpoint_bytes(loaded), bs::read_file_bytes(path));
  std::filesystem::remove(path);
}

TEST(Checkpoint, PreambleIsLittleEndianWithMagic) {
  const auto bytes = bs::checkpoint_bytes(bs::build_model(small_config(), 1));
  ASSERT_GT(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RFHD");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

namespace {
bs::ErrorKind load_error(const std::vector<std::uint8_t>& bytes) {
  try {
    bs::model_from_checkpoint_bytes(bytes);
  } catch (const bs::Error& e) {
    return e.kind();
  }
  return bs::ErrorKind::IOError;
}
}  // namespace

TEST(Checkpoint, CorruptionIsDetected) {
  const auto good = bs::checkpoint_bytes(bs::build_model(small_config(), 1));

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  EXPECT_EQ(load_error(truncated), bs::ErrorKind::CorruptCheckpoint);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(load_error(bad_magic), bs::ErrorKind::CorruptCheckpoint);

  // Rewrite the first manifest shape in the header text: [4,1,3,3] -> [4,1,3,2].
  std::string text(good.begin(), good.end());
  const auto pos = text.find("[4,1,3,3]");
  ASSERT_NE(pos, std::string::npos);
  text[pos + 7] = '2';
  EXPECT_EQ(load_error(std::vector<std::uint8_t>(text.begin(), text.end())), bs::ErrorKind::CorruptCheckpoint);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(load_error(trailing), bs::ErrorKind::CorruptCheckpoint);
}
