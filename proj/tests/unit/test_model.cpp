#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "support/expect.hpp"
#include "xlab/binary_io.hpp"
#include "xlab/model.hpp"

using namespace xlab;

namespace {

ModelSpec mlp_784() {
  ModelSpec s;
  s.name = "mlp";
  s.input_shape = {1, 28, 28};
  s.num_classes = 10;
  s.layers = {Layer::flatten(), Layer::dense(128), Layer::relu(), Layer::dense(10)};
  return s;
}

Tensor<float> random_batch(std::size_t n, std::array<std::size_t, 3> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  Tensor<float> t({n, shape[0], shape[1], shape[2]});
  for (float& v : t.data()) v = unit(rng);
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "xlab_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(ModelSpec, ParameterCount) { EXPECT_EQ(mlp_784().param_count(), 101770u); }

TEST(ModelSpec, FamiliesMatchTheirLayerLists) {
  const ModelSpec cnn = cnn_small({1, 16, 16}, 10);
  const std::vector<Layer> want_cnn = {Layer::conv(8, 3), Layer::relu(),      Layer::maxpool(2), Layer::conv(16, 3),
                                       Layer::relu(),     Layer::maxpool(2),  Layer::flatten(),  Layer::dense(64),
                                       Layer::relu(),     Layer::dropout(0.25), Layer::dense(10)};
  EXPECT_EQ(cnn.layers, want_cnn);
  const ModelSpec mlp = mlp_wide({1, 16, 16}, 10);
  const std::vector<Layer> want_mlp = {Layer::flatten(), Layer::dense(256), Layer::relu(),
                                       Layer::dense(128), Layer::relu(),     Layer::dense(10)};
  EXPECT_EQ(mlp.layers, want_mlp);
  EXPECT_NE(cnn.layers, mlp.layers);
  EXPECT_EQ(model_family("cnn-small", {1, 16, 16}, 10), cnn);
  EXPECT_ERRC(model_family("resnet", {1, 16, 16}, 10), Errc::invalid_spec);
}

TEST(ModelSpec, KernelLargerThanInputIsInvalid) {
  ModelSpec s;
  s.name = "bad";
  s.input_shape = {1, 2, 2};
  s.num_classes = 2;
  s.layers = {Layer::conv(1, 3), Layer::flatten(), Layer::dense(2)};
  try {
    build_model(s, 1);
    FAIL() << "oversized kernel accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_spec);
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
}

TEST(ModelSpec, FinalLayerMustEmitKLogits) {
  ModelSpec s = mlp_784();
  s.layers.back() = Layer::dense(9);
  EXPECT_ERRC(s.validate(), Errc::invalid_spec);
  s.layers = {Layer::dense(10)};
  EXPECT_ERRC(s.validate(), Errc::invalid_spec);
}

TEST(ModelSpec, TextRoundTrip) {
  const ModelSpec cnn = cnn_small({3, 12, 12}, 4);
  EXPECT_EQ(ModelSpec::parse(cnn.to_text()), cnn);
  EXPECT_ERRC(ModelSpec::parse("name x\ninput 1 2 2\nclasses 2\nconv3d 1\n"), Errc::unknown_layer);
}

TEST(BuildModel, SameSeedIsBitwiseIdentical) {
  const ModelSpec s = cnn_small({1, 16, 16}, 10);
  const Model a = build_model(s, 42);
  const Model b = build_model(s, 42);
  const Model c = build_model(s, 43);
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  EXPECT_NE(a.params()[0].value, c.params()[0].value);
}

TEST(BuildModel, KaimingUniformBoundsAndZeroBiases) {
  const Model m = build_model(mlp_784(), 5);
  const Tensor<float>& w = m.param("l01.weight");
  const float bound = std::sqrt(6.0f / 784.0f);
  EXPECT_LE(w.array().abs().maxCoeff(), bound);
  EXPECT_GT(w.array().abs().maxCoeff(), 0.9f * bound);
  EXPECT_EQ(m.param("l01.bias").array().abs().maxCoeff(), 0.0f);
}

TEST(PredictProba, RowsSumToOne) {
  const ModelSpec s = cnn_small({1, 16, 16}, 10);
  const Model m = build_model(s, 3);
  const Tensor<float> p = predict_proba(m, random_batch(17, s.input_shape, 9));
  ASSERT_EQ(p.shape(), (Shape{17, 10}));
  for (std::size_t r = 0; r < 17; ++r) {
    double mass = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_GE(p[r * 10 + k], 0.0f);
      mass += p[r * 10 + k];
    }
    EXPECT_NEAR(mass, 1.0, 1e-6);
  }
}

TEST(PredictProba, ZeroedFinalLayerIsUniform) {
  ModelSpec s = mlp_wide({1, 4, 4}, 2);
  Model m = build_model(s, 1);
  m.param("l05.weight").array().setZero();
  const Tensor<float> p = predict_proba(m, random_batch(4, s.input_shape, 2));
  for (float v : p.data()) EXPECT_EQ(v, 0.5f);
}

TEST(PredictProba, DuplicateRowsAndPurity) {
  const ModelSpec s = cnn_small({1, 16, 16}, 10);
  const Model m = build_model(s, 8);
  Tensor<float> one = random_batch(1, s.input_shape, 4);
  const Tensor<float> two = concat_rows(one, one);
  const Tensor<float> p = predict_proba(m, two);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(p[k], p[10 + k]);
  EXPECT_EQ(predict_proba(m, two), p);
  EXPECT_ERRC(predict_proba(m, random_batch(1, {1, 8, 8}, 1)), Errc::shape_mismatch);
}

TEST(PredictLabel, ArgmaxWithLowestIndexTies) {
  EXPECT_EQ(argmax_rows(Tensor<float>({1, 3}, std::vector<float>{0.1f, 0.7f, 0.2f})), std::vector<int>{1});
  EXPECT_EQ(argmax_rows(Tensor<float>({1, 2}, std::vector<float>{0.5f, 0.5f})), std::vector<int>{0});
  const ModelSpec s = mlp_wide({1, 6, 6}, 5);
  const Model m = build_model(s, 2);
  const Tensor<float> x = random_batch(30, s.input_shape, 6);
  EXPECT_EQ(predict_label(m, x), argmax_rows(predict_proba(m, x)));
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const ModelSpec s = cnn_small({1, 16, 16}, 10);
  Model m = build_model(s, 77);
  m.meta() = {.epochs = 20, .final_lr = 0.001, .dataset_id = "synth-train", .adversarial = true,
              .technique = "pgd", .epsilon = 0.1, .provenance = "unit"};
  const auto path = temp_path("roundtrip.xlab");
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  EXPECT_EQ(back.spec(), m.spec());
  EXPECT_EQ(back.seed(), 77u);
  EXPECT_EQ(back.meta(), m.meta());
  ASSERT_EQ(back.params().size(), m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(back.params()[i].name, m.params()[i].name);
    EXPECT_EQ(std::memcmp(back.params()[i].value.raw(), m.params()[i].value.raw(),
                          m.params()[i].value.size() * sizeof(float)),
              0);
  }
  const Tensor<float> x = random_batch(5, s.input_shape, 1);
  EXPECT_EQ(predict_proba(back, x), predict_proba(m, x));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(m));
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = encode_checkpoint(build_model(mlp_wide({1, 4, 4}, 3), 1));
  EXPECT_EQ(bytes.substr(0, 4), "XLAB");
  io::Reader in(bytes);
  in.take(4);
  EXPECT_EQ(in.u32(), kCheckpointVersion);
  EXPECT_EQ(ModelSpec::parse(in.text()), mlp_wide({1, 4, 4}, 3));
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string good = encode_checkpoint(build_model(mlp_wide({1, 4, 4}, 3), 1));
  EXPECT_ERRC(decode_checkpoint(good.substr(0, good.size() - 3)), Errc::corrupt_file);
  EXPECT_ERRC(decode_checkpoint(good.substr(0, 10)), Errc::corrupt_file);
  EXPECT_ERRC(decode_checkpoint(good + "x"), Errc::corrupt_file);
  std::string magic = good;
  magic[0] = 'Y';
  EXPECT_ERRC(decode_checkpoint(magic), Errc::corrupt_file);
  std::string future = good;
  const std::uint32_t v = kCheckpointVersion + 1;
  std::memcpy(future.data() + 4, &v, 4);
  EXPECT_ERRC(decode_checkpoint(future), Errc::unsupported_version);
  EXPECT_ERRC(load_checkpoint(temp_path("missing.xlab")), Errc::io_error);
}

TEST(Model, RejectsMismatchedParameters) {
  const ModelSpec s = mlp_wide({1, 4, 4}, 3);
  Model m = build_model(s, 1);
  std::vector<Param> params = m.params();
  params.pop_back();
  EXPECT_ERRC(Model(s, params, 1), Errc::shape_mismatch);
  params = m.params();
  params[0].value[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_ERRC(Model(s, params, 1), Errc::non_finite);
}
