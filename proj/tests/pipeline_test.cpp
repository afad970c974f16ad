#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>

#include "orthoplane/pipeline.hpp"

using namespace orthoplane;

TEST(FormatReal, ShortestRoundTrip) {
  EXPECT_EQ(format_real(0.0), "0");
  EXPECT_EQ(format_real(90.0), "90");
  EXPECT_EQ(format_real(-12.5), "-12.5");
  EXPECT_EQ(format_real(0.1), "0.1");
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Real v = rng.normal() * std::pow(10.0, rng.uniform(-30, 30));
    EXPECT_EQ(std::stod(format_real(v)), v);
  }
}

TEST(Metrics, KeepsInsertionOrderAndOverwrites) {
  Metrics m;
  m.set("b", 2.0);
  m.set("a", "x");
  m.set("b", 3.5);
  EXPECT_EQ(m.str(), "b=3.5\na=x\n");
  ASSERT_EQ(m.entries().size(), 2u);
}

TEST(TriplanePreview, GrayLayoutForSingleChannel) {
  Triplane tri(2, 1);
  // Plane p, texel (u, v) holds (p * 4 + v * 2 + u) / 11.
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t u = 0; u < 2; ++u) {
        tri.tensor().mutable_data()[tri.offset(static_cast<PlaneId>(p), u, v)] =
            static_cast<Real>(p * 4 + v * 2 + u) / 11.0;
      }
  const auto img = triplane_preview(tri);
  EXPECT_EQ(img.width, 6u);
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.channels, 1u);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t u = 0; u < 2; ++u) {
        EXPECT_EQ(img.pixels[v * 6 + p * 2 + u], to_byte(static_cast<Real>(p * 4 + v * 2 + u) / 11.0));
      }
}

TEST(TriplanePreview, RgbFromChannelsOneToThree) {
  Triplane tri(1, 4);
  auto data = tri.tensor().mutable_data();
  for (std::size_t p = 0; p < 3; ++p) {
    const auto off = tri.offset(static_cast<PlaneId>(p), 0, 0);
    data[off] = 0.5;
    data[off + 1] = 1.0;
    data[off + 2] = 0.0;
    data[off + 3] = 2.0;  // clamped
  }
  const auto img = triplane_preview(tri);
  EXPECT_EQ(img.channels, 3u);
  ASSERT_EQ(img.pixels.size(), 9u);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_EQ(img.pixels[p * 3], 255);
    EXPECT_EQ(img.pixels[p * 3 + 1], 0);
    EXPECT_EQ(img.pixels[p * 3 + 2], 255);
  }
}

TEST(Pipeline, ConfigSeedReachesFitAndDiffusion) {
  auto cfg = parse_config("seed = 17\n");
  EXPECT_EQ(fit_config(cfg).seed, 17u);
  EXPECT_EQ(diffusion_train_config(cfg).seed, 17u);
}

TEST(Pipeline, PerceptualFlagInstallsHook) {
  EXPECT_FALSE(fit_config(parse_config("")).weights.hook);
  EXPECT_TRUE(fit_config(parse_config("[fit]\nperceptual = true\n")).weights.hook);
}

TEST(Pipeline, TrainingViewsFollowConfig) {
  const auto cfg = parse_config("[views]\ncount = 3\nsize = 6\noracle_samples = 512\n");
  const auto views = training_views(cfg);
  ASSERT_EQ(views.size(), 3u);
  EXPECT_EQ(views[0].camera.width, 6u);
  EXPECT_EQ(views[0].target.image.size(), 6u * 6u * 3u);
}

TEST(Pipeline, ConstantDatasetHasOneExample) {
  const auto cfg = parse_config(
      "[diffusion]\ndataset = constant\nconstant_value = 0.25\nresolution = 4\n"
      "cross_line_index = 2\n");
  const auto data = diffusion_dataset(cfg);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data[0].x0.resolution(), 4u);
  for (Real v : data[0].x0.tensor().data()) EXPECT_EQ(v, 0.25);
}

TEST(Pipeline, ToyDatasetIsConsistentInDataSpace) {
  const auto cfg = parse_config("[diffusion]\ndataset_size = 6\nresolution = 8\ncross_line_index = 4\n");
  const auto data = diffusion_dataset(cfg);
  ASSERT_EQ(data.size(), 6u);
  std::vector<Triplane> planes;
  for (const auto& ex : data) planes.push_back(from_model_space(ex.x0));
  EXPECT_LT(mean_consistency(planes), 0.05);
}

TEST(AblationReport, RelativeReduction) {
  AblationReport r;
  r.consistency_with_oa = 0.1;
  r.consistency_without_oa = 0.4;
  EXPECT_DOUBLE_EQ(r.relative_reduction(), 0.75);
  const auto m = ablation_metrics(r);
  EXPECT_NE(m.str().find("relative_reduction=0.75\n"), std::string::npos);
  EXPECT_NE(ablation_table(r).find("oa_off"), std::string::npos);
}
