#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <string>

#include "orthoplane/config.hpp"

using namespace orthoplane;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text, "run.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ParseConfig, EmptyTextGivesDefaults) {
  const auto cfg = parse_config("");
  EXPECT_EQ(cfg.seed, 0u);
  EXPECT_EQ(cfg.scene.kind, SceneKind::cube);
  EXPECT_EQ(cfg.views.count, 8u);
  EXPECT_EQ(cfg.views.size, 64u);
  EXPECT_EQ(cfg.fit.iterations, 3000u);
  EXPECT_EQ(cfg.diffusion.train.weight_decay, 0.03);
  EXPECT_EQ(cfg.fit.weight_decay, 0.03);
  EXPECT_EQ(cfg.eval.heldout_azimuths, (std::vector<Real>{0, 90, 180, 270}));
}

TEST(ParseConfig, SectionsCommentsAndWhitespace) {
  const auto cfg = parse_config(
      "  seed = 42   # trailing comment\n"
      "# full-line comment\n"
      "\n"
      "[scene]\n"
      "kind=sphere\n"
      "[ fit ]\n"
      "iterations = 10\n"
      "stratified = false\n"
      "lr_triplane = 1e-2\n"
      "[eval]\n"
      "unseen_azimuths = 12.5, -40 ,400\n"
      "[diffusion]\n"
      "orthogonal = 0\n");
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.scene.kind, SceneKind::sphere);
  EXPECT_EQ(cfg.fit.iterations, 10u);
  EXPECT_FALSE(cfg.fit.stratified);
  EXPECT_EQ(cfg.fit.lr_triplane, 1e-2);
  EXPECT_EQ(cfg.eval.unseen_azimuths, (std::vector<Real>{12.5, -40, 400}));
  EXPECT_FALSE(cfg.diffusion.train.denoiser.orthogonal);
}

TEST(ParseConfig, UnknownKeyNamesLineAndKey) {
  const auto msg = error_of("seed = 1\n\n[fit]\nlearning_rate = 3\n");
  EXPECT_NE(msg.find("run.cfg:4"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'fit.learning_rate'"), std::string::npos) << msg;
}

TEST(ParseConfig, KeyOutsideItsSectionIsUnknown) {
  EXPECT_NE(error_of("iterations = 3\n").find("unknown key 'iterations'"), std::string::npos);
}

TEST(ParseConfig, DuplicateKeyRejected) {
  const auto msg = error_of("[fit]\nhidden = 8\n[scene]\nkind = cube\n[fit]\nhidden = 9\n");
  EXPECT_NE(msg.find("run.cfg:6"), std::string::npos) << msg;
  EXPECT_NE(msg.find("set twice"), std::string::npos) << msg;
}

TEST(ParseConfig, MalformedValuesNameLineAndKey) {
  struct Case {
    std::string text;
    std::string expect;
  };
  const Case cases[] = {
      {"seed = -1\n", "run.cfg:1: key 'seed'"},
      {"seed = 1.5\n", "run.cfg:1: key 'seed'"},
      {"[fit]\nlr_heads = abc\n", "run.cfg:2: key 'fit.lr_heads'"},
      {"[fit]\nlr_heads = nan\n", "run.cfg:2: key 'fit.lr_heads'"},
      {"[fit]\nstratified = yes\n", "run.cfg:2: key 'fit.stratified'"},
      {"[views]\ncount = 0\n", "run.cfg:2: key 'views.count'"},
      {"[views]\noracle_samples = 100\n", "run.cfg:2: key 'views.oracle_samples'"},
      {"[scene]\nkind = torus\n", "run.cfg:2: key 'scene.kind'"},
      {"[eval]\nheldout_azimuths = 0,,90\n", "run.cfg:2: key 'eval.heldout_azimuths'"},
      {"[diffusion]\ndataset = imagenet\n", "run.cfg:2: key 'diffusion.dataset'"},
      {"[diffusion]\nstaging = sometimes\n", "run.cfg:2: key 'diffusion.staging'"},
  };
  for (const auto& c : cases) {
    const auto msg = error_of(c.text);
    EXPECT_NE(msg.find(c.expect), std::string::npos) << c.text << " -> " << msg;
  }
}

TEST(ParseConfig, SyntaxErrorsNameLine) {
  EXPECT_NE(error_of("seed 3\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(error_of("\n[fit\n").find("run.cfg:2"), std::string::npos);
  EXPECT_NE(error_of("= 3\n").find("run.cfg:1"), std::string::npos);
}

TEST(ParseConfig, CrossFieldChecks) {
  EXPECT_NE(error_of("[views]\nradius = 1.5\n").find("views.radius"), std::string::npos);
  EXPECT_NE(error_of("[render]\nradius = 1\n").find("render.radius"), std::string::npos);
  EXPECT_FALSE(error_of("[diffusion]\nstaging = two_phase\n").empty());
  EXPECT_TRUE(error_of("[diffusion]\nstaging = two_phase\nadapters = true\nsteps = 20\n"
                       "phase1_steps = 10\n")
                  .empty());
}

TEST(LoadConfig, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST(LoadConfig, ShippedConfigsParse) {
  for (const auto& e : std::filesystem::directory_iterator(ORTHOPLANE_CONFIG_DIR)) {
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
  }
}

TEST(ConfigKeys, SortedAndComplete) {
  const auto keys = config_keys();
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  for (const char* k : {"seed", "out", "fit.iterations", "diffusion.orthogonal", "render.samples",
                        "eval.min_unseen_psnr", "views.azimuth_offset"}) {
    EXPECT_TRUE(std::binary_search(keys.begin(), keys.end(), std::string(k))) << k;
  }
}
