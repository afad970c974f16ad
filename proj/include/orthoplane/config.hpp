#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "orthoplane/diffusion.hpp"
#include "orthoplane/scenes.hpp"
#include "orthoplane/training.hpp"

namespace orthoplane {

// Raised for malformed or unknown configuration entries; the message names
// the line and key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneSection {
  SceneKind kind = SceneKind::cube;
  SceneParams params;
  std::uint64_t seed = 0;
};

struct ViewsSection {
  std::size_t count = 8;
  std::size_t size = 64;
  Real radius = 3.0;
  Real elevation = 25.0;
  Real fov = 0.75;
  Real azimuth_offset = 22.5;
  std::size_t oracle_samples = 1024;
};

struct EvalSection {
  std::vector<Real> heldout_azimuths{0.0, 90.0, 180.0, 270.0};
  std::vector<Real> unseen_azimuths{37.0, 130.0};
  Real min_heldout_psnr = 0.0;  // 0 disables the check
  Real min_unseen_psnr = 0.0;
};

struct RenderSection {
  Real radius = 3.0;
  Real fov = 0.75;
  std::size_t samples = 64;
};

struct DiffusionSection {
  std::string dataset = "toy";  // toy or constant
  std::size_t dataset_size = 512;
  std::uint64_t dataset_seed = 11;
  Real constant_value = 0.4;
  std::size_t samples = 64;
  DiffusionTrainConfig train;
};

// Every field has a default; a config file overrides any subset.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  SceneSection scene;
  ViewsSection views;
  FitConfig fit;
  bool perceptual = false;
  EvalSection eval;
  RenderSection render;
  DiffusionSection diffusion;
};

// Lines are "key = value", "[section]" headers prefix later keys with
// "section.", and '#' starts a comment. Unknown keys, duplicate keys and
// unparsable values raise ConfigError.
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);

// Sorted list of accepted keys.
std::vector<std::string> config_keys();

}  // namespace orthoplane
