#include "orthoplane/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace orthoplane {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Entry {
  std::string key;
  std::string value;
  std::string where;  // "source:line"

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(where + ": key '" + key + "' " + what);
  }

  Real real() const {
    Real v = 0;
    const auto* end = value.data() + value.size();
    auto [p, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || p != end || !std::isfinite(v)) fail("expects a number, got '" + value + "'");
    return v;
  }
  Real positive() const {
    const Real v = real();
    if (!(v > 0)) fail("must be positive, got '" + value + "'");
    return v;
  }
  Real non_negative() const {
    const Real v = real();
    if (v < 0) fail("must be non-negative, got '" + value + "'");
    return v;
  }
  std::uint64_t integer() const {
    std::uint64_t v = 0;
    const auto* end = value.data() + value.size();
    auto [p, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || p != end) fail("expects a non-negative integer, got '" + value + "'");
    return v;
  }
  std::size_t count() const {
    const auto v = integer();
    if (v == 0) fail("must be at least 1");
    return static_cast<std::size_t>(v);
  }
  bool boolean() const {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail("expects true or false, got '" + value + "'");
  }
  std::vector<Real> reals() const {
    std::vector<Real> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      Entry part{key, trim(item), where};
      out.push_back(part.real());
    }
    return out;
  }
};

using Setter = std::function<void(RunConfig&, const Entry&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["seed"] = [](RunConfig& c, const Entry& e) { c.seed = e.integer(); };
    t["out"] = [](RunConfig& c, const Entry& e) {
      if (e.value.empty()) e.fail("must not be empty");
      c.out = e.value;
    };

    t["scene.kind"] = [](RunConfig& c, const Entry& e) {
      try {
        c.scene.kind = parse_scene_kind(e.value);
      } catch (const std::invalid_argument&) {
        e.fail("expects vacuum, sphere, cube or two_blob, got '" + e.value + "'");
      }
    };
    t["scene.seed"] = [](RunConfig& c, const Entry& e) { c.scene.seed = e.integer(); };
    t["scene.radius"] = [](RunConfig& c, const Entry& e) { c.scene.params.radius = e.positive(); };
    t["scene.density"] = [](RunConfig& c, const Entry& e) { c.scene.params.density = e.positive(); };
    t["scene.half_extent"] = [](RunConfig& c, const Entry& e) {
      c.scene.params.half_extent = e.positive();
    };
    t["scene.edge_width"] = [](RunConfig& c, const Entry& e) {
      c.scene.params.edge_width = e.non_negative();
    };
    t["scene.blob_width"] = [](RunConfig& c, const Entry& e) {
      c.scene.params.blob_width = e.positive();
    };

    t["views.count"] = [](RunConfig& c, const Entry& e) { c.views.count = e.count(); };
    t["views.size"] = [](RunConfig& c, const Entry& e) { c.views.size = e.count(); };
    t["views.radius"] = [](RunConfig& c, const Entry& e) { c.views.radius = e.positive(); };
    t["views.elevation"] = [](RunConfig& c, const Entry& e) { c.views.elevation = e.real(); };
    t["views.fov"] = [](RunConfig& c, const Entry& e) { c.views.fov = e.positive(); };
    t["views.azimuth_offset"] = [](RunConfig& c, const Entry& e) { c.views.azimuth_offset = e.real(); };
    t["views.oracle_samples"] = [](RunConfig& c, const Entry& e) {
      c.views.oracle_samples = e.count();
      if (c.views.oracle_samples < 512) e.fail("must be at least 512");
    };

    t["fit.iterations"] = [](RunConfig& c, const Entry& e) { c.fit.iterations = e.count(); };
    t["fit.batch_rays"] = [](RunConfig& c, const Entry& e) { c.fit.batch_rays = e.count(); };
    t["fit.samples"] = [](RunConfig& c, const Entry& e) { c.fit.samples = e.count(); };
    t["fit.stratified"] = [](RunConfig& c, const Entry& e) { c.fit.stratified = e.boolean(); };
    t["fit.resolution"] = [](RunConfig& c, const Entry& e) { c.fit.resolution = e.count(); };
    t["fit.channels"] = [](RunConfig& c, const Entry& e) { c.fit.channels = e.count(); };
    t["fit.hidden"] = [](RunConfig& c, const Entry& e) { c.fit.hidden = e.count(); };
    t["fit.depth"] = [](RunConfig& c, const Entry& e) { c.fit.depth = e.integer(); };
    t["fit.frequencies"] = [](RunConfig& c, const Entry& e) { c.fit.frequencies = e.integer(); };
    t["fit.density_bias"] = [](RunConfig& c, const Entry& e) { c.fit.density_bias = e.real(); };
    t["fit.init_std"] = [](RunConfig& c, const Entry& e) { c.fit.init_std = e.non_negative(); };
    t["fit.lr_triplane"] = [](RunConfig& c, const Entry& e) { c.fit.lr_triplane = e.positive(); };
    t["fit.lr_heads"] = [](RunConfig& c, const Entry& e) { c.fit.lr_heads = e.positive(); };
    t["fit.weight_decay"] = [](RunConfig& c, const Entry& e) {
      c.fit.weight_decay = e.non_negative();
    };
    t["fit.validate_every"] = [](RunConfig& c, const Entry& e) { c.fit.validate_every = e.count(); };
    t["fit.validation_rays"] = [](RunConfig& c, const Entry& e) {
      c.fit.validation_rays = e.count();
    };
    t["fit.mask_weight"] = [](RunConfig& c, const Entry& e) { c.fit.weights.mask = e.non_negative(); };
    t["fit.depth_weight"] = [](RunConfig& c, const Entry& e) {
      c.fit.weights.depth = e.non_negative();
    };
    t["fit.perceptual_weight"] = [](RunConfig& c, const Entry& e) {
      c.fit.weights.perceptual = e.non_negative();
    };
    t["fit.perceptual"] = [](RunConfig& c, const Entry& e) { c.perceptual = e.boolean(); };

    t["eval.heldout_azimuths"] = [](RunConfig& c, const Entry& e) {
      c.eval.heldout_azimuths = e.reals();
    };
    t["eval.unseen_azimuths"] = [](RunConfig& c, const Entry& e) {
      c.eval.unseen_azimuths = e.reals();
    };
    t["eval.min_heldout_psnr"] = [](RunConfig& c, const Entry& e) {
      c.eval.min_heldout_psnr = e.non_negative();
    };
    t["eval.min_unseen_psnr"] = [](RunConfig& c, const Entry& e) {
      c.eval.min_unseen_psnr = e.non_negative();
    };

    t["render.radius"] = [](RunConfig& c, const Entry& e) { c.render.radius = e.positive(); };
    t["render.fov"] = [](RunConfig& c, const Entry& e) { c.render.fov = e.positive(); };
    t["render.samples"] = [](RunConfig& c, const Entry& e) { c.render.samples = e.count(); };

    auto& d = t;
    d["diffusion.dataset"] = [](RunConfig& c, const Entry& e) {
      if (e.value != "toy" && e.value != "constant") e.fail("expects toy or constant");
      c.diffusion.dataset = e.value;
    };
    d["diffusion.dataset_size"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.dataset_size = e.count();
    };
    d["diffusion.dataset_seed"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.dataset_seed = e.integer();
    };
    d["diffusion.constant_value"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.constant_value = e.real();
    };
    d["diffusion.samples"] = [](RunConfig& c, const Entry& e) { c.diffusion.samples = e.count(); };
    d["diffusion.steps"] = [](RunConfig& c, const Entry& e) { c.diffusion.train.steps = e.count(); };
    d["diffusion.batch"] = [](RunConfig& c, const Entry& e) { c.diffusion.train.batch = e.count(); };
    d["diffusion.lr"] = [](RunConfig& c, const Entry& e) { c.diffusion.train.lr = e.positive(); };
    d["diffusion.weight_decay"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.weight_decay = e.non_negative();
    };
    d["diffusion.schedule_steps"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.schedule_steps = e.count();
    };
    d["diffusion.beta_start"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.beta_start = e.positive();
    };
    d["diffusion.beta_end"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.beta_end = e.positive();
    };
    d["diffusion.staging"] = [](RunConfig& c, const Entry& e) {
      if (e.value == "end_to_end") {
        c.diffusion.train.staging = Staging::end_to_end;
      } else if (e.value == "two_phase") {
        c.diffusion.train.staging = Staging::two_phase;
      } else {
        e.fail("expects end_to_end or two_phase, got '" + e.value + "'");
      }
    };
    d["diffusion.phase1_steps"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.phase1_steps = e.count();
    };
    auto den = [](auto member) {
      return [member](RunConfig& c, const Entry& e) { c.diffusion.train.denoiser.*member = e.count(); };
    };
    d["diffusion.resolution"] = den(&DenoiserConfig::resolution);
    d["diffusion.channels"] = den(&DenoiserConfig::channels);
    d["diffusion.hidden"] = den(&DenoiserConfig::hidden);
    d["diffusion.levels"] = den(&DenoiserConfig::levels);
    d["diffusion.key_dim"] = den(&DenoiserConfig::key_dim);
    d["diffusion.heads"] = den(&DenoiserConfig::heads);
    d["diffusion.text_width"] = den(&DenoiserConfig::text_width);
    d["diffusion.time_width"] = den(&DenoiserConfig::time_width);
    d["diffusion.cross_line_index"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.denoiser.cross_line_index = e.integer();
    };
    d["diffusion.orthogonal"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.denoiser.orthogonal = e.boolean();
    };
    d["diffusion.adapters"] = [](RunConfig& c, const Entry& e) {
      c.diffusion.train.denoiser.adapters = e.boolean();
    };
    return t;
  }();
  return table;
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(where + ": malformed section header '" + line + "'");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": missing key before '='");
    if (!section.empty()) key = section + "." + key;
    const Entry entry{key, trim(line.substr(eq + 1)), where};
    auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) entry.fail("is set twice");
    it->second(cfg, entry);
  }
  // Cross-field checks reuse the modules' own validation.
  try {
    make_scene(cfg.scene.kind, cfg.scene.params, cfg.scene.seed);
    cfg.fit.weights.validate();
    cfg.diffusion.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (cfg.views.radius <= std::sqrt(3.0)) {
    throw ConfigError(source + ": key 'views.radius' must exceed sqrt(3)");
  }
  if (cfg.render.radius <= std::sqrt(3.0)) {
    throw ConfigError(source + ": key 'render.radius' must exceed sqrt(3)");
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : setters()) keys.push_back(k);
  return keys;
}

}  // namespace orthoplane
