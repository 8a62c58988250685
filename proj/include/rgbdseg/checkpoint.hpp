#pragma once

// Checkpoint directory layout: config.cfg (full run configuration), a
// manifest mapping parameter names to tensor files, and one .tnsr file per
// parameter. Loading rebuilds the model from the config and overwrites every
// parameter, so a checkpoint restores training and evaluation state exactly.

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rgbdseg/config.hpp"
#include "rgbdseg/errors.hpp"
#include "rgbdseg/model.hpp"
#include "rgbdseg/tensor_io.hpp"

namespace rgbdseg {

inline constexpr const char* kCheckpointFormat = "checkpoint-v1";

inline void save_checkpoint(const std::filesystem::path& dir, const SegModel& model,
                            const RunConfig& config) {
  std::filesystem::create_directories(dir);
  save_run_config(dir / "config.cfg", config);
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  if (!manifest) throw IoError("cannot write checkpoint manifest in " + dir.string());
  manifest << "format = " << kCheckpointFormat << "\n";
  for (const auto& [name, tensor] : named_params(model)) {
    const std::string file = name + ".tnsr";
    save_tensor(dir / file, tensor);
    manifest << name << " = " << file << "\n";
  }
  if (!manifest) throw IoError("failed writing checkpoint manifest in " + dir.string());
}

struct Checkpoint {
  RunConfig config;
  SegModel model;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot open checkpoint manifest: " + manifest_path.string());

  std::unordered_map<std::string, std::string> files;
  std::string line;
  bool saw_format = false;
  while (std::getline(manifest, line)) {
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw IoError("malformed checkpoint manifest line: " + t);
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (!saw_format) {
      if (key != "format" || value != kCheckpointFormat)
        throw IoError("unsupported checkpoint format in " + manifest_path.string());
      saw_format = true;
      continue;
    }
    if (!files.emplace(key, value).second)
      throw IoError("duplicate parameter in checkpoint manifest: " + key);
  }
  if (!saw_format) throw IoError("checkpoint manifest missing format line");

  Checkpoint ckpt{load_run_config(dir / "config.cfg"), SegModel{}};
  ckpt.model = SegModel::init(ModelConfig::from_run_config(ckpt.config), ckpt.config.seed);

  auto params = named_params(ckpt.model);
  if (files.size() != params.size())
    throw IoError("checkpoint manifest lists " + std::to_string(files.size()) +
                  " parameters, model has " + std::to_string(params.size()));
  for (auto& [name, tensor] : params) {
    const auto it = files.find(name);
    if (it == files.end()) throw IoError("checkpoint is missing parameter: " + name);
    const Tensor loaded = load_tensor(dir / it->second);
    if (loaded.shape() != tensor.shape())
      throw IoError("checkpoint parameter " + name + " has shape " + shape_str(loaded.shape()) +
                    ", model expects " + shape_str(tensor.shape()));
    tensor.mutable_data() = loaded.data();
  }
  return ckpt;
}

}  // namespace rgbdseg
