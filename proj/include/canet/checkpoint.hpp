#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "canet/model.hpp"

// Model checkpoints are weight files whose first entry is a one-element tensor
// named "meta/<key>=<value>;...". The name records what is needed to rebuild
// the model: variant, width scale, input geometry and candidate activation.
// Every parameter and batch-norm buffer follows under its dotted name.
namespace canet {

std::string checkpoint_metadata(const ModelConfig& config);
/// Throws FormatError when the entry is not a well-formed metadata name.
ModelConfig parse_checkpoint_metadata(const std::string& name);

void save_checkpoint(const std::filesystem::path& path, const GazeModel<float>& model);

/// Rebuilds the model from metadata and copies every tensor in. Throws
/// FormatError on missing, unexpected, or mis-shaped tensors.
std::unique_ptr<GazeModel<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace canet
