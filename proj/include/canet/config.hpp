#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "canet/dataset.hpp"
#include "canet/model.hpp"
#include "canet/training.hpp"

// Experiment configuration read from JSON. Every section and key is optional;
// unknown keys are rejected so that typos cannot silently fall back to defaults.
//
//   {
//     "seed": 0,
//     "hold_out": 0,
//     "synth": { "subjects", "samples_per_subject", "pitch_range_deg", "yaw_range_deg",
//                "noise", "face_height", "face_width", "eye_height", "eye_width",
//                "iris_radius_min", "iris_radius_max", "sclera_min", "sclera_max",
//                "aperture_min", "aperture_max" },
//     "model": { "variant", "width_scale", "activation", "z_bias" },
//     "train": { "epochs", "batch_size", "learning_rate", "optimizer", "adam_beta1",
//                "adam_beta2", "adam_eps", "sgd_momentum", "alpha", "beta" }
//   }
//
// "seed" feeds the generator, initialization and shuffling alike.
namespace canet {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::uint16_t hold_out = 0;
  data::SynthConfig synth;
  ModelConfig model;
  training::TrainConfig train;

  /// Desk-scale profile: width 1/8, 56x56 faces, 18x30 eyes, 6 subjects of
  /// 300 noise-free samples with gaze within +-20 degrees.
  static ExperimentConfig desk();

  /// Copies `seed` into the generator and trainer and the dataset geometry
  /// into the model input sizes.
  void sync();
  void validate() const;
};

/// Overlays JSON text onto `base`. Throws ConfigError on malformed JSON, a
/// wrong value type, or an unknown key (naming its path).
ExperimentConfig parse_config(std::string_view json_text, ExperimentConfig base = ExperimentConfig::desk());
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = ExperimentConfig::desk());

/// "relu" or "tanh"; anything else is a ConfigError.
CandidateActivation parse_activation(std::string_view name);

}  // namespace canet
