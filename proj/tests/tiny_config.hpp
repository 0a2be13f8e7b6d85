#pragma once

#include "diffex/config.hpp"

// Small enough that the whole pipeline runs in well under a second.
inline const char* kTinyConfigJson = R"({
  "schema_version": 1,
  "seed": 5,
  "datagen": {"n": 60, "side": 16},
  "classifier": {"epochs": 1, "width": 4, "feature_dim": 8},
  "sdae": {"T": 50, "ddim_steps": 5, "epochs": 1, "d_z": 8, "base_channels": 4, "emb_dim": 16},
  "directions": {"K": 2, "epochs": 2, "batch_size": 16, "d_f": 16, "hidden": 8},
  "ranking": {"pool_size": 4, "n_steps": 3, "n_max": 2, "tau_rank": 0.01, "per_image_delta": 0.02},
  "explain": {"n_examples": 2, "metric_samples": 4, "n_steps": 3}
})";

inline diffex::config::ExperimentConfig tiny_config() { return diffex::config::parse_config_text(kTinyConfigJson); }
