#pragma once

#include <string>

#include "vicl/backbone.hpp"
#include "vicl/diffusion.hpp"
#include "vicl/training.hpp"

namespace vicl {

// One JSON document drives a run: model architecture, training schedule, and
// sampler settings. Parsing is strict — any unknown key at any level is a
// config error, so typos fail before any work starts.
struct RunConfig {
    BackboneConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    std::string text;  // the original document, echoed into checkpoints
};

RunConfig parse_run_config(const std::string& json_text);

// Reads and parses the file; missing/unreadable file is a data error.
RunConfig load_run_config(const std::string& path);

}  // namespace vicl
