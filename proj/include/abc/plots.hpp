#pragma once

// Figure emission from a run directory: PCA scatter of the embedding dump,
// MI-vs-sigma curves and per-class retrieval grids, written as PNG files
// whose names carry the config hash.

#include <filesystem>
#include <string>
#include <vector>

namespace abc {

// Points drawn in the PCA scatter (the fit uses the whole dump).
inline constexpr std::size_t kScatterPoints = 256;
inline constexpr int kRetrievalRows = 8;

// kinds: "pca" (needs embeddings.csv), "mi_sigma" (mi_sweep.csv), "retrieval"
// (config.json, checkpoint.pt). Throws MissingArtifactError naming every
// missing file before drawing anything; ConfigError on an unknown kind.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir,
                                              const std::vector<std::string>& kinds);

}  // namespace abc
