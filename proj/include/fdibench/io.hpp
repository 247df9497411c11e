#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fdibench/detectors.hpp"
#include "fdibench/resilience.hpp"
#include "fdibench/transformer.hpp"

namespace fdibench::io {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

std::string sha256_hex(const std::string& bytes);
std::string file_digest(const fs::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

/// %.17g: round-trips every double.
std::string number(double v);

std::vector<std::string> channel_names(const std::vector<ChannelTag>& channels);

std::string run_csv(const sim::RunRecord& run);
std::string residues_csv(const ekf::ResidueSequence& seq);
std::string verdicts_csv(const detect::VerdictStream& verdicts, const std::string& detector);
std::string events_csv(const std::vector<resilience::Event>& events);

struct ResidueFile {
    ekf::ResidueSequence sequence;
    ModelId model = ModelId::ModelI;
    bool labeled = false;
};

/// Metadata document written next to residues.csv.
std::string residues_json(const ekf::ResidueSequence& seq, ModelId model, bool labeled);

/// Reads residues.csv and its .json sidecar (same stem). Throws IoError on
/// missing files and ConfigError on schema problems.
ResidueFile read_residues(const fs::path& csv_path);

/// All files named *residues.csv below `dir`, sorted by path.
std::vector<fs::path> find_residue_files(const fs::path& dir);

/// Binary checkpoint: u64 little-endian header length, JSON header
/// (format version, hyperparameters, block names and sizes), then each block
/// as little-endian float64 in ModelParams::blocks() order.
std::string checkpoint_bytes(const transformer::ModelParams& params);
transformer::ModelParams read_checkpoint(const fs::path& path);
transformer::ModelParams parse_checkpoint(const std::string& bytes);

}  // namespace fdibench::io
