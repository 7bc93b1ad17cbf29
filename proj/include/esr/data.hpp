#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace esr {

// How consecutive stages relate: new classes per stage (cil), same classes
// under a per-stage domain shift (dil), or both at once (xdcil).
enum class StreamMode { kCil, kDil, kXdcil };

std::string to_string(StreamMode mode);
StreamMode parse_stream_mode(const std::string& text);

// One embedded example. Features are stored in 32-bit precision and promoted
// to 64-bit wherever math happens.
struct FeatureRecord {
  int stage_id = 1;
  int label = 0;
  std::vector<float> features;
};

// All data belonging to one stage of the stream. label_set is strictly
// increasing and defines the head's local class order.
struct StageDataset {
  int stage_id = 1;
  std::vector<int> label_set;
  std::vector<FeatureRecord> train;
  std::vector<FeatureRecord> test;
  int domain_tag = 0;

  void validate() const;
};

// Recipe for a synthetic stream of Gaussian class clusters. Cluster means sit
// on a sphere of radius `separation`; samples add isotropic noise of scale
// `noise_scale`; dil/xdcil stages after the first add a shift vector of
// magnitude `domain_shift` to every mean.
struct StreamSpec {
  StreamMode mode = StreamMode::kCil;
  int num_stages = 5;
  int classes_per_stage = 2;
  std::size_t feature_dim = 16;
  int train_per_class = 100;
  int test_per_class = 50;
  double separation = 10.0;
  double domain_shift = 0.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// Deterministic stream generation: a pure function of the spec.
std::vector<StageDataset> generate_stream(const StreamSpec& spec);

// Enforces per-dataset invariants plus the cross-stage label structure:
// disjoint label sets for cil/xdcil, identical label sets for dil.
void validate_stream(std::span<const StageDataset> stages, StreamMode mode);

// Structural error in a serialized input, with the position that triggered it
// (byte offset for binary files, line number for the manifest).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::uint64_t offset)
      : std::runtime_error(message), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Binary embedding file: magic "ESNF", then version, feature dimension and
// record count, then per record stage id, label and the 32-bit features; all
// integers little-endian. Round-trips bit-exactly.
void write_embeddings(const std::filesystem::path& path, std::span<const FeatureRecord> records);
std::vector<FeatureRecord> read_embeddings(const std::filesystem::path& path);

// Plain-text stream description: a `mode` line followed by one
// `stage <id> <train-path> <test-path>` line per stage.
struct StreamManifest {
  struct Entry {
    int stage_id = 1;
    std::filesystem::path train;
    std::filesystem::path test;
  };

  StreamMode mode = StreamMode::kCil;
  std::vector<Entry> stages;
};

void write_manifest(const std::filesystem::path& path, const StreamManifest& manifest);

// Relative paths in the file are resolved against the manifest's directory.
StreamManifest read_manifest(const std::filesystem::path& path);

// Reads the manifest and every referenced embedding file, reconstructing the
// validated stage stream.
std::vector<StageDataset> load_stream(const std::filesystem::path& manifest_path);

}  // namespace esr
