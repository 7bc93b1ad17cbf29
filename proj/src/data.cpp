#include "esr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "bytes.hpp"
#include "esr/rng.hpp"

namespace esr {

std::string to_string(StreamMode mode) {
  switch (mode) {
    case StreamMode::kCil:
      return "cil";
    case StreamMode::kDil:
      return "dil";
    case StreamMode::kXdcil:
      return "xdcil";
  }
  throw std::invalid_argument("to_string: unknown stream mode");
}

StreamMode parse_stream_mode(const std::string& text) {
  if (text == "cil") return StreamMode::kCil;
  if (text == "dil") return StreamMode::kDil;
  if (text == "xdcil") return StreamMode::kXdcil;
  throw std::invalid_argument("parse_stream_mode: expected cil, dil or xdcil, got '" + text + "'");
}

void StageDataset::validate() const {
  if (stage_id < 1) {
    throw std::invalid_argument("StageDataset: stage id must be >= 1");
  }
  if (label_set.empty()) {
    throw std::invalid_argument("StageDataset: empty label set");
  }
  for (std::size_t i = 0; i + 1 < label_set.size(); ++i) {
    if (label_set[i] >= label_set[i + 1]) {
      throw std::invalid_argument("StageDataset: label set must be strictly increasing");
    }
  }
  if (label_set.front() < 0) {
    throw std::invalid_argument("StageDataset: negative label");
  }
  std::size_t dim = 0;
  const auto check_records = [&](const std::vector<FeatureRecord>& records, const char* split) {
    for (const FeatureRecord& r : records) {
      if (r.stage_id != stage_id) {
        throw std::invalid_argument(std::string("StageDataset: ") + split + " record carries stage " +
                                    std::to_string(r.stage_id) + " inside stage " +
                                    std::to_string(stage_id));
      }
      if (!std::binary_search(label_set.begin(), label_set.end(), r.label)) {
        throw std::invalid_argument(std::string("StageDataset: ") + split + " label " +
                                    std::to_string(r.label) + " not in label set");
      }
      if (r.features.empty()) {
        throw std::invalid_argument("StageDataset: empty feature vector");
      }
      if (dim == 0) {
        dim = r.features.size();
      } else if (r.features.size() != dim) {
        throw std::invalid_argument("StageDataset: inconsistent feature dimension");
      }
      for (float v : r.features) {
        if (!std::isfinite(v)) {
          throw std::invalid_argument("StageDataset: non-finite feature value");
        }
      }
    }
  };
  check_records(train, "train");
  check_records(test, "test");
}

void StreamSpec::validate() const {
  if (num_stages < 1 || classes_per_stage < 1 || train_per_class < 1 || test_per_class < 1) {
    throw std::invalid_argument("StreamSpec: counts must be >= 1");
  }
  if (feature_dim == 0) {
    throw std::invalid_argument("StreamSpec: feature dimension must be >= 1");
  }
  if (!(separation > 0.0) || !std::isfinite(separation)) {
    throw std::invalid_argument("StreamSpec: separation must be positive");
  }
  if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) {
    throw std::invalid_argument("StreamSpec: noise scale must be positive");
  }
  if (!std::isfinite(domain_shift)) {
    throw std::invalid_argument("StreamSpec: domain shift must be finite");
  }
}

namespace {

constexpr std::uint64_t kStreamSeedTag = 0x53545245414du;  // "STREAM"

// Direction drawn uniformly on the unit sphere via normalized Gaussians.
std::vector<double> unit_direction(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (;;) {
    double norm_sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm_sq += x * x;
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > 1e-12) {
      for (double& x : v) x /= norm;
      return v;
    }
  }
}

}  // namespace

std::vector<StageDataset> generate_stream(const StreamSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, kStreamSeedTag));

  const std::size_t stages = static_cast<std::size_t>(spec.num_stages);
  const std::size_t per_stage = static_cast<std::size_t>(spec.classes_per_stage);
  const bool fresh_labels = spec.mode != StreamMode::kDil;
  const std::size_t total_classes = fresh_labels ? stages * per_stage : per_stage;

  // Draw order is pinned: all class means first, then per stage the shift
  // vector (dil/xdcil, stages after the first) and the per-class samples.
  std::vector<std::vector<double>> means(total_classes);
  for (auto& m : means) {
    m = unit_direction(rng, spec.feature_dim);
    for (double& x : m) x *= spec.separation;
  }

  std::vector<StageDataset> stream;
  stream.reserve(stages);
  for (std::size_t s = 1; s <= stages; ++s) {
    StageDataset ds;
    ds.stage_id = static_cast<int>(s);
    ds.domain_tag = spec.mode == StreamMode::kCil ? 0 : static_cast<int>(s) - 1;

    std::vector<double> shift(spec.feature_dim, 0.0);
    if (spec.mode != StreamMode::kCil && s > 1) {
      shift = unit_direction(rng, spec.feature_dim);
      for (double& x : shift) x *= spec.domain_shift;
    }

    for (std::size_t k = 0; k < per_stage; ++k) {
      ds.label_set.push_back(static_cast<int>(fresh_labels ? (s - 1) * per_stage + k : k));
    }

    const auto sample_split = [&](int count, std::vector<FeatureRecord>& out) {
      for (std::size_t k = 0; k < per_stage; ++k) {
        const std::size_t class_index = fresh_labels ? (s - 1) * per_stage + k : k;
        for (int i = 0; i < count; ++i) {
          FeatureRecord r;
          r.stage_id = static_cast<int>(s);
          r.label = ds.label_set[k];
          r.features.resize(spec.feature_dim);
          for (std::size_t d = 0; d < spec.feature_dim; ++d) {
            const double value = means[class_index][d] + shift[d] + spec.noise_scale * rng.normal();
            r.features[d] = static_cast<float>(value);
          }
          out.push_back(std::move(r));
        }
      }
    };
    sample_split(spec.train_per_class, ds.train);
    sample_split(spec.test_per_class, ds.test);
    stream.push_back(std::move(ds));
  }

  validate_stream(stream, spec.mode);
  return stream;
}

void validate_stream(std::span<const StageDataset> stages, StreamMode mode) {
  if (stages.empty()) {
    throw std::invalid_argument("validate_stream: empty stream");
  }
  std::size_t dim = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].validate();
    if (stages[i].stage_id != static_cast<int>(i) + 1) {
      throw std::invalid_argument("validate_stream: stage ids must run 1.." +
                                  std::to_string(stages.size()) + " in order");
    }
    for (const auto* split : {&stages[i].train, &stages[i].test}) {
      if (!split->empty()) {
        const std::size_t d = split->front().features.size();
        if (dim == 0) dim = d;
        if (d != dim) {
          throw std::invalid_argument("validate_stream: feature dimension differs across stages");
        }
      }
    }
  }
  if (mode == StreamMode::kDil) {
    for (std::size_t i = 1; i < stages.size(); ++i) {
      if (stages[i].label_set != stages[0].label_set) {
        throw std::invalid_argument("validate_stream: dil stages must share one label set");
      }
    }
  } else {
    std::set<int> seen;
    for (const StageDataset& ds : stages) {
      for (int label : ds.label_set) {
        if (!seen.insert(label).second) {
          throw std::invalid_argument("validate_stream: label " + std::to_string(label) +
                                      " appears in more than one stage");
        }
      }
    }
  }
}

namespace {

using detail::get_u16;
using detail::get_u32;
using detail::get_u64;
using detail::put_u16;
using detail::put_u32;
using detail::put_u64;
using detail::read_file_bytes;
using detail::write_file_bytes;

constexpr char kMagic[4] = {'E', 'S', 'N', 'F'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::size_t kHeaderSize = 4 + 4 + 4 + 8;

}  // namespace

void write_embeddings(const std::filesystem::path& path, std::span<const FeatureRecord> records) {
  if (records.empty()) {
    throw std::invalid_argument("write_embeddings: no records");
  }
  const std::size_t dim = records.front().features.size();
  if (dim == 0 || dim > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("write_embeddings: unsupported feature dimension");
  }
  for (const FeatureRecord& r : records) {
    if (r.features.size() != dim) {
      throw std::invalid_argument("write_embeddings: inconsistent feature dimension");
    }
    if (r.stage_id < 1 || r.stage_id > 0xffff) {
      throw std::invalid_argument("write_embeddings: stage id " + std::to_string(r.stage_id) +
                                  " outside the 16-bit range");
    }
    if (r.label < 0) {
      throw std::invalid_argument("write_embeddings: negative label");
    }
  }

  std::string out;
  out.reserve(kHeaderSize + records.size() * (2 + 4 + 4 * dim));
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(dim));
  put_u64(out, records.size());
  for (const FeatureRecord& r : records) {
    put_u16(out, static_cast<std::uint16_t>(r.stage_id));
    put_u32(out, static_cast<std::uint32_t>(r.label));
    for (float f : r.features) {
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  write_file_bytes(path, out, "write_embeddings");
}

std::vector<FeatureRecord> read_embeddings(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path, "read_embeddings");

  if (bytes.size() < kHeaderSize) {
    throw ParseError("read_embeddings: file ends at byte " + std::to_string(bytes.size()) +
                         " inside the " + std::to_string(kHeaderSize) + "-byte header",
                     bytes.size());
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("read_embeddings: bad magic at byte 0, expected \"ESNF\"", 0);
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kFormatVersion) {
    throw ParseError("read_embeddings: unsupported version " + std::to_string(version) +
                         " at byte 4, expected " + std::to_string(kFormatVersion),
                     4);
  }
  const std::uint32_t dim = get_u32(bytes, 8);
  const std::uint64_t count = get_u64(bytes, 12);
  if (dim == 0 && count > 0) {
    throw ParseError("read_embeddings: zero feature dimension at byte 8 with nonzero record count",
                     8);
  }

  const std::uint64_t record_size = 2 + 4 + 4ull * dim;
  const std::uint64_t expected = kHeaderSize + count * record_size;
  if (bytes.size() < expected) {
    throw ParseError("read_embeddings: truncated payload: file ends at byte " +
                         std::to_string(bytes.size()) + ", " + std::to_string(count) +
                         " records need " + std::to_string(expected) + " bytes",
                     bytes.size());
  }
  if (bytes.size() > expected) {
    throw ParseError("read_embeddings: trailing data after the final record at byte " +
                         std::to_string(expected),
                     expected);
  }

  std::vector<FeatureRecord> records(count);
  std::size_t at = kHeaderSize;
  for (std::uint64_t i = 0; i < count; ++i) {
    FeatureRecord& r = records[i];
    const std::uint16_t stage = get_u16(bytes, at);
    if (stage == 0) {
      throw ParseError("read_embeddings: record " + std::to_string(i) + " has stage id 0 at byte " +
                           std::to_string(at),
                       at);
    }
    r.stage_id = stage;
    r.label = static_cast<int>(get_u32(bytes, at + 2));
    if (r.label < 0) {
      throw ParseError("read_embeddings: record " + std::to_string(i) +
                           " label exceeds the supported range at byte " + std::to_string(at + 2),
                       at + 2);
    }
    r.features.resize(dim);
    for (std::uint32_t d = 0; d < dim; ++d) {
      const std::size_t fat = at + 6 + 4ull * d;
      r.features[d] = std::bit_cast<float>(get_u32(bytes, fat));
      if (!std::isfinite(r.features[d])) {
        throw ParseError("read_embeddings: non-finite feature value in record " + std::to_string(i) +
                             " at byte " + std::to_string(fat),
                         fat);
      }
    }
    at += record_size;
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, const StreamManifest& manifest) {
  if (manifest.stages.empty()) {
    throw std::invalid_argument("write_manifest: no stages");
  }
  std::ostringstream out;
  out << "mode " << to_string(manifest.mode) << "\n";
  for (const StreamManifest::Entry& e : manifest.stages) {
    out << "stage " << e.stage_id << " " << e.train.generic_string() << " "
        << e.test.generic_string() << "\n";
  }
  write_file_bytes(path, std::move(out).str(), "write_manifest");
}

StreamManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("read_manifest: cannot open '" + path.string() + "'");
  }
  const std::filesystem::path base = path.parent_path();
  const auto resolve = [&base](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };

  StreamManifest manifest;
  bool saw_mode = false;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string keyword;
    if (!(tokens >> keyword) || keyword[0] == '#') {
      continue;
    }
    if (keyword == "mode") {
      std::string mode_text;
      if (!(tokens >> mode_text)) {
        throw ParseError("read_manifest: line " + std::to_string(line_no) + ": missing mode value",
                         line_no);
      }
      if (saw_mode) {
        throw ParseError("read_manifest: line " + std::to_string(line_no) + ": duplicate mode line",
                         line_no);
      }
      try {
        manifest.mode = parse_stream_mode(mode_text);
      } catch (const std::invalid_argument&) {
        throw ParseError("read_manifest: line " + std::to_string(line_no) + ": unknown mode '" +
                             mode_text + "'",
                         line_no);
      }
      saw_mode = true;
    } else if (keyword == "stage") {
      StreamManifest::Entry entry;
      std::string train_text;
      std::string test_text;
      if (!(tokens >> entry.stage_id >> train_text >> test_text)) {
        throw ParseError("read_manifest: line " + std::to_string(line_no) +
                             ": expected 'stage <id> <train> <test>'",
                         line_no);
      }
      entry.train = resolve(train_text);
      entry.test = resolve(test_text);
      manifest.stages.push_back(std::move(entry));
    } else {
      throw ParseError("read_manifest: line " + std::to_string(line_no) + ": unknown keyword '" +
                           keyword + "'",
                       line_no);
    }
  }
  if (!saw_mode) {
    throw ParseError("read_manifest: missing mode line", line_no);
  }
  if (manifest.stages.empty()) {
    throw ParseError("read_manifest: no stage lines", line_no);
  }
  for (std::size_t i = 0; i < manifest.stages.size(); ++i) {
    if (manifest.stages[i].stage_id != static_cast<int>(i) + 1) {
      throw ParseError("read_manifest: stage ids must run 1.." +
                           std::to_string(manifest.stages.size()) + " in order",
                       line_no);
    }
  }
  return manifest;
}

std::vector<StageDataset> load_stream(const std::filesystem::path& manifest_path) {
  const StreamManifest manifest = read_manifest(manifest_path);
  std::vector<StageDataset> stream;
  stream.reserve(manifest.stages.size());
  for (const StreamManifest::Entry& entry : manifest.stages) {
    StageDataset ds;
    ds.stage_id = entry.stage_id;
    ds.domain_tag = manifest.mode == StreamMode::kCil ? 0 : entry.stage_id - 1;
    ds.train = read_embeddings(entry.train);
    ds.test = read_embeddings(entry.test);

    std::set<int> labels;
    for (const auto* split : {&ds.train, &ds.test}) {
      for (const FeatureRecord& r : *split) {
        if (r.stage_id != ds.stage_id) {
          throw std::runtime_error("load_stream: '" + entry.train.string() + "' / '" +
                                   entry.test.string() + "': record carries stage " +
                                   std::to_string(r.stage_id) + ", manifest says " +
                                   std::to_string(ds.stage_id));
        }
        labels.insert(r.label);
      }
    }
    ds.label_set.assign(labels.begin(), labels.end());
    stream.push_back(std::move(ds));
  }
  validate_stream(stream, manifest.mode);
  return stream;
}

}  // namespace esr
