#include "esr/bank_io.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "bytes.hpp"

namespace esr {

namespace {

using detail::get_u32;
using detail::get_u64;
using detail::put_u32;
using detail::put_u64;

constexpr char kMagic[4] = {'E', 'S', 'R', 'B'};
constexpr std::uint32_t kBankVersion = 1;

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_layer(std::string& out, const AffineLayer& layer) {
  put_u32(out, static_cast<std::uint32_t>(layer.weight.rows));
  put_u32(out, static_cast<std::uint32_t>(layer.weight.cols));
  for (double v : layer.weight.data) put_f64(out, v);
  for (double v : layer.bias) put_f64(out, v);
}

// Sequential reader with bounds checks; every failure carries the offset.
class Cursor {
 public:
  Cursor(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::size_t at() const { return at_; }

  std::uint32_t u32() {
    need(4, "32-bit field");
    const std::uint32_t v = get_u32(bytes_, at_);
    at_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8, "64-bit field");
    const std::uint64_t v = get_u64(bytes_, at_);
    at_ += 8;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  void finish() const {
    if (at_ != end_) {
      throw ParseError("load_bank: trailing data after the bank payload at byte " +
                           std::to_string(at_),
                       at_);
    }
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (at_ + n > end_) {
      throw ParseError("load_bank: truncated " + std::string(what) + " at byte " +
                           std::to_string(at_),
                       at_);
    }
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t at_ = 8;  // past magic and version
};

AffineLayer read_layer(Cursor& cur) {
  AffineLayer layer;
  const std::uint32_t rows = cur.u32();
  const std::uint32_t cols = cur.u32();
  if (rows == 0 || cols == 0 || static_cast<std::uint64_t>(rows) * cols > (1u << 28)) {
    throw ParseError("load_bank: implausible layer shape at byte " + std::to_string(cur.at()),
                     cur.at());
  }
  layer.weight = Matrix(rows, cols);
  for (double& v : layer.weight.data) v = cur.f64();
  layer.bias.resize(rows);
  for (double& v : layer.bias) v = cur.f64();
  return layer;
}

}  // namespace

void save_bank(const std::filesystem::path& path, const ModelBank& bank) {
  bank.validate();

  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kBankVersion);

  put_u32(out, static_cast<std::uint32_t>(bank.mode));
  put_f64(out, bank.cfg.anchor);
  put_f64(out, bank.cfg.lambda);
  put_f64(out, bank.cfg.train_temperature);

  put_u32(out, static_cast<std::uint32_t>(bank.omega.size()));
  for (double t : bank.omega) put_f64(out, t);

  put_u32(out, static_cast<std::uint32_t>(bank.heads.size()));
  for (const StageHead& head : bank.heads) {
    put_u32(out, static_cast<std::uint32_t>(head.stage_id));
    put_u32(out, static_cast<std::uint32_t>(head.label_set.size()));
    for (int label : head.label_set) put_u32(out, static_cast<std::uint32_t>(label));
    put_u32(out, head.params.hidden ? 1 : 0);
    if (head.params.hidden) put_layer(out, *head.params.hidden);
    put_layer(out, head.params.output);
  }

  put_u32(out, detail::crc32(out, 0, out.size()));
  detail::write_file_bytes(path, out, "save_bank");
}

ModelBank load_bank(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path, "load_bank");
  if (bytes.size() < 12) {
    throw ParseError("load_bank: file of " + std::to_string(bytes.size()) +
                         " bytes is shorter than the minimal bank",
                     bytes.size());
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("load_bank: bad magic at byte 0, expected \"ESRB\"", 0);
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kBankVersion) {
    throw ParseError("load_bank: unsupported version " + std::to_string(version) + " at byte 4", 4);
  }
  const std::size_t payload_end = bytes.size() - 4;
  const std::uint32_t stored = get_u32(bytes, payload_end);
  const std::uint32_t actual = detail::crc32(bytes, 0, payload_end);
  if (stored != actual) {
    throw ParseError("load_bank: checksum mismatch at byte " + std::to_string(payload_end),
                     payload_end);
  }

  Cursor cur(bytes, payload_end);
  ModelBank bank;
  const std::uint32_t mode = cur.u32();
  if (mode > 2) {
    throw ParseError("load_bank: unknown stream mode " + std::to_string(mode), cur.at());
  }
  bank.mode = static_cast<StreamMode>(mode);
  bank.cfg.anchor = cur.f64();
  bank.cfg.lambda = cur.f64();
  bank.cfg.train_temperature = cur.f64();

  const std::uint32_t omega_count = cur.u32();
  bank.omega.resize(omega_count);
  for (double& t : bank.omega) t = cur.f64();

  const std::uint32_t head_count = cur.u32();
  bank.heads.resize(head_count);
  for (StageHead& head : bank.heads) {
    head.stage_id = static_cast<int>(cur.u32());
    const std::uint32_t labels = cur.u32();
    if (labels == 0 || labels > (1u << 24)) {
      throw ParseError("load_bank: implausible label count at byte " + std::to_string(cur.at()),
                       cur.at());
    }
    head.label_set.resize(labels);
    for (int& label : head.label_set) label = static_cast<int>(cur.u32());
    const std::uint32_t has_hidden = cur.u32();
    if (has_hidden > 1) {
      throw ParseError("load_bank: corrupt hidden-layer flag at byte " + std::to_string(cur.at()),
                       cur.at());
    }
    if (has_hidden == 1) head.params.hidden = read_layer(cur);
    head.params.output = read_layer(cur);
  }
  cur.finish();

  bank.validate();
  return bank;
}

}  // namespace esr
