#pragma once

#include <filesystem>

#include "esr/inference.hpp"

namespace esr {

// Binary bank file: magic "ESRB", version, then mode, energy settings, omega
// and every head, all little-endian with 64-bit parameter values, closed by a
// CRC-32 trailer. Round-trips bit-exactly.
void save_bank(const std::filesystem::path& path, const ModelBank& bank);

// Rejects wrong magic/version, truncation, structural garbage and checksum
// mismatches; never returns a partial bank.
ModelBank load_bank(const std::filesystem::path& path);

}  // namespace esr
