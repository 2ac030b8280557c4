#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpft/tensor.hpp"

namespace mpft {

// MPFT-EMB: little-endian binary container for embedding-space records.
// Layout: magic "MPFTEMB1" (8 bytes), u32 version = 1, u32 d_emb, u32 K,
// u32 N, u32 record_count, then record_count x (u32 client_id, u32 label,
// f32 x d_emb). Values are stored at 32-bit precision; import(export(x))
// reproduces x bit-exactly at that precision.

struct EmbRecord {
    std::uint32_t client_id = 0;
    std::uint32_t label = 0;
    std::vector<float> values;
};

struct EmbFile {
    std::uint32_t d_emb = 0;
    std::uint32_t num_classes = 0;  // K
    std::uint32_t num_clients = 0;  // N
    std::vector<EmbRecord> records;
};

inline constexpr std::uint32_t kEmbFormatVersion = 1;
inline constexpr char kEmbMagic[8] = {'M', 'P', 'F', 'T', 'E', 'M', 'B', '1'};

std::string serialize_emb(const EmbFile& file);
EmbFile deserialize_emb(const std::string& bytes);  // throws ParseError

void write_emb_file(const EmbFile& file, const std::string& path);
EmbFile read_emb_file(const std::string& path);

/// Serialized size in bytes of a payload with `records` records of width d.
std::uint64_t emb_payload_bytes(std::uint64_t records, std::uint64_t d_emb);

}  // namespace mpft
