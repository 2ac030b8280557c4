#include "mpft/emb_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mpft {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("MPFT-EMB parse error at byte " + std::to_string(pos) +
                         ": " + what);
    }

    std::uint32_t u32(const char* field) {
        if (pos + 4 > bytes.size())
            fail(std::string("truncated while reading ") + field);
        const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        std::uint32_t v = static_cast<std::uint32_t>(b[0]) |
                          (static_cast<std::uint32_t>(b[1]) << 8) |
                          (static_cast<std::uint32_t>(b[2]) << 16) |
                          (static_cast<std::uint32_t>(b[3]) << 24);
        pos += 4;
        return v;
    }

    float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
};

}  // namespace

std::string serialize_emb(const EmbFile& file) {
    std::string out;
    out.reserve(28 + file.records.size() * (8 + 4ull * file.d_emb));
    out.append(kEmbMagic, sizeof(kEmbMagic));
    put_u32(out, kEmbFormatVersion);
    put_u32(out, file.d_emb);
    put_u32(out, file.num_classes);
    put_u32(out, file.num_clients);
    put_u32(out, static_cast<std::uint32_t>(file.records.size()));
    for (const auto& rec : file.records) {
        if (rec.values.size() != file.d_emb)
            throw std::invalid_argument("serialize_emb: record width != d_emb");
        put_u32(out, rec.client_id);
        put_u32(out, rec.label);
        for (const float v : rec.values) put_f32(out, v);
    }
    return out;
}

EmbFile deserialize_emb(const std::string& bytes) {
    Reader r{bytes};
    if (bytes.empty()) r.fail("missing header");
    if (bytes.size() < sizeof(kEmbMagic)) r.fail("truncated magic");
    if (std::memcmp(bytes.data(), kEmbMagic, sizeof(kEmbMagic)) != 0)
        r.fail("bad magic");
    r.pos = sizeof(kEmbMagic);

    const std::uint32_t version = r.u32("version");
    if (version != kEmbFormatVersion) {
        r.pos -= 4;
        r.fail("unsupported version " + std::to_string(version));
    }

    EmbFile file;
    file.d_emb = r.u32("d_emb");
    if (file.d_emb == 0) {
        r.pos -= 4;
        r.fail("d_emb must be positive");
    }
    file.num_classes = r.u32("class count");
    file.num_clients = r.u32("client count");
    const std::uint32_t count = r.u32("record count");

    file.records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        EmbRecord rec;
        const std::size_t record_start = r.pos;
        rec.client_id = r.u32("record client_id");
        rec.label = r.u32("record label");
        if (rec.client_id >= file.num_clients) {
            r.pos = record_start;
            r.fail("client_id " + std::to_string(rec.client_id) +
                   " >= declared client count " + std::to_string(file.num_clients));
        }
        if (rec.label >= file.num_classes) {
            r.pos = record_start + 4;
            r.fail("label " + std::to_string(rec.label) +
                   " >= declared class count " + std::to_string(file.num_classes));
        }
        rec.values.resize(file.d_emb);
        for (std::uint32_t d = 0; d < file.d_emb; ++d)
            rec.values[d] = r.f32("record value");
        file.records.push_back(std::move(rec));
    }
    if (r.pos != bytes.size()) r.fail("trailing bytes after last record");
    return file;
}

void write_emb_file(const EmbFile& file, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const std::string bytes = serialize_emb(file);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

EmbFile read_emb_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return deserialize_emb(bytes);
}

std::uint64_t emb_payload_bytes(std::uint64_t records, std::uint64_t d_emb) {
    return 28 + records * (8 + 4 * d_emb);
}

}  // namespace mpft
