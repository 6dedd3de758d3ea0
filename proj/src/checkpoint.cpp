#include "ctvae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace ctvae {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'V', 'K'};

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }

uint32_t crc_of(const char* data, size_t len) {
    return static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const unsigned char*>(data), static_cast<uInt>(len)));
}

// Cursor over an in-memory file image; every read is bounds-checked.
struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("checkpoint: truncated file");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint8_t>(buf[pos]) |
                     (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string out = buf.substr(pos, n);
        pos += n;
        return out;
    }
};

}  // namespace

void write_checkpoint_file(const std::string& path, const RawCheckpoint& ck) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u16(out, kCheckpointVersion);

    std::string header = ck.header.dump();
    put_u64(out, header.size());
    out += header;

    put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& e : ck.tensors) {
        if (e.data.size() != static_cast<size_t>(e.rows) * e.cols)
            throw CheckpointError("checkpoint: tensor '" + e.name + "' payload size mismatch");
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out += e.name;
        put_u32(out, e.rows);
        put_u32(out, e.cols);
        std::string payload;
        payload.reserve(e.data.size() * 4);
        for (float v : e.data) put_f32(payload, v);
        out += payload;
        put_u32(out, crc_of(payload.data(), payload.size()));
    }
    put_u32(out, crc_of(out.data(), out.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

RawCheckpoint read_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf};
    if (r.bytes(4) != std::string(kMagic, sizeof(kMagic)))
        throw CheckpointError("checkpoint: bad magic, not a checkpoint file");
    uint16_t version = r.u16();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) +
                              " (expected " + std::to_string(kCheckpointVersion) + ")");

    // the trailer covers everything before it, so any later parse step runs
    // on bytes already known to be intact
    if (buf.size() < 4) throw CheckpointError("checkpoint: truncated file");
    Reader tail{buf, buf.size() - 4};
    uint32_t stored = tail.u32();
    if (crc_of(buf.data(), buf.size() - 4) != stored)
        throw CheckpointError("checkpoint: file checksum mismatch");

    RawCheckpoint ck;
    uint64_t header_len = r.u64();
    std::string header = r.bytes(header_len);
    try {
        ck.header = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
    }

    uint32_t count = r.u32();
    ck.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        RawTensorEntry e;
        e.name = r.bytes(r.u32());
        e.rows = r.u32();
        e.cols = r.u32();
        size_t n = static_cast<size_t>(e.rows) * e.cols;
        std::string payload = r.bytes(n * 4);
        uint32_t payload_crc = r.u32();
        if (crc_of(payload.data(), payload.size()) != payload_crc)
            throw CheckpointError("checkpoint: payload checksum mismatch in tensor '" + e.name +
                                  "'");
        e.data.resize(n);
        for (size_t j = 0; j < n; ++j) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<uint32_t>(static_cast<uint8_t>(payload[j * 4 + b])) << (8 * b);
            e.data[j] = std::bit_cast<float>(bits);
        }
        ck.tensors.push_back(std::move(e));
    }
    if (r.pos != buf.size() - 4)
        throw CheckpointError("checkpoint: trailing bytes after tensor table");
    return ck;
}

}  // namespace ctvae
