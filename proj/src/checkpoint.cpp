#include "sre/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sre/errors.hpp"

namespace sre {

namespace {

constexpr char kMagic[4] = {'S', 'R', 'E', 'C'};
constexpr uint32_t kVersion = 1;

template <class T>
void append_le(std::vector<uint8_t>& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

template <class T>
T read_le(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw IoError("checkpoint: truncated data");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, std::vector<uint64_t> extents,
                     std::vector<float> data) {
    uint64_t n = 1;
    for (uint64_t e : extents) n *= e;
    if (n != data.size())
        throw ShapeError("checkpoint: entry '" + name + "' extents do not match payload size");
    auto it = index_.find(name);
    if (it != index_.end()) {
        entries_[it->second].extents = std::move(extents);
        entries_[it->second].data = std::move(data);
        return;
    }
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(extents), std::move(data)});
}

void Checkpoint::put_scalar(const std::string& name, double v) {
    put(name, {}, {static_cast<float>(v)});
}

void Checkpoint::put_string(const std::string& name, const std::string& text) {
    std::vector<float> bytes;
    bytes.reserve(text.size());
    for (unsigned char c : text) bytes.push_back(static_cast<float>(c));
    put(name, {static_cast<uint64_t>(bytes.size())}, std::move(bytes));
}

bool Checkpoint::has(const std::string& name) const { return index_.count(name) > 0; }

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint: missing entry '" + name + "'");
    return entries_[it->second];
}

double Checkpoint::scalar(const std::string& name) const {
    const auto& e = entry(name);
    if (e.data.size() != 1) throw ShapeError("checkpoint: entry '" + name + "' is not scalar");
    return static_cast<double>(e.data[0]);
}

std::string Checkpoint::string_value(const std::string& name) const {
    const auto& e = entry(name);
    std::string s;
    s.reserve(e.data.size());
    for (float f : e.data) s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
    return s;
}

std::vector<uint8_t> Checkpoint::serialize() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    append_le<uint32_t>(out, kVersion);
    append_le<uint32_t>(out, static_cast<uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        append_le<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        append_le<uint32_t>(out, static_cast<uint32_t>(e.extents.size()));
        for (uint64_t ext : e.extents) append_le<uint64_t>(out, ext);
        for (float f : e.data) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            append_le<uint32_t>(out, bits);
        }
    }
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic");
    pos = 4;
    uint32_t version = read_le<uint32_t>(bytes, pos);
    if (version != kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = read_le<uint32_t>(bytes, pos);
    Checkpoint ckpt;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_le<uint32_t>(bytes, pos);
        if (pos + name_len > bytes.size()) throw IoError("checkpoint: truncated name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
        pos += name_len;
        uint32_t rank = read_le<uint32_t>(bytes, pos);
        std::vector<uint64_t> extents(rank);
        uint64_t n = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            extents[r] = read_le<uint64_t>(bytes, pos);
            n *= extents[r];
        }
        std::vector<float> data(n);
        for (uint64_t j = 0; j < n; ++j) {
            uint32_t bits = read_le<uint32_t>(bytes, pos);
            std::memcpy(&data[j], &bits, 4);
        }
        ckpt.put(name, std::move(extents), std::move(data));
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<uint8_t> bytes = ckpt.serialize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace sre
