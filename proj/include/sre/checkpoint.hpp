#pragma once

// SREC checkpoint container: little-endian binary, magic "SREC", format
// version u32, then a count-prefixed list of (name length, utf-8 name, rank,
// extents, 32-bit float payload).

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace sre {

struct CheckpointEntry {
    std::string name;
    std::vector<uint64_t> extents;  // empty = scalar
    std::vector<float> data;
};

class Checkpoint {
  public:
    void put(const std::string& name, std::vector<uint64_t> extents, std::vector<float> data);
    void put_scalar(const std::string& name, double v);
    void put_string(const std::string& name, const std::string& text);  // byte-valued floats

    bool has(const std::string& name) const;
    const CheckpointEntry& entry(const std::string& name) const;
    double scalar(const std::string& name) const;
    std::string string_value(const std::string& name) const;

    const std::vector<CheckpointEntry>& entries() const { return entries_; }
    std::vector<uint8_t> serialize() const;

  private:
    std::vector<CheckpointEntry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

}  // namespace sre
