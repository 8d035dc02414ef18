#include "wxgan/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "wxgan/common.hpp"

using nlohmann::json;

namespace wxgan {

namespace {

void store_u64_le(unsigned char* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = (v >> (8 * i)) & 0xff;
}
uint64_t load_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointState& st,
                     const std::vector<std::pair<std::string, Tensor*>>& blocks) {
  json header;
  header["format_version"] = st.format_version;
  header["config_hash"] = st.config_hash;
  header["epoch"] = st.epoch;
  header["step"] = st.step;
  header["rng"] = st.rng;
  header["counters"] = st.counters;

  int64_t offset = 0;
  json blist = json::array();
  for (const auto& [name, tensor] : blocks) {
    json b;
    b["name"] = name;
    b["shape"] = tensor->shape;
    b["offset"] = offset;
    blist.push_back(std::move(b));
    offset += tensor->numel() * 4;
  }
  header["blocks"] = std::move(blist);

  std::string htext = header.dump();
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    unsigned char lenbuf[8];
    store_u64_le(lenbuf, htext.size());
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(htext.data(), std::streamsize(htext.size()));
    std::vector<unsigned char> buf;
    for (const auto& [name, tensor] : blocks) {
      buf.resize(size_t(tensor->numel()) * 4);
      const float* src = tensor->ptr();
      for (int64_t i = 0; i < tensor->numel(); ++i) store_f32_le(buf.data() + i * 4, src[i]);
      out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    }
    if (!out) throw DataError("short write to " + tmp);
  }
  // write-then-rename so an interrupted save never corrupts the previous file
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move " + tmp + " to " + path);
}

CheckpointState load_checkpoint(const std::string& path, uint64_t expect_hash,
                                const std::vector<std::pair<std::string, Tensor*>>& blocks,
                                bool allow_extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  if (in.gcount() != 8) throw DataError("truncated checkpoint header in " + path);
  uint64_t hlen = load_u64_le(lenbuf);
  if (hlen == 0 || hlen > (64u << 20)) throw DataError("implausible header length in " + path);
  std::string htext(size_t(hlen), '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (uint64_t(in.gcount()) != hlen) throw DataError("truncated checkpoint header in " + path);

  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header in " + path + ": " + e.what());
  }

  CheckpointState st;
  try {
    st.format_version = header.at("format_version").get<int>();
    st.config_hash = header.at("config_hash").get<uint64_t>();
    st.epoch = header.at("epoch").get<int64_t>();
    st.step = header.at("step").get<int64_t>();
    st.rng = header.at("rng").get<std::map<std::string, std::string>>();
    st.counters = header.at("counters").get<std::map<std::string, int64_t>>();
  } catch (const json::exception& e) {
    throw DataError("incomplete checkpoint header in " + path + ": " + e.what());
  }
  if (st.format_version != 1) throw DataError("unsupported checkpoint format version in " + path);
  if (expect_hash != 0 && st.config_hash != expect_hash)
    throw ConfigError("checkpoint " + path + " was written under a different config (hash mismatch)");

  struct Entry {
    std::vector<int> shape;
    int64_t offset = 0;
  };
  std::map<std::string, Entry> index;
  try {
    for (const auto& b : header.at("blocks")) {
      Entry e;
      e.shape = b.at("shape").get<std::vector<int>>();
      e.offset = b.at("offset").get<int64_t>();
      index.emplace(b.at("name").get<std::string>(), std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed block table in " + path + ": " + e.what());
  }
  if (!allow_extra && index.size() != blocks.size())
    throw DataError("checkpoint " + path + " holds " + std::to_string(index.size()) + " blocks, expected " +
                    std::to_string(blocks.size()));

  int64_t data_start = int64_t(8 + hlen);
  std::vector<unsigned char> buf;
  for (const auto& [name, tensor] : blocks) {
    auto it = index.find(name);
    if (it == index.end()) throw DataError("checkpoint " + path + " is missing block '" + name + "'");
    if (it->second.shape != tensor->shape)
      throw DataError("checkpoint " + path + ": block '" + name + "' has mismatched shape");
    int64_t bytes = tensor->numel() * 4;
    in.seekg(data_start + it->second.offset);
    buf.resize(size_t(bytes));
    in.read(reinterpret_cast<char*>(buf.data()), bytes);
    if (in.gcount() != bytes) throw DataError("truncated block '" + name + "' in " + path);
    float* dst = tensor->ptr();
    for (int64_t i = 0; i < tensor->numel(); ++i) dst[i] = load_f32_le(buf.data() + i * 4);
  }
  return st;
}

}  // namespace wxgan
