#include "patchflow/flow_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "patchflow/util.hpp"

namespace patchflow {

namespace {

constexpr char kMagic[4] = {'P', 'I', 'E', 'H'};

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 3])) << 24);
}

}  // namespace

void write_flo(const std::filesystem::path& path, const FlowField& flow) {
  for (std::size_t i = 0; i < flow.size(); ++i)
    if (!std::isfinite(flow.u[i]) || !std::isfinite(flow.v[i]))
      throw IoError("write_flo: non-finite flow value at linear index " + std::to_string(i));
  std::string buf;
  buf.reserve(12 + 8 * flow.size());
  buf.append(kMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(flow.width));
  put_u32(buf, static_cast<std::uint32_t>(flow.height));
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      put_f32(buf, static_cast<float>(flow.u[flow.index(y, x)]));
      put_f32(buf, static_cast<float>(flow.v[flow.index(y, x)]));
    }
  write_text_file(path, buf);
}

FlowField read_flo(const std::filesystem::path& path) {
  const std::string buf = read_text_file(path);
  if (buf.size() < 12) throw IoError("read_flo: truncated header in " + path.string());
  if (buf.compare(0, 4, kMagic, 4) != 0)
    throw IoError("read_flo: magic check failed (expected PIEH) in " + path.string());
  const int w = static_cast<int>(get_u32(buf, 4));
  const int h = static_cast<int>(get_u32(buf, 8));
  if (w <= 0 || h <= 0)
    throw IoError("read_flo: non-positive extents " + std::to_string(w) + "x" +
                  std::to_string(h) + " in " + path.string());
  const std::size_t expect = 12 + 8 * static_cast<std::size_t>(w) * h;
  if (buf.size() != expect)
    throw IoError("read_flo: expected " + std::to_string(expect) + " bytes, got " +
                  std::to_string(buf.size()) + " in " + path.string());
  FlowField f = FlowField::zeros(h, w);
  std::size_t off = 12;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      f.u[f.index(y, x)] = std::bit_cast<float>(get_u32(buf, off));
      f.v[f.index(y, x)] = std::bit_cast<float>(get_u32(buf, off + 4));
      off += 8;
    }
  return f;
}

}  // namespace patchflow
