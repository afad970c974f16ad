#include "orthoplane/binary_io.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace orthoplane::binary {

namespace {

void put(std::ostream& out, std::uint32_t v, int bytes) {
  char buf[4];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, bytes);
}

std::uint32_t get(std::istream& in, int bytes, const char* field) {
  unsigned char buf[4] = {};
  if (!in.read(reinterpret_cast<char*>(buf), bytes)) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + field);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u16(std::ostream& out, std::uint16_t v) { put(out, v, 2); }
void write_u32(std::ostream& out, std::uint32_t v) { put(out, v, 4); }
void write_f32(std::ostream& out, float v) { put(out, std::bit_cast<std::uint32_t>(v), 4); }

void write_f32s(std::ostream& out, std::span<const double> values) {
  for (double v : values) write_f32(out, static_cast<float>(v));
}

void write_tag(std::ostream& out, const char (&tag)[5]) { out.write(tag, 4); }

void write_string(std::ostream& out, const std::string& s) {
  write_u16(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint16_t read_u16(std::istream& in, const char* field) {
  return static_cast<std::uint16_t>(get(in, 2, field));
}

std::uint32_t read_u32(std::istream& in, const char* field) { return get(in, 4, field); }

std::vector<double> read_f32s(std::istream& in, std::size_t count, const char* field) {
  std::vector<double> values(count);
  for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(get(in, 4, field)));
  return values;
}

void expect_tag(std::istream& in, const char (&tag)[5], const char* field) {
  char buf[4];
  if (!in.read(buf, 4)) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + field);
  }
  if (std::memcmp(buf, tag, 4) != 0) {
    throw std::runtime_error(std::string("checkpoint: bad ") + field + " (expected \"" + tag +
                             "\")");
  }
}

std::string read_string(std::istream& in, const char* field) {
  const auto n = read_u16(in, field);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + field);
  }
  return s;
}

}  // namespace orthoplane::binary
