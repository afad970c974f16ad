#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

// Little-endian primitives shared by the checkpoint formats. Readers throw
// std::runtime_error naming the field that could not be read.
namespace orthoplane::binary {

void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_f32(std::ostream& out, float v);
void write_f32s(std::ostream& out, std::span<const double> values);
void write_tag(std::ostream& out, const char (&tag)[5]);
void write_string(std::ostream& out, const std::string& s);

std::uint16_t read_u16(std::istream& in, const char* field);
std::uint32_t read_u32(std::istream& in, const char* field);
std::vector<double> read_f32s(std::istream& in, std::size_t count, const char* field);
void expect_tag(std::istream& in, const char (&tag)[5], const char* field);
std::string read_string(std::istream& in, const char* field);

}  // namespace orthoplane::binary
