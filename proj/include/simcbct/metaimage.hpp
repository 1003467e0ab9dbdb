#pragma once

// Single-file MetaImage (.mha) reader/writer: ASCII header followed by an
// uncompressed little-endian payload. Element types: MET_UCHAR, MET_SHORT,
// MET_FLOAT.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "simcbct/volume.hpp"

namespace simcbct::io {

enum class ElementType { uchar, int16, float32 };

inline const char* met_name(ElementType t) {
  switch (t) {
    case ElementType::uchar: return "MET_UCHAR";
    case ElementType::int16: return "MET_SHORT";
    case ElementType::float32: return "MET_FLOAT";
  }
  return "";
}

inline std::size_t element_size(ElementType t) {
  return t == ElementType::uchar ? 1 : (t == ElementType::int16 ? 2 : 4);
}

struct MetaImage {
  Grid grid{};
  ElementType type = ElementType::float32;
  std::vector<double> values;  // decoded payload, x fastest
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::vector<T> parse_list(const std::string& s, std::size_t expect, const std::string& key) {
  std::istringstream in(s);
  std::vector<T> out;
  T v;
  while (in >> v) out.push_back(v);
  if (out.size() != expect)
    throw Error(ErrorKind::io, "metaimage: field " + key + " expects " + std::to_string(expect) +
                                   " values");
  return out;
}

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

}  // namespace detail

inline MetaImage read_metaimage(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());

  std::map<std::string, std::string> fields;
  std::string line;
  bool found_data = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    fields[key] = value;
    if (key == "ElementDataFile") {
      found_data = true;
      break;
    }
  }
  if (!found_data) throw Error(ErrorKind::io, "metaimage: missing ElementDataFile in " + path.string());
  auto get = [&](const std::string& k) -> std::string {
    auto it = fields.find(k);
    if (it == fields.end()) throw Error(ErrorKind::io, "metaimage: missing field " + k);
    return it->second;
  };

  if (std::stoi(get("NDims")) != 3) throw Error(ErrorKind::io, "metaimage: only NDims = 3 supported");
  if (auto it = fields.find("CompressedData"); it != fields.end() && it->second == "True")
    throw Error(ErrorKind::io, "metaimage: compressed data not supported");
  if (auto it = fields.find("BinaryDataByteOrderMSB"); it != fields.end() && it->second == "True")
    throw Error(ErrorKind::io, "metaimage: big-endian payload not supported");
  if (auto it = fields.find("ElementNumberOfChannels"); it != fields.end() && it->second != "1")
    throw Error(ErrorKind::io, "metaimage: multi-channel images not supported");

  MetaImage img;
  const auto dims = detail::parse_list<int>(get("DimSize"), 3, "DimSize");
  img.grid.dims = {dims[0], dims[1], dims[2]};
  if (fields.count("ElementSpacing")) {
    const auto sp = detail::parse_list<double>(fields["ElementSpacing"], 3, "ElementSpacing");
    img.grid.spacing = {sp[0], sp[1], sp[2]};
  }
  const std::string off_key = fields.count("Offset") ? "Offset"
                              : fields.count("Position") ? "Position"
                                                         : "Origin";
  if (fields.count(off_key)) {
    const auto o = detail::parse_list<double>(fields[off_key], 3, off_key);
    img.grid.origin = {o[0], o[1], o[2]};
  }
  img.grid.validate();

  const std::string et = get("ElementType");
  if (et == "MET_UCHAR") img.type = ElementType::uchar;
  else if (et == "MET_SHORT") img.type = ElementType::int16;
  else if (et == "MET_FLOAT") img.type = ElementType::float32;
  else throw Error(ErrorKind::io, "metaimage: unsupported ElementType " + et);

  const std::string data_file = get("ElementDataFile");
  std::ifstream ext;
  std::istream* src = &in;
  if (data_file != "LOCAL") {
    ext.open(path.parent_path() / data_file, std::ios::binary);
    if (!ext) throw Error(ErrorKind::io, "metaimage: cannot open data file " + data_file);
    src = &ext;
  }

  const std::size_t n = img.grid.size();
  std::vector<char> raw(n * element_size(img.type));
  src->read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(src->gcount()) != raw.size())
    throw Error(ErrorKind::io, "metaimage: truncated payload in " + path.string());

  img.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (img.type) {
      case ElementType::uchar:
        img.values[i] = static_cast<unsigned char>(raw[i]);
        break;
      case ElementType::int16: {
        std::int16_t v;
        std::memcpy(&v, raw.data() + 2 * i, 2);
        img.values[i] = detail::byteswap_if_big(v);
        break;
      }
      case ElementType::float32: {
        float v;
        std::memcpy(&v, raw.data() + 4 * i, 4);
        img.values[i] = detail::byteswap_if_big(v);
        break;
      }
    }
  }
  return img;
}

template <typename Getter>
void write_metaimage(const std::filesystem::path& path, const Grid& grid, ElementType type,
                     Getter&& value_at) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  std::ostringstream h;
  h.precision(17);
  h << "ObjectType = Image\n"
    << "NDims = 3\n"
    << "BinaryData = True\n"
    << "BinaryDataByteOrderMSB = False\n"
    << "CompressedData = False\n"
    << "DimSize = " << grid.dims[0] << ' ' << grid.dims[1] << ' ' << grid.dims[2] << '\n'
    << "ElementSpacing = " << grid.spacing.x << ' ' << grid.spacing.y << ' ' << grid.spacing.z << '\n'
    << "Offset = " << grid.origin.x << ' ' << grid.origin.y << ' ' << grid.origin.z << '\n'
    << "ElementType = " << met_name(type) << '\n'
    << "ElementDataFile = LOCAL\n";
  const std::string header = h.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  const std::size_t n = grid.size();
  std::vector<char> raw(n * element_size(type));
  for (std::size_t i = 0; i < n; ++i) {
    const double v = value_at(i);
    switch (type) {
      case ElementType::uchar:
        raw[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L)));
        break;
      case ElementType::int16: {
        const auto s = detail::byteswap_if_big(
            static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L)));
        std::memcpy(raw.data() + 2 * i, &s, 2);
        break;
      }
      case ElementType::float32: {
        const auto f = detail::byteswap_if_big(static_cast<float>(v));
        std::memcpy(raw.data() + 4 * i, &f, 4);
        break;
      }
    }
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

inline void write_volume(const std::filesystem::path& path, const Volume3D& v,
                         ElementType type = ElementType::float32) {
  write_metaimage(path, v.grid(), type, [&](std::size_t i) { return static_cast<double>(v[i]); });
}

inline Volume3D read_volume(const std::filesystem::path& path, Unit unit = Unit::hu) {
  MetaImage img = read_metaimage(path);
  std::vector<float> vals(img.values.begin(), img.values.end());
  return Volume3D(img.grid, unit, std::move(vals));
}

inline void write_mask(const std::filesystem::path& path, const BinaryMask& m) {
  write_metaimage(path, m.grid(), ElementType::uchar, [&](std::size_t i) { return m[i] ? 1.0 : 0.0; });
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
  MetaImage img = read_metaimage(path);
  BinaryMask m(img.grid);
  for (std::size_t i = 0; i < img.values.size(); ++i) m.set(i, img.values[i] != 0.0);
  return m;
}

/// Vector fields are stored as three scalar files with _x/_y/_z suffixes.
inline void write_vector_field(const std::filesystem::path& stem, const VectorField& f) {
  const std::string base = stem.string();
  const std::vector<float>* comps[3] = {&f.x, &f.y, &f.z};
  const char* suffix[3] = {"_x.mha", "_y.mha", "_z.mha"};
  for (int c = 0; c < 3; ++c)
    write_metaimage(base + suffix[c], f.grid, ElementType::float32,
                    [&](std::size_t i) { return static_cast<double>((*comps[c])[i]); });
}

inline VectorField read_vector_field(const std::filesystem::path& stem) {
  const std::string base = stem.string();
  MetaImage cx = read_metaimage(base + "_x.mha");
  MetaImage cy = read_metaimage(base + "_y.mha");
  MetaImage cz = read_metaimage(base + "_z.mha");
  if (cx.grid != cy.grid || cx.grid != cz.grid)
    throw Error(ErrorKind::io, "vector field components disagree on geometry");
  VectorField f(cx.grid);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.x[i] = static_cast<float>(cx.values[i]);
    f.y[i] = static_cast<float>(cy.values[i]);
    f.z[i] = static_cast<float>(cz.values[i]);
  }
  return f;
}

}  // namespace simcbct::io
