#pragma once

// Binary container I/O.
//
// Two layouts share the same block encoding (raw little-endian scalars):
//
//  * single file:  [u64 header_length][JSON header][block 0][block 1]...
//    The JSON header carries a "blocks" array of {name, dtype, shape} in
//    file order; dtype is one of "f64", "f32", "u32". Used for meshes and
//    weight checkpoints.
//
//  * directory:    manifest.json + one <name>.<dtype> file per array.
//    Used for dataset containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qpat/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "block containers assume a little-endian host");

namespace qpat {

using json = nlohmann::json;

namespace detail {

template <class T>
void write_raw(std::ostream& os, const T* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data),
           std::streamsize(count * sizeof(T)));
}

template <class T>
void read_raw(std::istream& is, T* data, std::size_t count) {
  is.read(reinterpret_cast<char*>(data), std::streamsize(count * sizeof(T)));
  if (!is) throw std::runtime_error("container: short read");
}

inline std::size_t shape_count(const json& shape) {
  std::size_t n = 1;
  for (const auto& d : shape) n *= d.get<std::size_t>();
  return n;
}

}  // namespace detail

class ContainerWriter {
 public:
  json header = json::object();

  void add_f64(const std::string& name, std::vector<double> data,
               std::vector<std::size_t> shape) {
    add(name, "f64", shape);
    f64_.push_back(std::move(data));
    order_.push_back({0, f64_.size() - 1});
  }
  void add_f32(const std::string& name, std::vector<float> data,
               std::vector<std::size_t> shape) {
    add(name, "f32", shape);
    f32_.push_back(std::move(data));
    order_.push_back({1, f32_.size() - 1});
  }
  void add_u32(const std::string& name, std::vector<std::uint32_t> data,
               std::vector<std::size_t> shape) {
    add(name, "u32", shape);
    u32_.push_back(std::move(data));
    order_.push_back({2, u32_.size() - 1});
  }

  void write(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    const std::string head = header.dump();
    const std::uint64_t len = head.size();
    detail::write_raw(os, &len, 1);
    os.write(head.data(), std::streamsize(head.size()));
    for (auto [kind, idx] : order_) {
      switch (kind) {
        case 0: detail::write_raw(os, f64_[idx].data(), f64_[idx].size()); break;
        case 1: detail::write_raw(os, f32_[idx].data(), f32_[idx].size()); break;
        case 2: detail::write_raw(os, u32_[idx].data(), u32_[idx].size()); break;
      }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
  }

 private:
  void add(const std::string& name, const char* dtype,
           const std::vector<std::size_t>& shape) {
    if (!header.contains("blocks")) header["blocks"] = json::array();
    header["blocks"].push_back(
        {{"name", name}, {"dtype", dtype}, {"shape", shape}});
  }
  std::vector<std::vector<double>> f64_;
  std::vector<std::vector<float>> f32_;
  std::vector<std::vector<std::uint32_t>> u32_;
  std::vector<std::pair<int, std::size_t>> order_;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::uint64_t len = 0;
    detail::read_raw(is, &len, 1);
    std::string head(len, '\0');
    is.read(head.data(), std::streamsize(len));
    if (!is) throw std::runtime_error("container: truncated header: " + path);
    header = json::parse(head);
    for (const auto& b : header.value("blocks", json::array())) {
      const std::string dtype = b.at("dtype");
      const std::size_t count = detail::shape_count(b.at("shape"));
      Entry e;
      e.meta = b;
      if (dtype == "f64") {
        e.f64.resize(count);
        detail::read_raw(is, e.f64.data(), count);
      } else if (dtype == "f32") {
        e.f32.resize(count);
        detail::read_raw(is, e.f32.data(), count);
      } else if (dtype == "u32") {
        e.u32.resize(count);
        detail::read_raw(is, e.u32.data(), count);
      } else {
        throw std::runtime_error("container: unknown dtype " + dtype);
      }
      entries_.push_back(std::move(e));
    }
  }

  json header;

  const std::vector<double>& f64(const std::string& name) const {
    return find(name).f64;
  }
  const std::vector<float>& f32(const std::string& name) const {
    return find(name).f32;
  }
  const std::vector<std::uint32_t>& u32(const std::string& name) const {
    return find(name).u32;
  }
  std::vector<std::size_t> shape(const std::string& name) const {
    return find(name).meta.at("shape").get<std::vector<std::size_t>>();
  }

 private:
  struct Entry {
    json meta;
    std::vector<double> f64;
    std::vector<float> f32;
    std::vector<std::uint32_t> u32;
  };
  const Entry& find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.meta.at("name") == name) return e;
    throw std::runtime_error("container: no block named " + name);
  }
  std::vector<Entry> entries_;
};

// --- directory-container helpers -------------------------------------------

template <class T>
void write_block_file(const std::filesystem::path& path,
                      const std::vector<T>& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  detail::write_raw(os, data.data(), data.size());
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

template <class T>
std::vector<T> read_block_file(const std::filesystem::path& path,
                               std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  std::vector<T> data(count);
  detail::read_raw(is, data.data(), count);
  return data;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return json::parse(is);
}

}  // namespace qpat
