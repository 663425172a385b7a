#include "bita/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace bita {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void Checkpoint::put(const std::string& name, std::vector<std::size_t> shape,
                     const std::vector<double>& values) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  if (n != values.size()) {
    throw std::invalid_argument("Checkpoint::put: shape does not match data: " +
                                name);
  }
  std::vector<float> f(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) f[i] = (float)values[i];
  shapes[name] = std::move(shape);
  tensors[name] = std::move(f);
}

std::vector<double> Checkpoint::get(
    const std::string& name, const std::vector<std::size_t>& expect_shape) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
  const auto& shape = shapes.at(name);
  if (shape != expect_shape) {
    std::ostringstream os;
    os << "checkpoint: shape mismatch for tensor '" << name << "': stored [";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      os << (i ? "," : "") << shape[i];
    }
    os << "], expected [";
    for (std::size_t i = 0; i < expect_shape.size(); ++i) {
      os << (i ? "," : "") << expect_shape[i];
    }
    os << "]";
    throw std::runtime_error(os.str());
  }
  std::vector<double> out(it->second.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = it->second[i];
  return out;
}

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  json header;
  header["stage"] = ckpt.stage;
  header["vocab"] = ckpt.vocab_tokens;
  header["optim_step"] = ckpt.optim_step;
  json tensors = json::object();
  for (const auto& [name, shape] : ckpt.shapes) {
    tensors[name] = {{"shape", shape}, {"dtype", "f32"}};
  }
  header["tensors"] = tensors;
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write("BITA", 4);
  write_u32(out, Checkpoint::kVersion);
  write_u64(out, header_bytes.size());
  out.write(header_bytes.data(), (std::streamsize)header_bytes.size());

  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, data] : ckpt.tensors) {  // std::map: name order
    out.write(reinterpret_cast<const char*>(data.data()),
              (std::streamsize)(data.size() * sizeof(float)));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()),
                (uInt)(data.size() * sizeof(float)));
  }
  write_u32(out, (std::uint32_t)crc);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "BITA") {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = read_u32(in);
  if (version != Checkpoint::kVersion) {
    std::ostringstream os;
    os << "checkpoint: unknown format version " << version << " in " << path;
    throw std::runtime_error(os.str());
  }
  const std::uint64_t header_len = read_u64(in);
  std::string header_bytes(header_len, '\0');
  in.read(header_bytes.data(), (std::streamsize)header_len);
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);

  json header = json::parse(header_bytes);
  Checkpoint ckpt;
  ckpt.stage = header.at("stage").get<std::string>();
  ckpt.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
  ckpt.optim_step = header.at("optim_step").get<std::int64_t>();
  for (const auto& [name, meta] : header.at("tensors").items()) {
    if (meta.at("dtype").get<std::string>() != "f32") {
      throw std::runtime_error("checkpoint: unsupported dtype for '" + name +
                               "'");
    }
    ckpt.shapes[name] = meta.at("shape").get<std::vector<std::size_t>>();
  }

  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& [name, shape] : ckpt.shapes) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    std::vector<float> data(n);
    in.read(reinterpret_cast<char*>(data.data()),
            (std::streamsize)(n * sizeof(float)));
    if (!in) {
      throw std::runtime_error("checkpoint: truncated payload at tensor '" +
                               name + "'");
    }
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()),
                (uInt)(n * sizeof(float)));
    ckpt.tensors[name] = std::move(data);
  }
  const std::uint32_t stored_crc = read_u32(in);
  if (!in || stored_crc != (std::uint32_t)crc) {
    throw std::runtime_error("checkpoint: payload CRC mismatch in " + path);
  }
  return ckpt;
}

}  // namespace bita
