#pragma once

// Binary checkpoint: "ROICTRL1", u32 scalar size, u32 config length + text,
// u32 parameter count, then per parameter: u32 name length + name, u32 rank,
// u64 extents, raw scalars. Integers are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "roictrl/model.hpp"
#include "roictrl/tensor.hpp"

namespace roictrl {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'R', 'O', 'I', 'C', 'T', 'R', 'L', '1'};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

inline std::string get_string(std::istream& is) {
  const auto len = get_le<std::uint32_t>(is);
  std::string s(len, '\0');
  if (!is.read(s.data(), len)) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

/// Model hyper-parameters as key=value lines.
inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "image_size=" << c.image_size << "\nc_hi=" << c.c_hi << "\nc_lo=" << c.c_lo << "\ntext_dim=" << c.text_dim
     << "\ntemb_dim=" << c.temb_dim << "\nself_attention=" << (c.self_attention ? 1 : 0)
     << "\nsingle_scale=" << (c.single_scale ? 1 : 0)
     << "\ncoord=" << (c.frame == CoordinateFrame::global ? "global" : "local")
     << "\noutput=" << (c.velocity_output ? "velocity" : "epsilon") << "\ntimesteps=" << c.timesteps
     << std::setprecision(17) << "\nbeta_start=" << c.beta_start << "\nbeta_end=" << c.beta_end << "\n";
  return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "image_size") c.image_size = std::stoll(v);
    else if (k == "c_hi") c.c_hi = std::stoll(v);
    else if (k == "c_lo") c.c_lo = std::stoll(v);
    else if (k == "text_dim") c.text_dim = std::stoll(v);
    else if (k == "temb_dim") c.temb_dim = std::stoll(v);
    else if (k == "self_attention") c.self_attention = v == "1";
    else if (k == "single_scale") c.single_scale = v == "1";
    else if (k == "coord") c.frame = v == "local" ? CoordinateFrame::local : CoordinateFrame::global;
    else if (k == "output") c.velocity_output = v != "epsilon";
    else if (k == "timesteps") c.timesteps = std::stoi(v);
    else if (k == "beta_start") c.beta_start = std::stod(v);
    else if (k == "beta_end") c.beta_end = std::stod(v);
    else throw CheckpointError("checkpoint: unknown model key '" + k + "'");
  }
  return c;
}

template <class T>
void save_checkpoint(const std::string& path, const ToyModel<T>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, sizeof(T));
  const std::string cfg = model_config_text(model.config);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto w = model.weights;
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(parameter_manifest(w).size()));
  w.visit("", [&](const std::string& name, Tensor<T>& t) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(e));
    for (T v : t.values()) {
      // scalars stored in their little-endian byte order
      if constexpr (sizeof(T) == 4) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
      else detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
  });
  if (!os) throw CheckpointError("write failed for " + path);
}

struct CheckpointInfo {
  std::uint32_t scalar_size = 0;
  ModelConfig config;
  std::vector<std::string> manifest;
};

namespace detail {

struct RawParam {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline std::vector<RawParam> read_checkpoint(const std::string& path, CheckpointInfo& info) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint not found: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(path + " is not a ROICTRL1 checkpoint");
  }
  info.scalar_size = get_le<std::uint32_t>(is);
  if (info.scalar_size != 4 && info.scalar_size != 8) throw CheckpointError("unsupported scalar size");
  info.config = parse_model_config_text(get_string(is));
  const auto count = get_le<std::uint32_t>(is);
  std::vector<RawParam> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    RawParam p;
    p.name = get_string(is);
    const auto rank = get_le<std::uint32_t>(is);
    for (std::uint32_t a = 0; a < rank; ++a) p.shape.push_back(static_cast<std::int64_t>(get_le<std::uint64_t>(is)));
    p.values.resize(static_cast<std::size_t>(p.shape.numel()));
    for (auto& v : p.values) {
      v = info.scalar_size == 4 ? double(std::bit_cast<float>(get_le<std::uint32_t>(is)))
                                : std::bit_cast<double>(get_le<std::uint64_t>(is));
    }
    info.manifest.push_back(p.name);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

inline CheckpointInfo inspect_checkpoint(const std::string& path) {
  CheckpointInfo info;
  detail::read_checkpoint(path, info);
  return info;
}

/// Loads into the requested precision; the stored precision may differ.
template <class T>
ToyModel<T> load_checkpoint(const std::string& path) {
  CheckpointInfo info;
  auto raw = detail::read_checkpoint(path, info);
  ToyModel<T> model(info.config, 0);
  std::size_t k = 0;
  model.weights.visit("", [&](const std::string& name, Tensor<T>& t) {
    if (k >= raw.size() || raw[k].name != name || !(raw[k].shape == t.shape())) {
      throw CheckpointError("checkpoint parameter mismatch at " + name);
    }
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(raw[k].values[static_cast<std::size_t>(i)]);
    ++k;
  });
  if (k != raw.size()) throw CheckpointError("checkpoint has extra parameters");
  return model;
}

}  // namespace roictrl
