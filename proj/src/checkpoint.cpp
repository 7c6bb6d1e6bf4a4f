#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "thm/errors.hpp"
#include "thm/model.hpp"

namespace thm {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'H', 'M', '1'};
constexpr unsigned char kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
      std::uint32_t{b[3]} << 24;
  return true;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw DataError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, long step) {
  Checkpoint ck{model.config(), step, {}, {}};
  for (const auto& p : model.parameters()) ck.tensors.emplace_back(p.name, p.value());
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write(kMagic.data(), kMagic.size());
  os.put(static_cast<char>(kVersion));
  os << config_to_kv(ck.config) << "step=" << ck.step << '\n';
  for (const auto& [k, v] : ck.extra) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw DataError("checkpoint: header entry '" + k + "' is not a single key=value line");
    }
    os << k << '=' << v << '\n';
  }
  os << '\n';
  for (const auto& [name, t] : ck.tensors) {
    put_u32(os, checked_u32(name.size(), "name length"));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, checked_u32(t.rank(), "rank"));
    for (std::size_t dim : t.shape()) put_u32(os, checked_u32(dim, "dimension"));
    for (double v : t.values()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw DataError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw DataError("'" + path + "' is not a THM1 checkpoint");
  const int version = is.get();
  if (version != kVersion) {
    throw DataError("checkpoint '" + path + "': unsupported format version " +
                    std::to_string(version));
  }

  std::map<std::string, std::string> header;
  std::string line;
  while (true) {
    if (!std::getline(is, line)) throw DataError("checkpoint '" + path + "': truncated header");
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint header line without '=': " + line);
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }

  Checkpoint ck;
  std::map<std::string, std::string> model_keys;
  for (auto& [k, v] : header) {
    if (k == "step") {
      ck.step = std::stol(v);
    } else {
      model_keys[k] = v;
    }
  }
  for (const auto& k : apply_config_kv(ck.config, model_keys)) {
    ck.extra[k] = model_keys[k];
  }
  ck.config.validate();

  std::uint32_t name_len = 0;
  while (get_u32(is, name_len)) {
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !get_u32(is, rank)) {
      throw DataError("checkpoint '" + path + "': truncated tensor record");
    }
    Shape shape(rank);
    for (auto& dim : shape) {
      std::uint32_t v = 0;
      if (!get_u32(is, v)) throw DataError("checkpoint '" + path + "': truncated shape");
      dim = v;
    }
    Tensor t(shape);
    for (double& v : t.values()) {
      std::uint32_t bits = 0;
      if (!get_u32(is, bits)) {
        throw DataError("checkpoint '" + path + "': truncated payload for '" + name + "'");
      }
      v = static_cast<double>(std::bit_cast<float>(bits));
    }
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  Model model(ck.config, 0);
  auto& params = model.parameters();
  if (ck.tensors.size() < params.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.tensors.size()) +
                    " tensors, model needs " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ck.tensors[i];
    if (name != params[i].name || t.shape() != params[i].value().shape()) {
      throw DataError("checkpoint tensor " + std::to_string(i) + " ('" + name + "' " +
                      shape_str(t.shape()) + ") does not match model parameter '" +
                      params[i].name + "' " + shape_str(params[i].value().shape()));
    }
    params[i].value() = t;
  }
  return model;
}

}  // namespace thm
