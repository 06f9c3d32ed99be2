#include <cstring>
#include <fstream>
#include <sstream>

#include "regseg/raster.hpp"
#include "regseg/trainer.hpp"

namespace regseg::train {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'R', 'S', 'C', 'K', 'P', 'T', '0', '1'};

struct Slot {
  const char* net;
  nets::NetworkHandle<float> Trainer<float>::*handle;
  diff::OptimizerState<float> Trainer<float>::*state;
};

constexpr Slot kSlots[] = {
    {"reg", &Trainer<float>::reg, &Trainer<float>::reg_state},
    {"seg", &Trainer<float>::seg, &Trainer<float>::seg_state},
    {"disc", &Trainer<float>::disc, &Trainer<float>::disc_state},
};

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::uint64_t get_u64(const std::string& s, std::size_t off) {
  if (off + 8 > s.size()) throw data::FormatError("corrupt checkpoint: truncated");
  std::uint64_t v;
  std::memcpy(&v, s.data() + off, 8);
  return v;
}

std::string hex(std::uint64_t v) {
  char b[20];
  std::snprintf(b, sizeof(b), "%016llx", static_cast<unsigned long long>(v));
  return b;
}

}  // namespace

void save_checkpoint(const Trainer<float>& t, const std::string& corpus_id, const fs::path& path) {
  json header;
  header["format"] = "regseg-checkpoint";
  header["version"] = REGSEG_VERSION;
  header["step"] = t.step();
  header["config_hash"] = hex(config_hash(t.config(), corpus_id));
  header["corpus_id"] = corpus_id;
  header["rng_state"] = t.rng_state();
  header["config"] = t.config();
  std::vector<std::pair<std::string, const Grid<float>*>> tensors;
  for (const Slot& s : kSlots) {
    const auto& net = t.*s.handle;
    const auto& st = t.*s.state;
    header["init_seeds"][s.net] = net.init_seed;
    header["optimizer_steps"][s.net] = st.step;
    for (const auto& [name, g] : net.params) tensors.emplace_back(std::string(s.net) + "/" + name, &g);
    for (const auto& [name, g] : st.first_moment) tensors.emplace_back(std::string(s.net) + "/opt/m/" + name, &g);
    for (const auto& [name, g] : st.second_moment) tensors.emplace_back(std::string(s.net) + "/opt/v/" + name, &g);
  }
  header["tensors"] = json::array();
  for (const auto& [name, g] : tensors) header["tensors"].push_back(name);

  std::string out(kMagic, 8);
  const std::string h = header.dump();
  put_u64(out, h.size());
  out += h;
  for (const auto& [name, g] : tensors) {
    const std::string blob = data::encode_raster(*g);
    put_u64(out, blob.size());
    out += blob;
  }
  // Write beside the target, then rename, so a failed write never leaves a
  // truncated checkpoint under the final name.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    os.flush();
    if (!os) {
      os.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw std::runtime_error("checkpoint write failed for " + path.string());
    }
  }
  fs::rename(tmp, path);
}

CheckpointInfo read_checkpoint(const fs::path& path, std::map<std::string, Grid<float>>& tensors, json* header_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  try {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
      throw data::FormatError("corrupt checkpoint: bad magic");
    const std::uint64_t hlen = get_u64(bytes, 8);
    if (16 + hlen > bytes.size()) throw data::FormatError("corrupt checkpoint: truncated header");
    json header;
    try {
      header = json::parse(bytes.substr(16, hlen));
    } catch (const json::exception& e) {
      throw data::FormatError(std::string("corrupt checkpoint: header is not JSON (") + e.what() + ")");
    }
    std::size_t off = 16 + hlen;
    for (const auto& name : header.at("tensors")) {
      const std::uint64_t len = get_u64(bytes, off);
      off += 8;
      if (off + len > bytes.size()) throw data::FormatError("corrupt checkpoint: truncated tensor");
      tensors[name.get<std::string>()] = data::decode_raster(std::string_view(bytes).substr(off, len));
      off += len;
    }
    if (off != bytes.size()) throw data::FormatError("corrupt checkpoint: trailing bytes");
    CheckpointInfo info;
    info.step = header.at("step").get<int>();
    info.config_hash = std::stoull(header.at("config_hash").get<std::string>(), nullptr, 16);
    info.rng_state = header.at("rng_state").get<std::string>();
    info.corpus_id = header.at("corpus_id").get<std::string>();
    info.version = header.at("version").get<std::string>();
    if (header_out) *header_out = std::move(header);
    return info;
  } catch (const data::FormatError& e) {
    throw data::FormatError(path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw data::FormatError(path.string() + ": corrupt checkpoint header: " + e.what());
  }
}

CheckpointInfo load_checkpoint(Trainer<float>& t, const std::string& corpus_id, const fs::path& path,
                               bool allow_mismatch) {
  std::map<std::string, Grid<float>> tensors;
  json header;
  CheckpointInfo info = read_checkpoint(path, tensors, &header);
  const std::uint64_t want = config_hash(t.config(), corpus_id);
  if (info.config_hash != want && !allow_mismatch)
    throw CheckpointMismatch("config hash mismatch: checkpoint " + hex(info.config_hash) + ", current config " +
                             hex(want) + " (pass --allow-mismatch to resume anyway)");
  auto restore = [&](diff::ParamSet<float>& dst, const std::string& prefix) {
    for (auto& [name, g] : dst) {
      auto it = tensors.find(prefix + name);
      if (it == tensors.end()) throw data::FormatError(path.string() + ": missing tensor " + prefix + name);
      require_same_shape(it->second.shape(), g.shape(), ("checkpoint tensor " + prefix + name).c_str());
      g = it->second;
    }
  };
  for (const Slot& s : kSlots) {
    auto& net = t.*s.handle;
    auto& st = t.*s.state;
    const std::string n = s.net;
    restore(net.params, n + "/");
    restore(st.first_moment, n + "/opt/m/");
    restore(st.second_moment, n + "/opt/v/");
    st.step = header.at("optimizer_steps").at(n).get<std::int64_t>();
    net.init_seed = header.at("init_seeds").at(n).get<std::uint64_t>();
  }
  t.set_rng_state(info.rng_state);
  t.set_step(info.step);
  return info;
}

}  // namespace regseg::train
