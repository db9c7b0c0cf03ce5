#include "genad/checkpoint.hpp"

#include <fstream>

#include "genad/errors.hpp"
#include "genad/numkit/blob.hpp"

namespace genad {

namespace {
constexpr char kMagic[4] = {'G', 'A', 'D', 'C'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CorruptionError("truncated checkpoint");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace

void Checkpoint::put(const std::string& name, const numkit::Tensor& t) {
  tensors_[name] = t;
}

const numkit::Tensor& Checkpoint::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw CorruptionError("checkpoint lacks tensor " + name);
  return it->second;
}

void Checkpoint::put_params(const std::string& prefix, const numkit::ParamStore& params) {
  for (const auto& [name, t] : params.all()) put(prefix + name, t);
}

void Checkpoint::read_params(const std::string& prefix, numkit::ParamStore& params) const {
  for (auto& [name, t] : params.all()) {
    const numkit::Tensor& loaded = get(prefix + name);
    if (!loaded.same_shape(t)) {
      throw IncompatibilityError("checkpoint tensor " + prefix + name + " has shape " +
                                 loaded.shape_str() + ", expected " + t.shape_str());
    }
    t = loaded;
  }
}

void Checkpoint::put_adam(const std::string& prefix, const numkit::Adam& opt) {
  auto& o = const_cast<numkit::Adam&>(opt);
  for (const auto& [name, t] : o.moments1()) put(prefix + "m." + name, t);
  for (const auto& [name, t] : o.moments2()) put(prefix + "v." + name, t);
  manifest[prefix + "step_count"] = o.step_count();
  manifest[prefix + "lr"] = o.config().lr;
  manifest[prefix + "beta1"] = o.config().beta1;
  manifest[prefix + "beta2"] = o.config().beta2;
  manifest[prefix + "eps"] = o.config().eps;
}

void Checkpoint::read_adam(const std::string& prefix, numkit::Adam& opt) const {
  for (const auto& [name, t] : tensors_) {
    const std::string mkey = prefix + "m.";
    if (name.rfind(mkey, 0) == 0) opt.moments1()[name.substr(mkey.size())] = t;
    const std::string vkey = prefix + "v.";
    if (name.rfind(vkey, 0) == 0) opt.moments2()[name.substr(vkey.size())] = t;
  }
  if (manifest.contains(prefix + "step_count")) {
    opt.set_step_count(manifest.at(prefix + "step_count").get<long>());
  }
  if (manifest.contains(prefix + "lr")) {
    numkit::AdamConfig cfg = opt.config();
    cfg.lr = manifest.at(prefix + "lr").get<double>();
    cfg.beta1 = manifest.at(prefix + "beta1").get<double>();
    cfg.beta2 = manifest.at(prefix + "beta2").get<double>();
    cfg.eps = manifest.at(prefix + "eps").get<double>();
    opt.set_config(cfg);
  }
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json index;
  index["format"] = "gadc";
  index["manifest"] = manifest;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : tensors_) names.push_back(name);
  index["tensors"] = names;
  std::string bytes = index.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CorruptionError("cannot open " + path + " for writing");
  f.write(kMagic, 4);
  put_u32(f, kVersion);
  put_u32(f, static_cast<uint32_t>(bytes.size()));
  f.write(bytes.data(), static_cast<long>(bytes.size()));
  for (const auto& [name, t] : tensors_) numkit::write_tensor(f, t);
  if (!f) throw CorruptionError("write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptionError("cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4)) throw CorruptionError("truncated checkpoint " + path);
  if (magic[0] != 'G' || magic[1] != 'A' || magic[2] != 'D' || magic[3] != 'C') {
    throw CorruptionError(path + " is not a checkpoint file");
  }
  uint32_t version = get_u32(f);
  if (version != kVersion) {
    throw CorruptionError("unsupported checkpoint version " + std::to_string(version));
  }
  uint32_t len = get_u32(f);
  std::string bytes(len, '\0');
  if (!f.read(bytes.data(), len)) throw CorruptionError("truncated checkpoint index in " + path);
  nlohmann::json index = nlohmann::json::parse(bytes, nullptr, false);
  if (index.is_discarded()) throw CorruptionError("bad checkpoint index in " + path);

  Checkpoint ck;
  ck.manifest = index.value("manifest", nlohmann::json::object());
  for (const auto& name : index.at("tensors")) {
    ck.tensors_[name.get<std::string>()] = numkit::read_tensor(f);
  }
  return ck;
}

}  // namespace genad
