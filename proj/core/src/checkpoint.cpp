#include "hce/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

namespace hce {

namespace {

constexpr char kMagic[8] = {'H', 'C', 'E', 'C', 'K', 'P', '0', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_array(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) put<std::int32_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

struct StoredArray {
  std::vector<int> shape;
  std::vector<float> data;
};

std::map<std::string, StoredArray> read_arrays(std::istream& is, std::uint32_t count) {
  std::map<std::string, StoredArray> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    auto ndim = get<std::uint32_t>(is);
    StoredArray a;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      int v = get<std::int32_t>(is);
      a.shape.push_back(v);
      numel *= static_cast<std::size_t>(v);
    }
    a.data.resize(numel);
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated array " + name);
    out.emplace(std::move(name), std::move(a));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, Model<float>& m, const Sgd<float>* opt,
                     const CheckpointMeta& meta) {
  auto params = param_list(m);
  if (opt && !opt->velocity.empty() && opt->velocity.size() != params.size())
    throw std::runtime_error("save_checkpoint: optimizer state does not match the model");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(os, meta.config_hash);
  put<std::int64_t>(os, meta.step);
  put<std::int32_t>(os, meta.epoch);
  std::uint32_t count = static_cast<std::uint32_t>(params.size());
  if (opt && !opt->velocity.empty()) count += static_cast<std::uint32_t>(params.size());
  put<std::uint32_t>(os, count);
  for (auto& [name, p] : params) put_array(os, name, *p);
  if (opt && !opt->velocity.empty())
    for (std::size_t i = 0; i < params.size(); ++i)
      put_array(os, "opt/" + params[i].first, opt->velocity[i]);
  os.flush();
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, Model<float>& m, Sgd<float>* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  CheckpointMeta meta;
  meta.config_hash = get<std::uint64_t>(is);
  meta.step = get<std::int64_t>(is);
  meta.epoch = static_cast<int>(get<std::int32_t>(is));
  auto count = get<std::uint32_t>(is);
  auto arrays = read_arrays(is, count);

  auto params = param_list(m);
  auto take = [&](const std::string& name, Tensor<float>& dst) {
    auto it = arrays.find(name);
    if (it == arrays.end())
      throw std::runtime_error("load_checkpoint: missing array '" + name +
                               "' — checkpoint was saved from a different configuration");
    if (it->second.shape != dst.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    dst.v = it->second.data;
    arrays.erase(it);
  };
  for (auto& [name, p] : params) take(name, *p);
  if (opt) {
    bool has_opt = arrays.count("opt/" + params.front().first) > 0;
    opt->velocity.clear();
    for (auto& [name, p] : params) {
      Tensor<float> v(p->shape);
      if (has_opt) take("opt/" + name, v);
      opt->velocity.push_back(std::move(v));
    }
    opt->step_count = meta.step;
  } else {
    for (auto it = arrays.begin(); it != arrays.end();)
      it = it->first.rfind("opt/", 0) == 0 ? arrays.erase(it) : ++it;
  }
  if (!arrays.empty())
    throw std::runtime_error("load_checkpoint: unexpected array '" + arrays.begin()->first +
                             "' — checkpoint was saved from a different configuration");
  return meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint_meta: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("read_checkpoint_meta: " + path + " is not a checkpoint file");
  CheckpointMeta meta;
  meta.config_hash = get<std::uint64_t>(is);
  meta.step = get<std::int64_t>(is);
  meta.epoch = static_cast<int>(get<std::int32_t>(is));
  return meta;
}

}  // namespace hce
