#include "acrec/parameters.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "acrec/error.hpp"
#include "json.hpp"

namespace acrec {

template <typename T>
void ParameterStore<T>::add(std::string name, ag::Shape shape, ParamGroup group, std::vector<T> values) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), group, ag::Var<T>::parameter(std::move(shape), std::move(values))});
}

template <typename T>
const ag::Var<T>& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return entries_[it->second].var;
}

template <typename T>
ag::Var<T>& ParameterStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return entries_[it->second].var;
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
ParameterStore<T> ParameterStore<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
ParameterStore<U> ParameterStore<T>::cast() const {
  ParameterStore<U> out;
  for (const auto& e : entries_) {
    std::vector<U> v(e.var.value().begin(), e.var.value().end());
    out.add(e.name, e.var.shape(), e.group, std::move(v));
  }
  return out;
}

template <typename T>
std::uint64_t ParameterStore<T>::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    for (auto s : e.var.shape()) mix(&s, sizeof(s));
    mix(e.var.value().data(), e.var.size() * sizeof(T));
  }
  return h;
}

std::string layer_param(std::size_t layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& cfg, std::size_t item_count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  auto randn = [&](std::size_t count) {
    std::vector<T> v(count);
    for (auto& x : v) x = static_cast<T>(normal(rng));
    return v;
  };
  const std::size_t d = cfg.d, dh = cfg.head_dim(), ch = cfg.calibrator_heads();
  constexpr auto kB = ParamGroup::kBackbone;

  ParameterStore<T> p;
  auto table = randn((item_count + 1) * d);
  std::fill_n(table.begin(), d, T(0));
  p.add("item_embedding", {item_count + 1, d}, kB, std::move(table));
  if (cfg.position_mode == PositionMode::kAbsolute) p.add("position_embedding", {cfg.n, d}, kB, randn(cfg.n * d));

  for (std::size_t l = 0; l < cfg.L; ++l) {
    auto name = [l](const char* leaf) { return layer_param(l, leaf); };
    if (cfg.layer_norm) {
      p.add(name("ln1.gamma"), {d}, kB, std::vector<T>(d, T(1)));
      p.add(name("ln1.beta"), {d}, kB, std::vector<T>(d, T(0)));
    }
    p.add(name("attn.w_q"), {d, d}, kB, randn(d * d));
    p.add(name("attn.w_k"), {d, d}, kB, randn(d * d));
    p.add(name("attn.w_v"), {d, d}, kB, randn(d * d));
    if (cfg.uses_order()) {
      p.add(name("spatial.order_wq"), {ch, dh, 1}, kB, randn(ch * dh));
      p.add(name("spatial.order_wk"), {ch, dh, 1}, kB, randn(ch * dh));
      p.add(name("spatial.order_b"), {ch, 1, 1}, kB, std::vector<T>(ch, T(0)));
    }
    if (cfg.uses_distance()) {
      p.add(name("spatial.dist_wq"), {ch, dh, 1}, kB, randn(ch * dh));
      p.add(name("spatial.dist_wk"), {ch, dh, 1}, kB, randn(ch * dh));
      p.add(name("spatial.dist_b"), {ch, 1, 1}, kB, std::vector<T>(ch, T(0)));
      p.add(name("spatial.dist_theta"), {1}, kB, std::vector<T>{T(1)});
    }
    if (cfg.adversarial_enabled) {
      p.add(name("adv.w_qp"), {ch, dh, dh}, ParamGroup::kPerturbation, randn(ch * dh * dh));
      p.add(name("adv.w_kp"), {ch, dh, dh}, ParamGroup::kPerturbation, randn(ch * dh * dh));
      p.add(name("adv.gate_w"), {ch, dh, 1}, kB, randn(ch * dh));
      p.add(name("adv.gate_b"), {ch, 1, 1}, kB, std::vector<T>(ch, T(0)));
    }
    if (cfg.layer_norm) {
      p.add(name("ln2.gamma"), {d}, kB, std::vector<T>(d, T(1)));
      p.add(name("ln2.beta"), {d}, kB, std::vector<T>(d, T(0)));
    }
    p.add(name("ffn.w1"), {d, cfg.inner}, kB, randn(d * cfg.inner));
    p.add(name("ffn.b1"), {cfg.inner}, kB, std::vector<T>(cfg.inner, T(0)));
    p.add(name("ffn.w2"), {cfg.inner, d}, kB, randn(cfg.inner * d));
    p.add(name("ffn.b2"), {d}, kB, std::vector<T>(d, T(0)));
  }
  if (cfg.layer_norm) {
    p.add("final_ln.gamma", {d}, kB, std::vector<T>(d, T(1)));
    p.add("final_ln.beta", {d}, kB, std::vector<T>(d, T(0)));
  }
  return p;
}

namespace {

void put_le32(std::ostream& os, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  os.write(bytes, 4);
}

float get_le32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace

template <typename T>
void save_checkpoint(const ParameterStore<T>& params, std::size_t item_count, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "acrec-checkpoint-v1";
  manifest["item_count"] = item_count;
  manifest["blob"] = "weights.bin";
  manifest["tensors"] = nlohmann::ordered_json::array();
  std::ofstream blob(dir / "weights.bin", std::ios::binary);
  if (!blob) throw DataError("cannot write " + (dir / "weights.bin").string());
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    nlohmann::ordered_json t;
    t["name"] = e.name;
    t["shape"] = e.var.shape();
    t["dtype"] = "float32";
    t["offset"] = offset;
    t["group"] = e.group == ParamGroup::kBackbone ? "backbone" : "perturbation";
    manifest["tensors"].push_back(t);
    for (T v : e.var.value()) put_le32(blob, static_cast<float>(v));
    offset += e.var.size() * 4;
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw DataError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw DataError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(ms);
  } catch (const std::exception& e) {
    throw DataError("bad manifest: " + std::string(e.what()));
  }
  std::ifstream bs(dir / manifest.value("blob", std::string("weights.bin")), std::ios::binary);
  if (!bs) throw DataError("cannot open checkpoint blob in " + dir.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());

  LoadedCheckpoint ckpt;
  try {
    ckpt.item_count = manifest.at("item_count").get<std::size_t>();
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "float32") throw DataError("unsupported dtype in checkpoint");
      auto shape = t.at("shape").get<ag::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = ag::numel(shape);
      if (offset + count * 4 > blob.size()) throw DataError("checkpoint blob truncated at " + t.at("name").get<std::string>());
      std::vector<float> values(count);
      for (std::size_t i = 0; i < count; ++i) values[i] = get_le32(blob.data() + offset + i * 4);
      ckpt.tensors[t.at("name").get<std::string>()] = {std::move(shape), std::move(values)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest: " + std::string(e.what()));
  }
  return ckpt;
}

template <typename T>
ParameterStore<T> load_parameters(const LoadedCheckpoint& ckpt, const ModelConfig& cfg) {
  auto params = init_parameters<T>(cfg, ckpt.item_count, 0);
  for (auto& e : params.entries()) {
    auto it = ckpt.tensors.find(e.name);
    if (it == ckpt.tensors.end()) throw DataError("checkpoint is missing tensor " + e.name);
    if (it->second.first != e.var.shape()) {
      throw DataError("shape mismatch for " + e.name + ": checkpoint " + ag::to_string(it->second.first) +
                      ", config " + ag::to_string(e.var.shape()));
    }
    auto dst = e.var.mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.second[i]);
  }
  return params;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template ParameterStore<double> ParameterStore<float>::cast<double>() const;
template ParameterStore<float> ParameterStore<double>::cast<float>() const;
template ParameterStore<float> init_parameters<float>(const ModelConfig&, std::size_t, std::uint64_t);
template ParameterStore<double> init_parameters<double>(const ModelConfig&, std::size_t, std::uint64_t);
template void save_checkpoint<float>(const ParameterStore<float>&, std::size_t, const std::filesystem::path&);
template void save_checkpoint<double>(const ParameterStore<double>&, std::size_t, const std::filesystem::path&);
template ParameterStore<float> load_parameters<float>(const LoadedCheckpoint&, const ModelConfig&);
template ParameterStore<double> load_parameters<double>(const LoadedCheckpoint&, const ModelConfig&);

}  // namespace acrec
