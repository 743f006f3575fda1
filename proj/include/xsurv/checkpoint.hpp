#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "xsurv/model.hpp"

namespace xsurv {

static_assert(std::endian::native == std::endian::little, "f32le payloads assume a little-endian host");

inline constexpr std::string_view kCheckpointMagic = "XSURV-CKPT 1";

// Raised when a checkpoint does not fit the model it is loaded into.
class CheckpointMismatch : public Error {
 public:
  explicit CheckpointMismatch(const std::vector<std::string>& lines) : Error(join(lines)), lines_(lines) {}
  const std::vector<std::string>& differences() const { return lines_; }

 private:
  static std::string join(const std::vector<std::string>& lines) {
    std::string s = "checkpoint does not match model:";
    for (const auto& l : lines) s += "\n  " + l;
    return s;
  }
  std::vector<std::string> lines_;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  int64_t offset = 0;  // bytes from the start of the payload
};

struct CheckpointFile {
  Json config;  // ModelConfig
  Json meta;    // free-form: interval edges, iteration, metrics
  std::vector<CheckpointEntry> entries;
  std::vector<float> payload;
};

namespace detail {

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace detail

// Layout: magic line, one line of JSON header, then raw f32le blocks.
template <typename T>
void save_checkpoint(const std::string& path, const XSurvModel<T>& model, const Json& meta = Json::object()) {
  Json tensors = Json::array();
  int64_t offset = 0;
  for (const auto& p : model.params().items()) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel() * static_cast<int64_t>(sizeof(float));
  }
  const Json header{{"config", model.config().to_json()}, {"meta", meta}, {"tensors", tensors}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_checkpoint: cannot open " + path);
  f << kCheckpointMagic << '\n' << header.dump() << '\n';
  std::vector<float> buf;
  for (const auto& p : model.params().items()) {
    const auto& v = p.tensor.vec();
    buf.assign(v.begin(), v.end());
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!f) throw Error("save_checkpoint: write failed for " + path);
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_checkpoint: cannot open " + path);
  std::string magic, header;
  std::getline(f, magic);
  if (magic != kCheckpointMagic) throw Error("read_checkpoint: " + path + " is not a checkpoint");
  std::getline(f, header);
  CheckpointFile out;
  Json h;
  try {
    h = Json::parse(header);
    out.config = h.at("config");
    out.meta = h.value("meta", Json::object());
    for (const auto& t : h.at("tensors"))
      out.entries.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>(), t.at("offset").get<int64_t>()});
  } catch (const Json::exception& e) {
    throw Error("read_checkpoint: malformed header in " + path + ": " + e.what());
  }
  const std::string rest{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (rest.size() % sizeof(float)) throw Error("read_checkpoint: truncated payload in " + path);
  out.payload.resize(rest.size() / sizeof(float));
  std::memcpy(out.payload.data(), rest.data(), rest.size());
  for (const auto& e : out.entries)
    if (e.offset % 4 || (e.offset / 4) + numel_of(e.shape) > static_cast<int64_t>(out.payload.size()))
      throw Error("read_checkpoint: tensor " + e.name + " lies outside the payload");
  return out;
}

// Name/shape differences between a checkpoint and a model, one line each.
template <typename T>
std::vector<std::string> checkpoint_diff(const CheckpointFile& ck, const XSurvModel<T>& model) {
  std::vector<std::string> d;
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.entries) by_name[e.name] = &e;
  for (const auto& p : model.params().items()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      d.push_back("missing in checkpoint: " + p.name + " " + detail::shape_str(p.tensor.shape()));
      continue;
    }
    if (it->second->shape != p.tensor.shape())
      d.push_back("shape differs: " + p.name + " checkpoint " + detail::shape_str(it->second->shape) + " model " +
                  detail::shape_str(p.tensor.shape()));
    by_name.erase(it);
  }
  for (const auto& [name, e] : by_name) d.push_back("unexpected in checkpoint: " + name + " " + detail::shape_str(e->shape));
  return d;
}

// Copies checkpoint values into the model; throws CheckpointMismatch listing
// every difference otherwise. Returns the stored meta block.
template <typename T>
Json load_checkpoint(const std::string& path, XSurvModel<T>& model) {
  const auto ck = read_checkpoint(path);
  auto diff = checkpoint_diff(ck, model);
  if (!diff.empty()) throw CheckpointMismatch(diff);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.entries) by_name[e.name] = &e;
  for (auto& p : model.params().items()) {
    const auto* e = by_name.at(p.name);
    auto v = p.tensor.values();
    const float* src = ck.payload.data() + e->offset / 4;
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(src[i]);
  }
  return ck.meta;
}

template <typename T>
std::unique_ptr<XSurvModel<T>> model_from_checkpoint(const std::string& path, Json* meta = nullptr) {
  const auto ck = read_checkpoint(path);
  auto model = std::make_unique<XSurvModel<T>>(ModelConfig::from_json(ck.config));
  auto m = load_checkpoint(path, *model);
  if (meta) *meta = std::move(m);
  return model;
}

}  // namespace xsurv
