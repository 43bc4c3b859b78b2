#include "cmert/io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace cmert {

namespace {

const char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string base64_encode_f64(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (size_t i = 0; i < bytes.size(); i += 3) {
    unsigned v = bytes[i] << 16;
    int have = 1;
    if (i + 1 < bytes.size()) {
      v |= bytes[i + 1] << 8;
      ++have;
    }
    if (i + 2 < bytes.size()) {
      v |= bytes[i + 2];
      ++have;
    }
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(have > 1 ? kB64Alphabet[(v >> 6) & 63] : '=');
    out.push_back(have > 2 ? kB64Alphabet[v & 63] : '=');
  }
  return out;
}

std::vector<double> base64_decode_f64(const std::string& text) {
  if (text.size() % 4 != 0)
    throw std::invalid_argument("base64: length " + std::to_string(text.size()) +
                                " is not a multiple of 4");
  int rev[256];
  for (int& r : rev) r = -1;
  for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kB64Alphabet[i])] = i;
  std::vector<unsigned char> bytes;
  bytes.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    unsigned v = 0;
    int pads = 0;
    for (int k = 0; k < 4; ++k) {
      char c = text[i + k];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw std::invalid_argument("base64: stray padding");
        ++pads;
        v <<= 6;
        continue;
      }
      if (pads > 0 || rev[static_cast<unsigned char>(c)] < 0)
        throw std::invalid_argument("base64: invalid character at offset " + std::to_string(i + k));
      v = (v << 6) | rev[static_cast<unsigned char>(c)];
    }
    bytes.push_back((v >> 16) & 0xff);
    if (pads < 2) bytes.push_back((v >> 8) & 0xff);
    if (pads < 1) bytes.push_back(v & 0xff);
  }
  if (bytes.size() % 8 != 0)
    throw std::invalid_argument("base64: decoded " + std::to_string(bytes.size()) +
                                " bytes, not a whole number of float64 values");
  std::vector<double> values(bytes.size() / 8);
  if (!values.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
  return values;
}

void save_stream(const FeatureStream& stream, const std::string& path) {
  stream.validate();
  nlohmann::json j;
  j["format"] = "cmert-stream";
  j["version"] = 1;
  j["fps"] = stream.fps;
  j["num_actions"] = stream.num_actions;
  j["feat_dim"] = stream.features.shape[1];
  j["num_frames"] = stream.features.shape[0];
  j["labels"] = stream.labels;
  j["features_b64"] = base64_encode_f64(stream.features.data);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_stream: cannot open " + path + " for writing");
  f << j.dump() << "\n";
}

FeatureStream load_stream(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_stream: cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "cmert-stream")
    throw std::runtime_error("load_stream: " + path + " is not a stream file");
  if (j.value("version", 0) != 1)
    throw std::runtime_error("load_stream: unsupported version in " + path);
  FeatureStream s;
  s.fps = j.at("fps").get<double>();
  s.num_actions = j.at("num_actions").get<int>();
  int frames = j.at("num_frames").get<int>();
  int d = j.at("feat_dim").get<int>();
  s.labels = j.at("labels").get<std::vector<int>>();
  s.features = tensor2(frames, d);
  std::vector<double> flat = base64_decode_f64(j.at("features_b64").get<std::string>());
  if (flat.size() != s.features.data.size())
    throw std::runtime_error("load_stream: feature blob holds " + std::to_string(flat.size()) +
                             " values, header promises " + std::to_string(s.features.data.size()));
  s.features.data = std::move(flat);
  s.validate();
  return s;
}

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a64_hex(const std::string& text) {
  uint64_t h = fnv1a64(text);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace cmert
