#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmert/partition.hpp"

namespace cmert {

// Raw little-endian float64 blobs in standard base64; keeps feature matrices
// bit-exact through the JSON container.
std::string base64_encode_f64(const std::vector<double>& values);
std::vector<double> base64_decode_f64(const std::string& text);

void save_stream(const FeatureStream& stream, const std::string& path);
FeatureStream load_stream(const std::string& path);

// FNV-1a over the serialized config; manifests use it to pin what produced
// an output directory.
uint64_t fnv1a64(const std::string& text);
std::string fnv1a64_hex(const std::string& text);

}  // namespace cmert
