#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cut::vlad {

// Binary checkpoint container shared by adapters, banks and trainer state.
struct Container {
  nlohmann::json header;
  std::vector<double> payload;
};

void write_container(const std::string& path, const nlohmann::json& header, std::span<const double> payload);
Container read_container(const std::string& path);

}  // namespace cut::vlad
