#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace gloria {

// Flat "key = value" text files used for manifests and configs.
// Blank lines and lines starting with '#' are ignored; keys are kept sorted on write.
using KeyValues = std::map<std::string, std::string>;

KeyValues read_kv(const std::filesystem::path& path);
void write_kv(const std::filesystem::path& path, const KeyValues& kv);

const std::string& kv_require(const KeyValues& kv, const std::string& key);
double kv_real(const KeyValues& kv, const std::string& key);
long long kv_int(const KeyValues& kv, const std::string& key);

}  // namespace gloria
