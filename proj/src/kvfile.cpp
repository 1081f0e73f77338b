#include "gloria/kvfile.hpp"

#include <fstream>

#include "gloria/errors.hpp"
#include "gloria/matcore.hpp"

namespace gloria {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues read_kv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path.string());
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return kv;
}

void write_kv(const std::filesystem::path& path, const KeyValues& kv) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path.string());
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  if (!os) throw InputError("write failed: " + path.string());
}

const std::string& kv_require(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw InputError("manifest is missing key '" + key + "'");
  return it->second;
}

double kv_real(const KeyValues& kv, const std::string& key) {
  return parse_real(kv_require(kv, key));
}

long long kv_int(const KeyValues& kv, const std::string& key) {
  const std::string& v = kv_require(kv, key);
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw InputError("key '" + key + "': bad integer '" + v + "'");
  return out;
}

}  // namespace gloria
