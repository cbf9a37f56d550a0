#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "kdstage/error.hpp"

namespace kdstage::cli {

namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::map<std::string, std::string> hash_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().filename() == kRunManifestName) continue;
    out[fs::relative(entry.path(), root).generic_string()] = sha256_file(entry.path());
  }
  return out;
}

nlohmann::json to_json(const RunManifest& m) {
  return {{"format", "kdstage-run"},
          {"version", m.version},
          {"command", m.command},
          {"argv", m.argv},
          {"options", m.options},
          {"config", m.config},
          {"seeds", m.seeds},
          {"inputs", m.inputs},
          {"output_dir", m.output_dir.string()},
          {"artifacts", m.artifacts},
          {"wall_clock_seconds", m.wall_clock_seconds}};
}

void write_run_manifest(const RunManifest& m) {
  const auto path = m.output_dir / kRunManifestName;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

nlohmann::json read_run_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError("run manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "kdstage-run") {
    throw CorruptDataError("run manifest " + path.string() + ": not a kdstage run manifest");
  }
  return j;
}

}  // namespace kdstage::cli
