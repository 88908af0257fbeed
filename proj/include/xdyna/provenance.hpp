#pragma once

// Content hashes and run records. Blob hashes use git's object format
// (sha1 of "blob <size>\0" + bytes); directories hash to the sha1 of their
// sorted "<blob-hash> <relative-path>\n" listing.

#include "xdyna/config.hpp"
#include "xdyna/image_io.hpp"

#include <openssl/evp.h>

namespace xdyna {

inline std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1) throw IoError("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string git_blob_hash(const std::string& content) {
  std::string obj = "blob " + std::to_string(content.size());
  obj.push_back('\0');
  obj += content;
  return sha1_hex(obj);
}

/// Relative paths of every regular file below `root`, sorted, '/'-separated.
inline std::vector<std::string> list_files(const fs::path& root, const std::set<std::string>& skip = {}) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      const std::string rel = fs::relative(e.path(), root).generic_string();
      if (!skip.count(rel)) out.push_back(rel);
    }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string tree_hash(const fs::path& root, const std::set<std::string>& skip = {}) {
  std::string listing;
  for (const auto& rel : list_files(root, skip)) listing += git_blob_hash(read_text(root / rel)) + " " + rel + "\n";
  return sha1_hex(listing);
}

/// Hash of a file or directory input.
inline std::string content_hash(const fs::path& p) {
  if (fs::is_directory(p)) return tree_hash(p, {"run.json"});
  return git_blob_hash(read_text(p));
}

inline bool deterministic_env() {
  const char* v = std::getenv("XDYNA_DETERMINISTIC");
  return v && std::string(v) == "1";
}

/// Provenance record. Inputs and outputs are keyed by role and carry content
/// hashes only, so reruns into different directories produce identical bytes.
struct RunRecord {
  std::string subcommand;
  json config = json::object();
  json flags = json::object();
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;

  json to_json() const {
    return {{"tool", "xdyna"},
            {"record_version", 1},
            {"subcommand", subcommand},
            {"deterministic", deterministic_env()},
            {"flags", flags},
            {"config", config},
            {"inputs", inputs},
            {"outputs", outputs}};
  }
  void write(const fs::path& out_dir) const { write_text(out_dir / "run.json", to_json().dump(2) + "\n"); }
};

}  // namespace xdyna
