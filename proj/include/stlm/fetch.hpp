#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "json.hpp"

namespace stlm {

struct ModelManifest {
  std::string url;
  std::uint64_t total_bytes = 0;
  std::string md5_hex;  // 32 lowercase hex chars
  std::string name;     // file name inside the destination directory
  std::uint32_t version = 1;
};

// Throws FormatError on missing fields, a malformed digest or an unsafe name.
ModelManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const ModelManifest& m);
// Reads a manifest from a local path or an http:// URL.
ModelManifest load_manifest(const std::string& path_or_url);

struct FetchCallbacks {
  // Monotone non-decreasing; the last call of a successful fetch has done == total.
  std::function<void(std::uint64_t done, std::uint64_t total)> progress;
  std::function<void()> verifying;
};

struct FetchResult {
  std::filesystem::path path;
  std::uint64_t bytes_downloaded = 0;
  bool cache_hit = false;
  bool resumed = false;
};

// Returns the verified file at dest_dir/manifest.name. An existing file whose
// MD5 matches is returned without network access. Otherwise the body is
// streamed into "<name>.part" (resumed with a Range request when a partial
// file exists), verified, and renamed into place; the destination never holds
// an unverified file.
//
// Errors: ChecksumMismatch (the .part file is removed), NetworkError (the
// .part file is kept for resume), DiskFull, IoError.
FetchResult fetch_model(const ModelManifest& manifest, const std::filesystem::path& dest_dir,
                        const FetchCallbacks& callbacks = {});

}  // namespace stlm
