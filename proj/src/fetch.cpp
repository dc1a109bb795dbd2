#include "stlm/fetch.hpp"

#include <cerrno>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <regex>

#include "httplib.h"
#include "stlm/error.hpp"
#include "stlm/md5.hpp"

namespace stlm {
namespace {

struct Url {
  std::string origin;  // scheme://host:port
  std::string path;
};

Url split_url(const std::string& url) {
  static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) fail(ErrorCode::InvalidArgument, "unsupported URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

// One fetch per destination file at a time within this process.
std::mutex& lock_for(const std::filesystem::path& dest) {
  static std::mutex registry_mutex;
  static std::map<std::string, std::mutex> locks;
  std::lock_guard<std::mutex> guard(registry_mutex);
  return locks[dest.string()];
}

std::uint64_t file_size_or_zero(const std::filesystem::path& p) {
  std::error_code ec;
  const auto n = std::filesystem::file_size(p, ec);
  return ec ? 0 : n;
}

}  // namespace

ModelManifest manifest_from_json(const nlohmann::json& j) {
  ModelManifest m;
  try {
    m.url = j.at("url").get<std::string>();
    m.total_bytes = j.at("bytes").get<std::uint64_t>();
    m.md5_hex = j.at("md5").get<std::string>();
    m.name = j.at("name").get<std::string>();
    m.version = j.value("version", 1u);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("manifest: ") + e.what());
  }
  static const std::regex md5_re("^[0-9a-f]{32}$");
  if (!std::regex_match(m.md5_hex, md5_re)) fail(ErrorCode::FormatError, "manifest: md5 must be 32 lowercase hex chars");
  if (m.name.empty() || m.name.find('/') != std::string::npos || m.name == "." || m.name == "..") {
    fail(ErrorCode::FormatError, "manifest: name must be a plain file name");
  }
  return m;
}

nlohmann::json manifest_to_json(const ModelManifest& m) {
  return {{"url", m.url}, {"bytes", m.total_bytes}, {"md5", m.md5_hex}, {"name", m.name}, {"version", m.version}};
}

ModelManifest load_manifest(const std::string& path_or_url) {
  std::string text;
  if (path_or_url.starts_with("http://")) {
    const Url u = split_url(path_or_url);
    httplib::Client cli(u.origin);
    cli.set_connection_timeout(10);
    const auto res = cli.Get(u.path);
    if (!res) fail(ErrorCode::NetworkError, "manifest download failed: " + httplib::to_string(res.error()));
    if (res->status != 200) fail(ErrorCode::NetworkError, "manifest download returned HTTP " + std::to_string(res->status));
    text = res->body;
  } else {
    std::ifstream in(path_or_url);
    if (!in) fail(ErrorCode::IoError, "cannot open manifest " + path_or_url);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  try {
    return manifest_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::FormatError, std::string("manifest is not valid JSON: ") + e.what());
  }
}

FetchResult fetch_model(const ModelManifest& manifest, const std::filesystem::path& dest_dir,
                        const FetchCallbacks& cb) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dest_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dest_dir.string());

  FetchResult result;
  result.path = dest_dir / manifest.name;
  const fs::path part = dest_dir / (manifest.name + ".part");
  std::lock_guard<std::mutex> one_at_a_time(lock_for(result.path));

  if (fs::exists(result.path)) {
    if (cb.verifying) cb.verifying();
    if (md5_file(result.path.string()) == manifest.md5_hex) {
      result.cache_hit = true;
      if (cb.progress) cb.progress(manifest.total_bytes, manifest.total_bytes);
      return result;
    }
    fs::remove(result.path, ec);  // stale or corrupt copy
  }

  std::uint64_t have = file_size_or_zero(part);
  if (have >= manifest.total_bytes) {
    fs::remove(part, ec);
    have = 0;
  }

  const Url u = split_url(manifest.url);
  httplib::Client cli(u.origin);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(30);
  httplib::Headers headers;
  if (have > 0) headers.emplace("Range", "bytes=" + std::to_string(have) + "-");

  std::ofstream out;
  std::uint64_t done = have;
  int status = 0;
  bool disk_full = false;
  bool io_error = false;

  const auto res = cli.Get(
      u.path, headers,
      [&](const httplib::Response& response) {
        status = response.status;
        if (status == 206 && have > 0) {
          result.resumed = true;
          out.open(part, std::ios::binary | std::ios::app);
        } else if (status == 200) {
          done = 0;  // server ignored the range; start over
          out.open(part, std::ios::binary | std::ios::trunc);
        } else {
          return false;
        }
        if (!out) io_error = true;
        return out.good();
      },
      [&](const char* data, std::size_t len) {
        errno = 0;
        out.write(data, static_cast<std::streamsize>(len));
        if (!out) {
          (errno == ENOSPC ? disk_full : io_error) = true;
          return false;
        }
        done += len;
        result.bytes_downloaded += len;
        if (cb.progress) cb.progress(std::min(done, manifest.total_bytes), manifest.total_bytes);
        return true;
      });
  out.close();

  if (disk_full) fail(ErrorCode::DiskFull, "no space left writing " + part.string());
  if (io_error) fail(ErrorCode::IoError, "cannot write " + part.string());
  if (!res) {
    if (status != 0 && status != 200 && status != 206) {
      fail(ErrorCode::NetworkError, "download returned HTTP " + std::to_string(status));
    }
    fail(ErrorCode::NetworkError, "download interrupted: " + httplib::to_string(res.error()) +
                                      " (partial file kept for resume)");
  }
  if (status != 200 && status != 206) {
    fail(ErrorCode::NetworkError, "download returned HTTP " + std::to_string(status));
  }

  const std::uint64_t size = file_size_or_zero(part);
  if (size < manifest.total_bytes) {
    fail(ErrorCode::NetworkError, "download ended early at " + std::to_string(size) + " of " +
                                      std::to_string(manifest.total_bytes) + " bytes");
  }
  if (cb.verifying) cb.verifying();
  if (size != manifest.total_bytes || md5_file(part.string()) != manifest.md5_hex) {
    fs::remove(part, ec);
    fail(ErrorCode::ChecksumMismatch, "downloaded file does not match the manifest checksum");
  }
  fs::rename(part, result.path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot install " + result.path.string() + ": " + ec.message());
  return result;
}

}  // namespace stlm
