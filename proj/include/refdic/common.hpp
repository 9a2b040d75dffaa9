#pragma once
// Shared plumbing: error taxonomy, logging, endian-pinned binary IO and a
// small ordered parallel-for used by the batch pipelines.

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace refdic {

// Malformed or inconsistent input (files, configs, lookups). CLI exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Internal failure: shape mismatch, non-finite value, broken invariant.
// CLI exit code 3.
struct InternalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel log_threshold() {
  static LogLevel lvl = [] {
    const char* env = std::getenv("REFDIC_LOG");
    if (!env) return LogLevel::warn;
    std::string s(env);
    if (s == "error") return LogLevel::error;
    if (s == "warn") return LogLevel::warn;
    if (s == "info") return LogLevel::info;
    if (s == "debug") return LogLevel::debug;
    return LogLevel::warn;
  }();
  return lvl;
}

inline void log_msg(LogLevel lvl, const std::string& msg) {
  if (lvl > log_threshold()) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[refdic:" << names[static_cast<int>(lvl)] << "] " << msg << "\n";
}

// ---- little-endian binary IO ------------------------------------------------
// All on-disk numbers are little-endian regardless of host order.

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class BinReader {
 public:
  BinReader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  uint16_t u16() { return static_cast<uint16_t>(byte() | (byte() << 8)); }

  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(byte()) << (8 * i);
    return v;
  }

  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(byte()) << (8 * i);
    return v;
  }

  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str(size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  uint8_t byte() {
    need(1);
    return static_cast<uint8_t>(bytes_[pos_++]);
  }
  void need(size_t n) {
    if (pos_ + n > bytes_.size())
      throw DataError(origin_ + ": truncated file (wanted " + std::to_string(n) +
                      " bytes at offset " + std::to_string(pos_) + ")");
  }
  std::string bytes_;
  std::string origin_;
  size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write: " + path);
}

// Runs fn(i) for i in [0, n). Results must be written by index; chunk
// boundaries are deterministic so output never depends on thread count.
inline void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  size_t nthreads = std::min<size_t>(static_cast<size_t>(threads), n);
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex err_mu;
  for (size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (size_t i = t; i < n; i += nthreads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace refdic
