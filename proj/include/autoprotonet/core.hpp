#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace apn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Filesystem or decoding failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Input image/embedding does not match the model geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

struct Resolution {
  int height = 32;
  int width = 32;

  friend bool operator==(const Resolution&, const Resolution&) = default;
};

inline std::string to_string(Resolution r) {
  return std::to_string(r.height) + "x" + std::to_string(r.width);
}

/// Forward-pass mode. `Train` uses batch statistics and records a tape for
/// backpropagation; `Eval` uses running statistics and is pure.
enum class Mode { Train, Eval };

enum class Split { MetaTrain, MetaVal, MetaTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::MetaTrain: return "meta-train";
    case Split::MetaVal: return "meta-val";
    case Split::MetaTest: return "meta-test";
  }
  return "unknown";
}

inline Split split_from_string(const std::string& s) {
  if (s == "meta-train") return Split::MetaTrain;
  if (s == "meta-val") return Split::MetaVal;
  if (s == "meta-test") return Split::MetaTest;
  throw InvalidArgument("unknown split '" + s + "' (expected meta-train, meta-val or meta-test)");
}

}  // namespace apn
