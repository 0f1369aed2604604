#pragma once

#include <stdexcept>
#include <string>

namespace cellstyle {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied an argument that violates a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Configuration problems: bad manifest, unresolved paths, bad flags.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Numerical or pipeline failure while computing.
class ComputeError : public Error {
 public:
  using Error::Error;
};

class FileNotFound : public Error {
 public:
  explicit FileNotFound(const std::string& path)
      : Error("file not found: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class DecodeError : public Error {
 public:
  using Error::Error;
};

class UnsupportedBitDepth : public Error {
 public:
  using Error::Error;
};

class WriteError : public Error {
 public:
  using Error::Error;
};

// A non-integer pixel type was found where a label raster was expected.
class NotALabelImage : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public ComputeError {
 public:
  NonFiniteError(const std::string& what, int timestep)
      : ComputeError(what + " (timestep " + std::to_string(timestep) + ")"),
        timestep_(timestep) {}
  int timestep() const noexcept { return timestep_; }

 private:
  int timestep_;
};

}  // namespace cellstyle
