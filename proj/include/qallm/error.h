#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qallm {

// Base of every error the library raises. Subclasses name the failure mode
// so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnparseableLine : public Error {
public:
    explicit UnparseableLine(std::size_t line_no);
    std::size_t line_no() const { return line_no_; }

private:
    std::size_t line_no_;
};

class MultipleQueriers : public Error { public: using Error::Error; };
class DegenerateInput : public Error { public: using Error::Error; };
class DimensionMismatch : public Error { public: using Error::Error; };
class EmbedServiceError : public Error { public: using Error::Error; };
class TargetTooLong : public Error { public: using Error::Error; };
class ShapeError : public Error { public: using Error::Error; };
class ManifestMismatch : public Error { public: using Error::Error; };
class CorruptTensor : public Error { public: using Error::Error; };
class EmptyMask : public Error { public: using Error::Error; };
class ZeroVector : public Error { public: using Error::Error; };
class MissingGlobalRepr : public Error { public: using Error::Error; };
class NonFiniteLoss : public Error { public: using Error::Error; };
class JudgeServiceError : public Error { public: using Error::Error; };
class InvalidVerdict : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };

}  // namespace qallm
