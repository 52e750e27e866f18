#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gckpt {

enum class ErrorCode {
  BadProgram,
  BadConfig,
  BadLength,
  OutOfRange,
  Overlap,
  KeyInUse,
  InvalidHandle,
  StaleBuffer,
  NoGetter,
  NoSlots,
  DecodeError,
  DuplicateName,
  HandlerFailed,
  PluginFailed,
  QuiesceTimeout,
  IoFailure,
  CorruptImage,
  HashMismatch,
  MissingBase,
  BrokenChain,
  ChannelStuck,
  TopologyMismatch,
  UnknownSession,
};

inline std::string_view error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::BadProgram: return "BadProgram";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::BadLength: return "BadLength";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::Overlap: return "Overlap";
    case ErrorCode::KeyInUse: return "KeyInUse";
    case ErrorCode::InvalidHandle: return "InvalidHandle";
    case ErrorCode::StaleBuffer: return "StaleBuffer";
    case ErrorCode::NoGetter: return "NoGetter";
    case ErrorCode::NoSlots: return "NoSlots";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::DuplicateName: return "DuplicateName";
    case ErrorCode::HandlerFailed: return "HandlerFailed";
    case ErrorCode::PluginFailed: return "PluginFailed";
    case ErrorCode::QuiesceTimeout: return "QuiesceTimeout";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::CorruptImage: return "CorruptImage";
    case ErrorCode::HashMismatch: return "HashMismatch";
    case ErrorCode::MissingBase: return "MissingBase";
    case ErrorCode::BrokenChain: return "BrokenChain";
    case ErrorCode::ChannelStuck: return "ChannelStuck";
    case ErrorCode::TopologyMismatch: return "TopologyMismatch";
    case ErrorCode::UnknownSession: return "UnknownSession";
  }
  return "Unknown";
}

inline ErrorCode error_code_from_name(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::UnknownSession); i++) {
    auto c = static_cast<ErrorCode>(i);
    if (error_code_name(c) == name) return c;
  }
  return ErrorCode::IoFailure;  // unrecognized names degrade to a plain failure
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace gckpt
