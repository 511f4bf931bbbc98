#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace midinf {

enum class ErrorCode {
  // tokenizer
  OnsetOutOfRange,
  InvalidNote,
  KindMismatch,
  TooLong,
  Unsorted,
  GrammarViolation,
  // model
  ContextOverflow,
  ShapeMismatch,
  MissingTensor,
  CorruptFile,
  InvalidConfig,
  InternalCheck,
  // decoding / streaming
  InvalidParams,
  EmptySupport,
  ChunkRollover,
  SinkClosed,
  // profiler
  EmptyInput,
  // midi
  MalformedHeader,
  MalformedTrack,
  UnsupportedFormat,
  TooManyInstruments,
  // service / io
  PortInUse,
  Io,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace midinf
