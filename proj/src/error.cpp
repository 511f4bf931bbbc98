#include "midinf/error.hpp"

namespace midinf {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::OnsetOutOfRange: return "OnsetOutOfRange";
    case ErrorCode::InvalidNote: return "InvalidNote";
    case ErrorCode::KindMismatch: return "KindMismatch";
    case ErrorCode::TooLong: return "TooLong";
    case ErrorCode::Unsorted: return "Unsorted";
    case ErrorCode::GrammarViolation: return "GrammarViolation";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InternalCheck: return "InternalCheck";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::EmptySupport: return "EmptySupport";
    case ErrorCode::ChunkRollover: return "ChunkRollover";
    case ErrorCode::SinkClosed: return "SinkClosed";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::MalformedTrack: return "MalformedTrack";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::TooManyInstruments: return "TooManyInstruments";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace midinf
