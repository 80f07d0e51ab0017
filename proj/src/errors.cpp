#include "rdperm/errors.hpp"

namespace rdperm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
  case ErrorCode::InvalidArgument:
    return "InvalidArgument";
  case ErrorCode::Io:
    return "Io";
  case ErrorCode::MissingColumn:
    return "MissingColumn";
  case ErrorCode::NonNumericCell:
    return "NonNumericCell";
  case ErrorCode::EmptyFrame:
    return "EmptyFrame";
  case ErrorCode::DegenerateWindow:
    return "DegenerateWindow";
  case ErrorCode::RankDeficientDesign:
    return "RankDeficientDesign";
  case ErrorCode::NonConvergence:
    return "NonConvergence";
  case ErrorCode::SeparationDetected:
    return "SeparationDetected";
  case ErrorCode::AllTreatedOrAllControl:
    return "AllTreatedOrAllControl";
  case ErrorCode::NoSignChange:
    return "NoSignChange";
  case ErrorCode::NoCovariates:
    return "NoCovariates";
  case ErrorCode::EmptySide:
    return "EmptySide";
  case ErrorCode::InsufficientBins:
    return "InsufficientBins";
  case ErrorCode::Config:
    return "Config";
  }
  return "Unknown";
}

} // namespace rdperm
