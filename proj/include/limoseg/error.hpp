#pragma once

#include <stdexcept>
#include <string>

namespace limoseg {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define LIMOSEG_DEFINE_ERROR(Name)          \
    class Name : public Error {             \
    public:                                 \
        using Error::Error;                 \
    }

LIMOSEG_DEFINE_ERROR(IoError);
LIMOSEG_DEFINE_ERROR(MalformedFileError);
LIMOSEG_DEFINE_ERROR(LabelMismatchError);
LIMOSEG_DEFINE_ERROR(ParseError);
LIMOSEG_DEFINE_ERROR(InvalidPoseError);
LIMOSEG_DEFINE_ERROR(MissingLabelsError);
LIMOSEG_DEFINE_ERROR(InvalidConfigError);
LIMOSEG_DEFINE_ERROR(ShapeError);
LIMOSEG_DEFINE_ERROR(RangeError);
LIMOSEG_DEFINE_ERROR(PreconditionError);
LIMOSEG_DEFINE_ERROR(UndefinedLossError);
LIMOSEG_DEFINE_ERROR(IncompatibleCheckpointError);
LIMOSEG_DEFINE_ERROR(FormatError);
LIMOSEG_DEFINE_ERROR(MissingArtifactError);
LIMOSEG_DEFINE_ERROR(NonFiniteLossError);
LIMOSEG_DEFINE_ERROR(CalibrationError);

#undef LIMOSEG_DEFINE_ERROR

}  // namespace limoseg
