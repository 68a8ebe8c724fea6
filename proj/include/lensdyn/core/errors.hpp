#pragma once

#include <stdexcept>
#include <string>

namespace lensdyn {

/// Base of every error thrown by the library. Subclasses name the contract
/// that was violated so callers (and the CLI) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LENSDYN_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  }

LENSDYN_DEFINE_ERROR(SpecError);        // invalid configuration or argument
LENSDYN_DEFINE_ERROR(LengthError);      // sequence longer than the model allows
LENSDYN_DEFINE_ERROR(VocabError);       // token id outside the vocabulary
LENSDYN_DEFINE_ERROR(FormatError);      // malformed file
LENSDYN_DEFINE_ERROR(TemplateError);    // bad query template
LENSDYN_DEFINE_ERROR(TrainingError);    // divergence during optimisation
LENSDYN_DEFINE_ERROR(CaptureError);     // requested state was not captured
LENSDYN_DEFINE_ERROR(TranslatorError);  // tuned-lens translators do not fit the model
LENSDYN_DEFINE_ERROR(FeatureError);     // feature vector does not match its spec
LENSDYN_DEFINE_ERROR(IndexError);       // layer/position out of range
LENSDYN_DEFINE_ERROR(SpanError);        // subject span missing or out of bounds
LENSDYN_DEFINE_ERROR(ConfigError);      // pipeline configuration unusable
LENSDYN_DEFINE_ERROR(PrerequisiteError);  // an upstream artifact is missing
LENSDYN_DEFINE_ERROR(ValidationError);  // artifacts violate an invariant

#undef LENSDYN_DEFINE_ERROR

}  // namespace lensdyn
