// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace peftlab {

// Root of every error the library throws. Callers that only need to report
// a failure can catch this; the CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PEFTLAB_DECLARE_ERROR(Name)       \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

// tensor engine
PEFTLAB_DECLARE_ERROR(ShapeMismatch);
PEFTLAB_DECLARE_ERROR(NonFiniteValue);
PEFTLAB_DECLARE_ERROR(GraphConsumed);
PEFTLAB_DECLARE_ERROR(EmptyMask);

// tokenizer
PEFTLAB_DECLARE_ERROR(UnknownToken);

// quant4
PEFTLAB_DECLARE_ERROR(NonFiniteInput);

// corpus
PEFTLAB_DECLARE_ERROR(MalformedXml);
PEFTLAB_DECLARE_ERROR(SchemaViolation);
PEFTLAB_DECLARE_ERROR(IoError);

// lora
PEFTLAB_DECLARE_ERROR(NoTargetMatched);
PEFTLAB_DECLARE_ERROR(RankTooLarge);

// model
PEFTLAB_DECLARE_ERROR(SequenceTooLong);
PEFTLAB_DECLARE_ERROR(TokenOutOfRange);
PEFTLAB_DECLARE_ERROR(InvalidConfig);

// trainer
PEFTLAB_DECLARE_ERROR(QuestionTooLong);
PEFTLAB_DECLARE_ERROR(NoTrainableParameters);

// checkpoint
PEFTLAB_DECLARE_ERROR(BadMagic);
PEFTLAB_DECLARE_ERROR(VersionMismatch);
PEFTLAB_DECLARE_ERROR(HashMismatch);
PEFTLAB_DECLARE_ERROR(CorruptIndex);

// generator
PEFTLAB_DECLARE_ERROR(PromptTooLong);

#undef PEFTLAB_DECLARE_ERROR

class MalformedRecord : public Error {
 public:
  MalformedRecord(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::size_t step)
      : Error("non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace peftlab
