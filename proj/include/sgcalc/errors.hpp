#pragma once

#include <stdexcept>
#include <string>

namespace sgcalc {

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SGCALC_ERROR(Name)                                                 \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(#Name, what) {}         \
  };

SGCALC_ERROR(DomainError)
SGCALC_ERROR(SchemaError)
SGCALC_ERROR(NonConvergent)
SGCALC_ERROR(DegreeOrderViolation)
SGCALC_ERROR(IncompatibleTriple)
SGCALC_ERROR(GridTooCoarse)
SGCALC_ERROR(SampleOutOfRange)
SGCALC_ERROR(NotElliptic)
SGCALC_ERROR(BoundaryPoint)
SGCALC_ERROR(DegenerateSection)
SGCALC_ERROR(GradientMismatch)
SGCALC_ERROR(NotClosed)
SGCALC_ERROR(NotRadiallyConvergent)
SGCALC_ERROR(PhaseMismatch)
SGCALC_ERROR(UnsupportedPhase)
SGCALC_ERROR(InternalError)

#undef SGCALC_ERROR

}  // namespace sgcalc
