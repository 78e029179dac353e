#include "tlg/errors.hpp"

namespace tlg {

void check_shape(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace tlg
