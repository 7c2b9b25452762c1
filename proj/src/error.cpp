#include "qallm/error.h"

namespace qallm {

UnparseableLine::UnparseableLine(std::size_t line_no)
    : Error("unparseable script line " + std::to_string(line_no)), line_no_(line_no) {}

}  // namespace qallm
