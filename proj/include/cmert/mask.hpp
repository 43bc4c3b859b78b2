#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmert {

enum class MaskKind { none, causal, latency, refinement };

// Boolean visibility matrix over query rows x key columns.
// allowed[i*cols+j] != 0 means query i may attend key j.
struct AttentionMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allowed;
  MaskKind kind = MaskKind::none;
  int delta = 0;

  AttentionMask() = default;
  AttentionMask(int r, int c, bool init)
      : rows(r), cols(c), allowed(static_cast<size_t>(r) * static_cast<size_t>(c), init ? 1 : 0) {
    if (r < 0 || c < 0) throw std::invalid_argument("AttentionMask: negative dimension");
  }

  uint8_t& at(int i, int j) { return allowed[static_cast<size_t>(i) * cols + j]; }
  uint8_t at(int i, int j) const { return allowed[static_cast<size_t>(i) * cols + j]; }

  // Every row must keep at least one attendable column, otherwise softmax
  // over that row is undefined.
  void check_rows_nonempty(const std::string& who) const {
    for (int i = 0; i < rows; ++i) {
      bool any = false;
      for (int j = 0; j < cols && !any; ++j) any = at(i, j) != 0;
      if (!any)
        throw std::invalid_argument(who + ": mask row " + std::to_string(i) +
                                    " has no allowed column");
    }
  }
};

// Square mask where i may attend j iff j <= i + delta. delta=0 is the plain
// causal mask, delta>0 is the latency-relaxed variant.
inline AttentionMask causal_mask(int n, int delta = 0) {
  AttentionMask m(n, n, false);
  m.kind = delta == 0 ? MaskKind::causal : MaskKind::latency;
  m.delta = delta;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (j <= i + delta) m.at(i, j) = 1;
  return m;
}

}  // namespace cmert
