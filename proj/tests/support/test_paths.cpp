#include "support/test_paths.hpp"

namespace pcfglab::testing {
std::string grammar_path(const std::string& name) {
  return std::string(PCFGLAB_GRAMMAR_DIR) + "/" + name + ".pcfg";
}
std::string data_path(const std::string& name) {
  return std::string(PCFGLAB_DATA_DIR) + "/" + name;
}
}  // namespace pcfglab::testing
