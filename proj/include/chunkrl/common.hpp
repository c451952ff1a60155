#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace chunkrl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Errc {
  config,     // bad configuration or arguments
  dimension,  // shape mismatch
  protocol,   // call sequence violation (step after done, double finalize, ...)
  io,         // file read/write failure
  numeric,    // non-finite values where finite ones are required
  registry,   // unknown environment or network name
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Errc code() const { return code_; }

  // CLI exit code for this error category.
  int exit_code() const {
    switch (code_) {
      case Errc::config: return 1;
      case Errc::io: return 2;
      case Errc::protocol: return 3;
      case Errc::registry: return 3;
      case Errc::dimension: return 4;
      case Errc::numeric: return 5;
    }
    return 1;
  }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_finite(const Vec& v, const std::string& what) {
  require(v.allFinite(), Errc::numeric, what + " contains non-finite values");
}

inline void require_finite(const Mat& m, const std::string& what) {
  require(m.allFinite(), Errc::numeric, what + " contains non-finite values");
}

}  // namespace chunkrl
