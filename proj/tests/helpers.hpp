#pragma once

#include <functional>
#include <string>
#include <vector>

#include "peernet/rng.hpp"
#include "peernet/tape.hpp"

namespace testutil {

using namespace peernet;

inline Tensor random_tensor(const Shape5& s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(s);
  for (i64 i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct GradCheckResult {
  double max_err = 0.0;       // worst |analytic - fd| beyond tolerance scaling
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  std::string worst_param;
  bool ok = true;
};

// Central finite differences against tape gradients for every element of
// every listed parameter. `run` must rebuild the graph from current
// parameter values on the given tape and return the scalar loss.
inline GradCheckResult gradcheck(const std::function<TensorValue(Tape&)>& run,
                                 const std::vector<Parameter*>& params, double step = 1e-5,
                                 double rel_tol = 1e-4, double abs_tol = 1e-7) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    TensorValue loss = run(tape);
    tape.backward(loss.node());
  }
  GradCheckResult res;
  auto eval = [&]() {
    Tape tape;
    return run(tape).value().item();
  };
  for (Parameter* p : params) {
    for (i64 i = 0; i < p->size(); ++i) {
      double saved = p->value[i];
      p->value[i] = saved + step;
      double up = eval();
      p->value[i] = saved - step;
      double down = eval();
      p->value[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double an = p->grad.empty() ? 0.0 : p->grad[i];
      double err = std::abs(an - fd);
      double tol = std::max(abs_tol, rel_tol * std::max(std::abs(an), std::abs(fd)));
      if (err > tol) {
        res.ok = false;
        if (err > res.max_err) {
          res.max_err = err;
          res.worst_analytic = an;
          res.worst_fd = fd;
          res.worst_param = p->name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return res;
}

}  // namespace testutil
