// Finite-difference gradient oracle used across the unit and acceptance
// suites. Analytic gradients are compared against central differences on a
// random sample of coordinates per tensor.
#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <vector>

#include "cadre/common.hpp"
#include "cadre/tensor.hpp"

namespace fdcheck {

struct Report {
  double max_rel = 0.0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

// loss_fn must rebuild the graph from the current tensor values on every
// call and return a scalar. `wrt` tensors must require grad on `tape`.
inline Report check_gradients(cadre::nn::Tape& tape,
                              std::vector<cadre::nn::Tensor> wrt,
                              const std::function<cadre::nn::Tensor()>& loss_fn,
                              cadre::Rng& rng,
                              std::size_t max_per_tensor = 12,
                              double h = 1e-5) {
  using cadre::nn::Tensor;

  for (auto& t : wrt) t.zero_grad();
  tape.clear();
  Tensor loss = loss_fn();
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& t : wrt) analytic.push_back(t.grad());
  tape.clear();

  Report rep;
  tape.set_recording(false);
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor& t = wrt[ti];
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_per_tensor) {
      // Fisher-Yates prefix shuffle picks a deterministic random sample.
      for (std::size_t i = 0; i < max_per_tensor; ++i) {
        const std::size_t j = i + rng.uniform_int(idx.size() - i);
        std::swap(idx[i], idx[j]);
      }
      idx.resize(max_per_tensor);
    }
    for (std::size_t i : idx) {
      const double saved = t.value()[i];
      const auto central = [&](double hh) {
        t.value()[i] = saved + hh;
        const double fp = loss_fn().item();
        t.value()[i] = saved - hh;
        const double fm = loss_fn().item();
        t.value()[i] = saved;
        return (fp - fm) / (2.0 * hh);
      };
      double numeric = central(h);
      double e = rel_err(analytic[ti][i], numeric);
      // A mismatch that shrinks with the step width is a ReLU kink inside
      // the probe interval, not a wrong gradient; a genuine bug stays put
      // at every step width.
      if (e > 1e-6) {
        for (const double hh : {h / 16.0, h / 256.0}) {
          const double refined = central(hh);
          const double e2 = rel_err(analytic[ti][i], refined);
          if (e2 < e) {
            e = e2;
            numeric = refined;
          }
          if (e <= 1e-6) break;
        }
      }
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst_analytic = analytic[ti][i];
        rep.worst_numeric = numeric;
      }
      ++rep.checked;
    }
  }
  tape.set_recording(true);
  return rep;
}

}  // namespace fdcheck
