// Compile-and-link exercise for every public header.

#include "dllab/autodiff.hpp"
#include "dllab/binio.hpp"
#include "dllab/checkpoint.hpp"
#include "dllab/common.hpp"
#include "dllab/data.hpp"
#include "dllab/experiment.hpp"
#include "dllab/linearized.hpp"
#include "dllab/metric_series.hpp"
#include "dllab/metrics.hpp"
#include "dllab/stats.hpp"
#include "dllab/network.hpp"
#include "dllab/optimizer.hpp"
#include "dllab/param_vector.hpp"
#include "dllab/rng.hpp"
#include "dllab/tape.hpp"
#include "dllab/tensor.hpp"
#include "dllab/trainer.hpp"

#include <cstdio>

int main() {
  dllab::NetworkSpec spec;
  spec.input_dim = 2;
  spec.num_classes = 2;
  spec.hidden = {8, 8};
  dllab::ParamVector w = dllab::init_params(spec, 42);
  std::printf("params=%lld\n", static_cast<long long>(w.values.size()));
  return 0;
}
