// Benchmarks the parallel kernels against the serial reference at the layer
// shapes the segmentation models actually use. Reports GMAC/s for each.

#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "useg/kernels.hpp"
#include "useg/ref_kernels.hpp"
#include "useg/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace useg;

namespace {

Tensor4 random_tensor(Shape4 s, std::mt19937_64& rng) {
  Tensor4 t(s);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

double time_of(const std::function<void()>& fn, int reps) {
  fn();  // warm
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

struct ConvCase {
  const char* name;
  int n, ci, co, hw, k, pad;
};

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  std::mt19937_64 rng(7);

  const std::vector<ConvCase> cases = {
      {"enc1 conv 24->24 @224", 1, 24, 24, 224, 3, 1},   {"enc2 conv 48->48 @112", 1, 48, 48, 112, 3, 1},
      {"enc3 conv 96->96 @56", 1, 96, 96, 56, 3, 1},     {"enc4 conv 192->192 @28", 1, 192, 192, 28, 3, 1},
      {"enc5 conv 384->384 @14", 1, 384, 384, 14, 3, 1}, {"head conv 24->1 @224 k1", 1, 24, 1, 224, 1, 0},
  };

#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (no OpenMP)\n");
#endif
  std::printf("%-28s %12s %12s %10s %10s %8s\n", "case", "par GMAC/s", "ser GMAC/s", "par ms", "ser ms", "maxdiff");

  double worst_rel = 0.0;
  for (const auto& c : cases) {
    Tensor4 x = random_tensor({c.n, c.ci, c.hw, c.hw}, rng);
    Tensor4 w = random_tensor({c.co, c.ci, c.k, c.k}, rng);
    Tensor4 b = random_tensor({1, c.co, 1, 1}, rng);
    const double macs = double(c.k) * c.k * c.ci * c.co * c.hw * c.hw;  // pad-preserving

    Tensor4 ypar;
    const int reps = quick ? 2 : (c.hw >= 112 ? 10 : 30);
    const double tp = time_of([&] { ypar = kernels::conv2d_fwd(x, w, b, 1, c.pad); }, reps);
    Tensor4 yser;
    const double ts = time_of([&] { yser = ref::conv2d(x, w, b, 1, c.pad); }, quick ? 1 : 3);

    double maxdiff = 0.0;
    for (std::int64_t i = 0; i < ypar.numel(); ++i)
      maxdiff = std::max(maxdiff, double(std::abs(ypar[i] - yser[i])));
    worst_rel = std::max(worst_rel, maxdiff);
    std::printf("%-28s %12.2f %12.2f %10.3f %10.3f %8.1e\n", c.name, macs / tp * 1e-9, macs / ts * 1e-9, tp * 1e3,
                ts * 1e3, maxdiff);
  }

  // backward kernels at a mid-size shape
  {
    const int ci = 96, co = 96, hw = 56;
    Tensor4 x = random_tensor({3, ci, hw, hw}, rng);
    Tensor4 w = random_tensor({co, ci, 3, 3}, rng);
    Tensor4 dy = random_tensor({3, co, hw, hw}, rng);
    const double macs = 9.0 * ci * co * hw * hw * 3;
    Tensor4 dx(x.shape());
    const double tbi = time_of([&] { dx.fill(0); kernels::conv2d_bwd_input_s1(dy, w, 1, dx); }, quick ? 2 : 10);
    Tensor4 dw(w.shape()), db({1, co, 1, 1});
    const double tbw =
        time_of([&] { dw.fill(0); db.fill(0); kernels::conv2d_bwd_weight(x, dy, 3, 1, 1, dw, db); }, quick ? 2 : 10);
    std::printf("%-28s %12.2f %12s %10.3f\n", "bwd-input 96->96 @56 n3", macs / tbi * 1e-9, "-", tbi * 1e3);
    std::printf("%-28s %12.2f %12s %10.3f\n", "bwd-weight 96->96 @56 n3", macs / tbw * 1e-9, "-", tbw * 1e3);
  }

  std::printf("max |par - ser| across conv cases: %.3e\n", worst_rel);
  return 0;
}
