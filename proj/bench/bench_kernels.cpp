// Serial reference kernels against the OpenMP entry points on desk-scale shapes.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "remem/generator.hpp"
#include "remem/kernels.hpp"
#include "remem/rng.hpp"

using namespace remem;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(counter_normal(seed, i));
  return t;
}

double time_ms(const std::function<void()>& f, int reps) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
}

void row(const std::string& name, double serial, double parallel) {
  std::printf("%-28s %10.3f %10.3f %8.2fx\n", name.c_str(), serial, parallel, serial / parallel);
}

}  // namespace

int main(int argc, char** argv) {
  const int reps = argc > 1 ? std::stoi(argv[1]) : 20;
  std::printf("threads %d, %d repetitions\n", omp_get_max_threads(), reps);
  std::printf("%-28s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  struct Shape { int c, o, h; };
  for (Shape s : {Shape{32, 32, 8}, Shape{32, 16, 16}, Shape{16, 3, 32}, Shape{64, 64, 32}}) {
    const Tensor in = random_tensor({s.c, s.h, s.h}, 1);
    const Tensor w = random_tensor({s.o, s.c, 3, 3}, 2);
    const Tensor b = random_tensor({s.o}, 3);
    const Tensor g = random_tensor({s.o, s.h, s.h}, 4);
    const std::string tag = std::to_string(s.c) + "->" + std::to_string(s.o) + " @" + std::to_string(s.h);
    row("conv2d " + tag, time_ms([&] { kernels::reference::conv2d(in, w, b); }, reps),
        time_ms([&] { kernels::conv2d(in, w, b); }, reps));
    row("grad_input " + tag, time_ms([&] { kernels::reference::conv2d_grad_input(g, w); }, reps),
        time_ms([&] { kernels::conv2d_grad_input(g, w); }, reps));
    Tensor gw, gb;
    row("grad_params " + tag,
        time_ms([&] { kernels::reference::conv2d_grad_params(in, g, w.shape, gw, gb); }, reps),
        time_ms([&] { kernels::conv2d_grad_params(in, g, w.shape, gw, gb); }, reps));
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(s.c, s.c);
    row("second_moment " + tag, time_ms([&] { kernels::reference::accumulate_second_moment(in, acc); }, reps),
        time_ms([&] { kernels::accumulate_second_moment(in, acc); }, reps));
  }

  const Generator gen = build_random_generator(0);
  const Latent z = latent_for_seed(0, gen.latent_dim);
  std::printf("desk forward pass: %.3f ms\n", time_ms([&] { forward(gen, z); }, reps));
  return 0;
}
