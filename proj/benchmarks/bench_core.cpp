#include <benchmark/benchmark.h>

#include "metalearn/inner_loop.hpp"
#include "metalearn/outer_loop.hpp"
#include "metalearn/tasks.hpp"

namespace {

using namespace metalearn;

ModelSpec bench_model_spec(int dim, int way) {
  ModelSpec spec;
  spec.encoder = EncoderSpec::mlp({dim, 64, 64, 64}, {2}, {2});
  spec.classification = true;
  spec.way = way;
  return spec;
}

Episode bench_episode(const ClusterFamily& family, const TaskSpec& spec) {
  Rng rng(derive_seed(1, kTagTrain, 0));
  return sample_episode(family, spec, Split::Train, rng);
}

void BM_ForwardBackward(benchmark::State& state) {
  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;
  const ModelSpec mspec = bench_model_spec(tspec.input_dim, tspec.way);
  MetaParams params = init_meta_params(mspec, std::nullopt, 1);
  const Episode ep = canonicalize(bench_episode(family, tspec));

  for (auto _ : state) {
    Tape tape;
    ModelVars vars = lift(params, tape);
    ThetaState theta = initial_theta(vars, tspec.way);
    Var logits =
        forward(vars, theta, constant(ep.support_x), {true, true});
    Var loss = base_loss(logits, constant(one_hot(ep.support_y, tspec.way)),
                         LossKind::CrossEntropy);
    std::vector<Var> leaves = theta.flat(true);
    benchmark::DoNotOptimize(grad(loss, leaves));
  }
}
BENCHMARK(BM_ForwardBackward);

void BM_AdaptEpisode(benchmark::State& state) {
  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;
  const ModelSpec mspec = bench_model_spec(tspec.input_dim, tspec.way);
  MetaParams params = init_meta_params(mspec, std::nullopt, 1);
  const Episode ep = bench_episode(family, tspec);

  InnerConfig inner;
  inner.steps = static_cast<int>(state.range(0));
  inner.flags = VariantFlags::all();
  const PrototypeEmbedder embedder;

  for (auto _ : state) {
    benchmark::DoNotOptimize(run_episode(params, ep, inner, embedder));
  }
}
BENCHMARK(BM_AdaptEpisode)->Arg(1)->Arg(5);

void BM_FirstOrderAdapt(benchmark::State& state) {
  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;
  const ModelSpec mspec = bench_model_spec(tspec.input_dim, tspec.way);
  MetaParams params = init_meta_params(mspec, std::nullopt, 1);
  const Episode ep = bench_episode(family, tspec);

  InnerConfig inner;
  inner.steps = 5;
  inner.first_order = true;
  inner.flags = VariantFlags::all();
  const PrototypeEmbedder embedder;

  for (auto _ : state) {
    benchmark::DoNotOptimize(run_episode(params, ep, inner, embedder));
  }
}
BENCHMARK(BM_FirstOrderAdapt);

}  // namespace

BENCHMARK_MAIN();
