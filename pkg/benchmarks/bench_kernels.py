"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from fedlog import _backend, expfam, nn


def cases():
    rng = np.random.default_rng(0)
    body = nn.init_body(784, [64], 51, rng)
    head = nn.init_head(10, 51, rng)
    x = rng.uniform(0, 1, size=(10, 784))
    y = rng.integers(0, 10, size=10)
    small = nn.init_body(2, [32, 32], 3, rng)
    xs = rng.uniform(-5, 5, size=(40, 2))
    ys = rng.integers(0, 2, size=40)
    hs = nn.init_head(2, 3, rng)
    params = body.parameters()
    grads = [rng.standard_normal(p.shape) for p in params]
    cfg = nn.TrainConfig()
    feats = nn.forward(body, rng.uniform(0, 1, size=(3000, 784)))
    labels = rng.integers(0, 10, size=3000)
    post = expfam.posterior_update(expfam.PriorParams.uninformative(10, 51), [(expfam.batch_statistic(feats, labels, 10), 3000)])

    def adam():
        nn.optimizer_step(params, grads, nn.OptimizerState(), cfg)

    return {
        "mnist batch loss+grad (10x784, 64, 50)": lambda: nn.loss_and_gradients(body, x, y, head),
        "circle batch loss+grad (40x2, 32, 32, 2)": lambda: nn.loss_and_gradients(small, xs, ys, hs),
        "adam step (50k params)": adam,
        "MAP solve (10x51, tol 1e-6)": lambda: expfam.map_solve(post, max_iters=2000),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = _backend.available()
    print(f"{'kernel':<42}" + "".join(f"{b:>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases().items():
        times = {}
        for b in backends:
            _backend.use(b)
            number, _ = timeit.Timer(fn).autorange()
            times[b] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
        speed = times["python"] / times["cython"] if len(times) == 2 else float("nan")
        print(f"{name:<42}" + "".join(f"{times[b] * 1e6:>11.1f} us" for b in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
