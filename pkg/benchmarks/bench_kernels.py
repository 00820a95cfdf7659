"""Time each compiled kernel against its numpy fallback.

    python benchmarks/bench_kernels.py [--points 120000] [--repeat 5]

Both variants are called directly, so one run compares them regardless of
``RANGEVIT_DISABLE_NUMBA``; the variable only decides which one the library
binds by default (reported in the header). Outputs are checked for equality
before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rangevit import _kernels
from rangevit.data_io import SceneSpec, generate_scene
from rangevit.projection import SensorFov, spherical_project


def best_time(fn, repeat: int) -> float:
    fn()  # warm-up (numba compiles or loads its cache here)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(num_points: int, rng: np.random.Generator):
    height, width = 64, 2048
    beams = height
    spec = SceneSpec(seed=1, beams=beams, width=max(64, num_points // beams), fov=SensorFov(3.0, -25.0))
    cloud = generate_scene(spec)
    img = spherical_project(cloud, spec.fov, height, width)
    rc = img.integer_pixels()
    flat = rc[:, 0] * width + rc[:, 1]
    ranges = cloud.ranges()

    refine = cloud.xyz[: min(len(cloud), 20000)]
    idx = rng.integers(-1, 5000, len(cloud) * 4)
    vals = rng.standard_normal((idx.size, 32))
    labels = rng.integers(1, 5, (height, width))

    yield "resolve_collisions", f"{len(cloud)} points", lambda k: k(flat, ranges, height * width)
    yield "radius_search", f"{len(refine)} points, r=1.2", lambda k: k(refine, refine, 1.2, 32)
    yield "scatter_add_rows", f"{idx.size} rows x 32", lambda k: k(np.zeros((5000, 32)), idx, vals)
    yield "knn_vote", f"{len(cloud)} points, 5x5 window", lambda k: k(
        rc[:, 0], rc[:, 1], ranges, img.features[0].astype(np.float64), img.occupancy, labels, 5, 5, 1.0, 5)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=120_000, help="approximate scan size")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"default backend: {_kernels.BACKEND} (RANGEVIT_DISABLE_NUMBA=1 selects numpy)")
    print(f"{'kernel':20s} {'input':28s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    rng = np.random.default_rng(0)
    for name, desc, call in cases(args.points, rng):
        slow = getattr(_kernels, f"{name}_numpy")
        fast = getattr(_kernels, f"{name}_numba")
        if not same(call(slow), call(fast)):
            raise SystemExit(f"{name}: numpy and numba results differ")
        t_np = best_time(lambda: call(slow), args.repeat)
        t_nb = best_time(lambda: call(fast), args.repeat)
        print(f"{name:20s} {desc:28s} {t_np * 1e3:8.2f}ms {t_nb * 1e3:8.2f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
