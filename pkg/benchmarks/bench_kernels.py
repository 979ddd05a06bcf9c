"""Compare the compiled and numpy kernels on the two hot loops.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Grid accumulation runs on a full synthetic disparity frame; block matching on
the matching stereo pair.  Results are checked for agreement before timing.
"""
import argparse
import json
import time

import numpy as np

from freespace import kernels
from freespace.disparity import CovarianceModel, block_match, measurements_from_disparity
from freespace.geometry import GridGeometry
from freespace.occupancy import build_grid
from freespace.synthetic import corridor_scene, generate_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--width", type=int, default=400)
    ap.add_argument("--height", type=int, default=300)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    spec = corridor_scene(2, args.width, args.height, focal=args.width)
    fr = generate_scene(spec, 0)
    ms = measurements_from_disparity(fr.disparity, 1, CovarianceModel(sigma_d=0.5))
    u_g = GridGeometry.u_disparity(args.width, 64)
    m_g = GridGeometry.metric(0.2, 20.0, 10.0)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])

    cases = {
        "grid_u_disparity": lambda b: build_grid(ms, u_g, backend=b).likelihood,
        "grid_metric": lambda b: build_grid(ms, m_g, cam=spec.camera, backend=b).likelihood,
        "block_match": lambda b: block_match(fr.left, fr.right, 3, 64, backend=b).values,
    }
    results = {"measurements": len(ms), "image": [args.width, args.height], "cases": {}}
    print(f"{len(ms)} measurements, {args.width}x{args.height} image, best of {args.repeat}")
    print(f"{'case':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}  max |diff|")
    for name, fn in cases.items():
        outs = {b: fn(b) for b in backends}
        ref = outs["python"]
        diff = max((float(np.nanmax(np.abs(o - ref))) if np.isfinite(o).any() else 0.0) for o in outs.values())
        same_nan = all(np.array_equal(np.isnan(o), np.isnan(ref)) for o in outs.values())
        t = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        results["cases"][name] = {"seconds": t, "speedup": speed, "max_abs_diff": diff, "same_invalid": same_nan}
        print(f"{name:<18}" + "".join(f"{t[b]:>11.4f}s" for b in backends) + f"{speed:>9.1f}x  {diff:.3g}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
