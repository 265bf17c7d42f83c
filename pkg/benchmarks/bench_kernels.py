"""Compiled versus numpy kernels on the hot loops of albedo assembly.

Run:  python benchmarks/bench_kernels.py [--n 32] [--repeat 3]

Each kernel is fed identical inputs from a real assembler; the script checks
that both backends agree and prints the best-of-N wall time of each.
"""
import argparse
import time

import numpy as np

from gaugelab import albedo as alb
from gaugelab import kernels
from gaugelab.fields import constant_pair
from gaugelab.geometry import ConvexDomain, build_boundary_grid


def best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def window_inputs(asm, n_pairs, rng):
    gi = asm.grid_in
    st = asm.settings
    cols = np.nonzero(asm.active_in_mask)[0]
    ri = rng.integers(0, asm.active_out.size, n_pairs)
    cj = rng.choice(cols, n_pairs)
    from gaugelab.geometry import boundary_chart
    aj, sj = boundary_chart(gi, gi.points[cj], gi.directions[cj])
    da, ds = gi.meta["d_alpha"], gi.meta["d_s"]
    xg, wg = np.polynomial.legendre.leggauss(st.window_order)
    dl = 0.5 * (da + ds) * xg
    wl = 0.5 * (da + ds) * wg
    xs, ws = np.polynomial.legendre.leggauss(st.window_sigma)
    io = asm.active_out[ri]
    o0, oH, on, otab, otau = asm._out_tab
    t0, H, nn, tab, _ = asm._in_tab
    return (asm.grid_out.points[io], asm.grid_out.directions[io], ri, np.zeros(n_pairs),
            otau[ri], asm._act_pos[cj], aj, sj, dl, wl, xs, ws, da, ds, st.n_sub,
            gi.center[0], gi.center[1], gi.radius, otab, o0, oH, on,
            asm._sub_pts.reshape(-1, 2), asm._sub_dirs.reshape(-1, 2), tab, t0, H, nn)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--pairs", type=int, default=20000)
    args = ap.parse_args()
    d = ConvexDomain(2, 2.0, 1.0)
    gi = build_boundary_grid(d, "ball", "incoming", args.n, args.n)
    go = build_boundary_grid(d, "ball", "outgoing", args.n, args.n)
    asm = alb.AlbedoAssembler(constant_pair(0.5, 0.05, d), d, gi, go)
    rng = np.random.default_rng(0)
    py = kernels.get_backend("python")
    try:
        cc = kernels.get_backend("compiled")
    except ImportError:
        print("compiled backend not built; only the numpy timings are shown")
        cc = None

    # once-scattered point sampling for one column block
    cols = np.nonzero(asm.active_in_mask)[0][:64]
    pos = asm._act_pos[cols]
    ns = asm._sub_pts.shape[1]
    rows = (pos[:, None] * ns + np.arange(ns)[None, :]).ravel()
    t0, H, n, tab, tau = asm._in_tab
    o0, oH, on, otab, otau = asm._out_tab
    xo = go.points[asm.active_out]
    vo = go.directions[asm.active_out]
    ss_args = kernels._conv((asm._sub_pts.reshape(-1, 2)[rows], asm._sub_dirs.reshape(-1, 2)[rows],
                             tau[rows], tab[rows], t0[rows], H[rows], n[rows], xo, vo, otau,
                             otab, o0, oH, on))
    w_args = kernels._conv(window_inputs(asm, args.pairs, rng))

    # polar interpolation stencils
    pts = rng.uniform(-1, 1, size=(400_000, 2))
    pw_args = (np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]), 0.125, 8, 32)

    cases = [("single_scatter_block", "single_scatter_block", ss_args),
             ("window_points", "window_points", w_args),
             ("polar_weights", "polar_weights", pw_args)]
    print(f"{'kernel':24s} {'numpy [s]':>10s} {'compiled [s]':>13s} {'speedup':>8s} {'max diff':>10s}")
    for label, name, a in cases:
        tp, outp = best_of(lambda: getattr(py, name)(*a), args.repeat)
        if cc is None:
            print(f"{label:24s} {tp:10.4f}")
            continue
        tc, outc = best_of(lambda: getattr(cc, name)(*a), args.repeat)
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y))))
                   for x, y in zip(outp, outc))
        print(f"{label:24s} {tp:10.4f} {tc:13.4f} {tp / tc:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
