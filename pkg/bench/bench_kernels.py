#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against the pure-numpy fallback.

Times the fused hot kernels (GRU gates forward/backward, Gaussian
quantities, orbit generation) and one full shared-state training epoch
per backend. The active backend elsewhere in the package follows
INFODPCCA_NUMBA; here both are loaded explicitly so one process can
compare them.

Usage: python bench/bench_kernels.py [--repeat 50] [--batch 64] [--hidden 64]
"""

import argparse
import time

import numpy as np

from infodpcca import kernels


def time_fn(fn, args, repeat):
    fn(*args)  # warm-up (includes JIT compilation for the numba flavour)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def bench_kernels(repeat, batch, hidden):
    rng = np.random.default_rng(0)
    B, H, D = batch, hidden, 32
    ax = rng.normal(size=(B, 3 * H))
    ah = rng.normal(size=(B, 3 * H))
    h = rng.uniform(-0.9, 0.9, size=(B, H))
    dh = rng.normal(size=(B, H))
    x = rng.normal(size=(B, D))
    mu = rng.normal(size=(B, D))
    sig = rng.uniform(0.3, 2.0, size=(B, D))
    dout = rng.normal(size=B)

    npk = kernels.get_kernels("numpy")
    have_numba = kernels.numba_available()
    nbk = kernels.get_kernels("numba") if have_numba else None

    _, r, u, c = npk.gru_gates_fwd(ax, ah, h)
    cases = [
        ("henon_orbit (T=300)", "henon_orbit", (0.1, 0.0, 1.4, 0.3, 300, 10.0)),
        ("gru_gates_fwd", "gru_gates_fwd", (ax, ah, h)),
        ("gru_gates_bwd", "gru_gates_bwd", (dh, ah, h, r, u, c)),
        ("softplus_fwd", "softplus_fwd", (x,)),
        ("gauss_logpdf_fwd", "gauss_logpdf_fwd", (x, mu, sig)),
        ("gauss_logpdf_bwd", "gauss_logpdf_bwd", (x, mu, sig, dout)),
        ("gauss_ce_fwd", "gauss_ce_fwd", (mu, sig, x, sig)),
        ("gauss_kl_bwd", "gauss_kl_bwd", (mu, sig, x, sig, dout)),
    ]
    print(f"\nkernel timings (mean of {repeat} runs, batch={B}, hidden={H}):")
    print(f"{'kernel':24s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for label, name, args in cases:
        t_np = time_fn(getattr(npk, name), args, repeat)
        if have_numba:
            t_nb = time_fn(getattr(nbk, name), args, repeat)
            print(f"{label:24s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us "
                  f"{t_np / t_nb:8.2f}x")
        else:
            print(f"{label:24s} {t_np * 1e6:10.1f}us {'n/a':>12s} {'':>9s}")


def bench_training_epoch(batch, hidden):
    from infodpcca.data import HenonParams, generate_henon
    from infodpcca.models import ModelSpec, TrainConfig, build, train_step1

    ds = generate_henon(HenonParams(t_len=50, n_seq=batch, dx=20, dy=20,
                                    noise_std=0.05, seed=0))
    spec = ModelSpec("infodpcca", dx=20, dy=20, rnn_hidden=hidden,
                     mlp_hidden=(hidden, hidden))
    cfg = TrainConfig(max_epochs=3, batch_size=batch, seed=0, patience=999)

    results = {}
    for name in ("numpy", "numba") if kernels.numba_available() else ("numpy",):
        kernels.set_active(name)
        store = build(spec, 0)
        train_step1(spec, store, ds, cfg)  # warm-up epoch set
        t0 = time.perf_counter()
        train_step1(spec, build(spec, 0), ds, cfg)
        results[name] = (time.perf_counter() - t0) / cfg.max_epochs
    kernels.set_active(None)
    print(f"\nfull step-1 training epoch (N={batch}, T=50, d=20, H={hidden}):")
    for name, dt in results.items():
        print(f"  {name:6s} {dt * 1e3:8.1f} ms/epoch")
    if len(results) == 2:
        print(f"  speedup {results['numpy'] / results['numba']:.2f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--hidden", type=int, default=64)
    args = ap.parse_args()
    if not kernels.numba_available():
        print("numba unavailable; reporting numpy-only timings")
    bench_kernels(args.repeat, args.batch, args.hidden)
    bench_training_epoch(args.batch, args.hidden)


if __name__ == "__main__":
    main()
