"""Synthetic benchmark datasets: chaotic-map paired sequences, a
two-regime grouped variant, deterministic splits, and a bit-exact
on-disk format.

Directory layout: ``meta.json`` plus raw row-major float32 little-endian
tensors ``x1.bin``, ``x2.bin``, optional ``z.bin`` and ``labels.bin``
(int32). Generation is bit-reproducible under a fixed seed; per-sequence
RNG streams are derived as ``SeedSequence(seed, spawn_key=(1, i))`` so
parallel generation matches serial output exactly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import FORMAT_VERSION, kernels
from .errors import DivergentOrbit, FormatError, InvalidSplit

#: orbits whose |x| exceeds this are rejected and resampled
ORBIT_BOUND = 10.0
#: fresh initial conditions tried per sequence before giving up
MAX_ORBIT_RETRIES = 100


@dataclass(frozen=True)
class HenonParams:
    """Generator knobs; the defaults reproduce the reference benchmark
    (a=1.4, b=0.3, T=300, N=1000, dx=dy=120, sigma=0.05)."""

    a: float = 1.4
    b: float = 0.3
    t_len: int = 300
    n_seq: int = 1000
    dx: int = 120
    dy: int = 120
    noise_std: float = 0.05
    init_x_range: tuple[float, float] = (-1.0, 1.0)
    init_y_range: tuple[float, float] = (-0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.t_len < 2:
            raise ValueError("t_len must be >= 2")
        if self.n_seq < 1 or self.dx < 1 or self.dy < 1:
            raise ValueError("n_seq, dx, dy must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for lo, hi in (self.init_x_range, self.init_y_range):
            if not (lo < hi):
                raise ValueError("init ranges must be nonempty intervals")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class SequencePairDataset:
    """N paired sequences with optional ground-truth latents and labels."""

    x1: np.ndarray                       # (N, T, dx) float32
    x2: np.ndarray                       # (N, T, dy) float32
    z_true: Optional[np.ndarray] = None  # (N, T, dz) float32
    labels: Optional[np.ndarray] = None  # (N,) int32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_seq(self) -> int:
        return self.x1.shape[0]

    @property
    def t_len(self) -> int:
        return self.x1.shape[1]

    def validate(self) -> None:
        if self.x1.ndim != 3 or self.x2.ndim != 3:
            raise FormatError("x1/x2 must be (N, T, d) tensors")
        if self.x1.shape[:2] != self.x2.shape[:2]:
            raise FormatError(f"x1/x2 disagree on N,T: {self.x1.shape} vs {self.x2.shape}")
        for name, arr in (("x1", self.x1), ("x2", self.x2), ("z_true", self.z_true)):
            if arr is not None and not np.isfinite(arr).all():
                raise FormatError(f"tensor {name} contains non-finite values")
        if self.z_true is not None:
            if self.z_true.shape[:2] != self.x1.shape[:2] or self.z_true.shape[2] < 1:
                raise FormatError("z_true shape inconsistent with observations")
        if self.labels is not None:
            if self.labels.shape != (self.n_seq,):
                raise FormatError("labels must be one int per sequence")
            uniq = np.unique(self.labels)
            if uniq.min() < 0 or len(uniq) < 2:
                raise FormatError("labels must cover >= 2 groups in {0..K-1}")


def henon_step(state: tuple[float, float], a: float, b: float) -> tuple[float, float]:
    """One map iteration: (x, y) -> (1 - a x^2 + y, b x). Pure."""
    x, y = state
    return 1.0 - a * x * x + y, b * x


def _one_sequence(i: int, params: HenonParams, w_x: np.ndarray, w_y: np.ndarray,
                  seed: int):
    """Generate sequence ``i``; its RNG stream depends only on (seed, i)."""
    K = kernels.active()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, i)))
    orbit = None
    for _ in range(MAX_ORBIT_RETRIES):
        x0 = rng.uniform(*params.init_x_range)
        y0 = rng.uniform(*params.init_y_range)
        cand, ok = K.henon_orbit(x0, y0, params.a, params.b, params.t_len, ORBIT_BOUND)
        if ok:
            orbit = cand
            break
    if orbit is None:
        raise DivergentOrbit(
            f"sequence {i}: no initial condition stayed within |x|<={ORBIT_BOUND} "
            f"after {MAX_ORBIT_RETRIES} retries")
    x1 = orbit @ w_x.T + params.noise_std * rng.standard_normal((params.t_len, params.dx))
    x2 = orbit @ w_y.T + params.noise_std * rng.standard_normal((params.t_len, params.dy))
    return (x1.astype(np.float32), x2.astype(np.float32), orbit.astype(np.float32))


def _projections(params: HenonParams, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    w_x = rng.standard_normal((params.dx, 2))
    w_y = rng.standard_normal((params.dy, 2))
    return w_x, w_y


def _gen_sequences(n, params_for, w_x, w_y, seed, threads):
    jobs = [(i, params_for(i)) for i in range(n)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda job: _one_sequence(job[0], job[1], w_x, w_y, seed), jobs))
    else:
        results = [_one_sequence(i, p, w_x, w_y, seed) for i, p in jobs]
    x1 = np.stack([r[0] for r in results])
    x2 = np.stack([r[1] for r in results])
    z = np.stack([r[2] for r in results])
    return x1, x2, z


def generate_henon(params: HenonParams, threads: int = 1) -> SequencePairDataset:
    """Latent chaotic orbit, projected through fixed random linear maps
    with additive isotropic Gaussian noise. Deterministic given the seed."""
    w_x, w_y = _projections(params, params.seed)
    x1, x2, z = _gen_sequences(params.n_seq, lambda i: params, w_x, w_y,
                               params.seed, threads)
    meta = {
        "format_version": FORMAT_VERSION,
        "generator": "henon",
        "params": _params_dict(params),
        "seed": params.seed,
        "n_seq": params.n_seq, "t_len": params.t_len,
        "dx": params.dx, "dy": params.dy, "dz": 2,
        "has_labels": False,
        "w_x": w_x.tolist(), "w_y": w_y.tolist(),
    }
    return SequencePairDataset(x1, x2, z_true=z, meta=meta)


def generate_grouped(params_a: HenonParams, params_b: HenonParams,
                     n_per_group: int, seed: int,
                     threads: int = 1) -> SequencePairDataset:
    """Two dynamical regimes sharing T, dims and projection matrices;
    labels mark the regime. Stand-in for group-separation benchmarks."""
    if (params_a.t_len, params_a.dx, params_a.dy) != \
            (params_b.t_len, params_b.dx, params_b.dy):
        raise ValueError("grouped regimes must share t_len, dx, dy")
    if n_per_group < 1:
        raise ValueError("n_per_group must be positive")
    w_x, w_y = _projections(params_a, seed)
    n = 2 * n_per_group
    x1, x2, z = _gen_sequences(
        n, lambda i: params_a if i < n_per_group else params_b,
        w_x, w_y, seed, threads)
    labels = np.repeat(np.array([0, 1], dtype=np.int32), n_per_group)
    meta = {
        "format_version": FORMAT_VERSION,
        "generator": "grouped",
        "params_a": _params_dict(params_a),
        "params_b": _params_dict(params_b),
        "n_per_group": n_per_group,
        "seed": seed,
        "n_seq": n, "t_len": params_a.t_len,
        "dx": params_a.dx, "dy": params_a.dy, "dz": 2,
        "has_labels": True,
        "w_x": w_x.tolist(), "w_y": w_y.tolist(),
    }
    return SequencePairDataset(x1, x2, z_true=z, labels=labels, meta=meta)


def _params_dict(params: HenonParams) -> dict:
    d = asdict(params)
    d["init_x_range"] = list(d["init_x_range"])
    d["init_y_range"] = list(d["init_y_range"])
    return d


def split(ds: SequencePairDataset, spec: SplitSpec):
    """Disjoint partition by sequence index, shuffled deterministically."""
    n = ds.n_seq
    n_train = math.floor(spec.train_fraction * n)
    if n_train < 1 or n_train >= n:
        raise InvalidSplit(f"fraction {spec.train_fraction} on {n} sequences "
                           f"leaves an empty side")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(2,)))
    perm = rng.permutation(n)
    idx_train, idx_test = perm[:n_train], perm[n_train:]

    def take(idx, role):
        meta = {
            "format_version": FORMAT_VERSION,
            "generator": "split",
            "role": role,
            "split": {"train_fraction": spec.train_fraction, "seed": spec.seed,
                      "indices": idx.tolist()},
            "parent": ds.meta,
            "n_seq": int(len(idx)), "t_len": ds.t_len,
            "dx": ds.x1.shape[2], "dy": ds.x2.shape[2],
            "dz": None if ds.z_true is None else int(ds.z_true.shape[2]),
            "has_labels": ds.labels is not None,
        }
        return SequencePairDataset(
            ds.x1[idx].copy(), ds.x2[idx].copy(),
            z_true=None if ds.z_true is None else ds.z_true[idx].copy(),
            labels=None if ds.labels is None else ds.labels[idx].copy(),
            meta=meta)

    return take(idx_train, "train"), take(idx_test, "test")


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_TENSORS = (("x1", "x1.bin"), ("x2", "x2.bin"), ("z_true", "z.bin"))


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_dataset(ds: SequencePairDataset, dir_path) -> None:
    """Round trip is exact at the stored float32 precision; identical
    datasets produce identical bytes."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(ds.meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    meta["n_seq"], meta["t_len"] = ds.n_seq, ds.t_len
    meta["dx"], meta["dy"] = int(ds.x1.shape[2]), int(ds.x2.shape[2])
    meta["dz"] = None if ds.z_true is None else int(ds.z_true.shape[2])
    meta["has_labels"] = ds.labels is not None
    (out / "meta.json").write_text(_dump_json(meta), encoding="utf-8")
    for attr, fname in _TENSORS:
        arr = getattr(ds, attr)
        if arr is not None:
            (out / fname).write_bytes(
                np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if ds.labels is not None:
        (out / "labels.bin").write_bytes(
            np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def _read_tensor(path: Path, shape, dtype, name: str) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing tensor file for {name}: {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError(f"tensor {name}: file {path.name} holds {len(raw)} bytes, "
                          f"expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_dataset(dir_path) -> SequencePairDataset:
    src = Path(dir_path)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"missing meta.json in {src}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable meta.json: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format_version "
                          f"{meta.get('format_version')!r}")
    try:
        n, t = int(meta["n_seq"]), int(meta["t_len"])
        dx, dy = int(meta["dx"]), int(meta["dy"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"meta.json misses required shape fields: {exc}") from exc
    x1 = _read_tensor(src / "x1.bin", (n, t, dx), "<f4", "x1")
    x2 = _read_tensor(src / "x2.bin", (n, t, dy), "<f4", "x2")
    z = None
    if meta.get("dz"):
        z = _read_tensor(src / "z.bin", (n, t, int(meta["dz"])), "<f4", "z_true")
    labels = None
    if meta.get("has_labels"):
        labels = _read_tensor(src / "labels.bin", (n,), "<i4", "labels")
    return SequencePairDataset(x1, x2, z_true=z, labels=labels, meta=meta)
