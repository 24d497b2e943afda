"""Model assembly, two-step training, latent extraction, prediction and
checkpoint persistence.

Three trainable systems share the building blocks in :mod:`nets`:

* ``infodpcca`` -- step I trains two causal GRU encoders, a joint
  shared-state head plus per-stream marginal heads, and one emitter per
  stream, under the information-theoretic objective. Step II freezes the
  step-I parameters and fits private encoders, a joint posterior and the
  full emitters (optionally gated residual reuses of the frozen step-I
  emitters) by maximizing the ELBO.
* ``dvib`` -- single-stream bottleneck baseline on the concatenated pair.
* ``dpcca`` -- single-stage state-space baseline with latent transitions
  and a backward-RNN smoothing posterior.

Training is single-threaded and bit-reproducible under a fixed seed
(given a fixed kernel backend).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import FORMAT_VERSION, autodiff as ad
from .data import SequencePairDataset
from .errors import (FormatError, InvalidSpec, NonFiniteLoss, ShapeMismatch,
                     StageMismatch)
from .nets import (DiagGaussian, emitter_forward, gated_residual_emit,
                   gaussian_head, gru_sequence, init_emitter, init_gate,
                   init_gaussian_head, init_gru)
from .objectives import (IbWeights, LossBreakdown, cmi_diagnostic, dpcca_elbo,
                         dvib_loss, step1_loss, step2_elbo)
from .params import ParameterStore

KINDS = ("dvib", "dpcca", "infodpcca")

#: parameter prefixes learned in step I of the two-step model
STEP1_PREFIXES = ("rnn1", "rnn2", "q0_12", "q0_1", "q0_2", "p10", "p20")

_STAGE_TAGS = {"step1": 1, "step2": 2, "dvib": 3, "dpcca": 4}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    dx: int
    dy: int
    dz0: int = 2
    dz1: int = 2
    dz2: int = 2
    rnn_hidden: int = 64
    mlp_hidden: tuple[int, ...] = (64, 64)
    residual_connection: bool = False
    reuse_rnn: bool = True
    reuse_sigma1: bool = False
    emitter_activation: str = "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}")
        dims = (self.dx, self.dy, self.dz0, self.dz1, self.dz2, self.rnn_hidden)
        if any(d < 1 for d in dims):
            raise InvalidSpec(f"all dims must be positive, got {dims}")
        if any(w < 1 for w in self.mlp_hidden):
            raise InvalidSpec(f"mlp_hidden must be positive, got {self.mlp_hidden}")
        if self.emitter_activation not in ("identity", "sigmoid"):
            raise InvalidSpec("emitter_activation must be 'identity' or 'sigmoid'")
        if self.residual_connection and len(self.mlp_hidden) < 1:
            raise InvalidSpec("residual_connection needs at least one hidden layer")

    @property
    def dz_total(self) -> int:
        return self.dz0 + self.dz1 + self.dz2


@dataclass(frozen=True)
class TrainConfig:
    weights: IbWeights = field(default_factory=IbWeights)
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 32
    grad_clip_norm: float = 10.0
    seed: int = 0
    patience: int = 20
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, max_epochs, batch_size must be positive")
        if self.grad_clip_norm <= 0 or self.patience < 1:
            raise ValueError("grad_clip_norm and patience must be positive")


@dataclass
class Checkpoint:
    spec: ModelSpec
    store: ParameterStore
    config: TrainConfig
    history: list
    stage: str                      # "step1" | "step2"
    rng_state: Optional[dict] = None


@dataclass
class LatentExtraction:
    """Per-sequence latent trajectories (means and stds), one step per
    prediction target, tagged by the stage that produced them."""

    stage: str                      # "step1_prior" | "step2_posterior"
    z0_mean: np.ndarray             # (N, T-1, dz0)
    z0_std: np.ndarray
    z1_mean: Optional[np.ndarray] = None
    z1_std: Optional[np.ndarray] = None
    z2_mean: Optional[np.ndarray] = None
    z2_std: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in (self.z0_std, self.z1_std, self.z2_std):
            if s is not None and not np.all(s > 0):
                raise ValueError("latent stds must be positive")


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def build(spec: ModelSpec, seed: int) -> ParameterStore:
    """Instantiate all parameters for ``spec``; deterministic under seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    store = ParameterStore()
    H = spec.rnn_hidden
    if spec.kind == "infodpcca":
        init_gru(store, "rnn1", spec.dx, H, rng)
        init_gru(store, "rnn2", spec.dy, H, rng)
        init_gaussian_head(store, "q0_12", 2 * H, spec.dz0, rng)
        init_gaussian_head(store, "q0_1", H, spec.dz0, rng)
        init_gaussian_head(store, "q0_2", H, spec.dz0, rng)
        init_emitter(store, "p10", spec.dz0, spec.mlp_hidden, spec.dx, rng)
        init_emitter(store, "p20", spec.dz0, spec.mlp_hidden, spec.dy, rng)
        # step-II components
        if not spec.reuse_rnn:
            init_gru(store, "rnn1_s2", spec.dx, H, rng)
            init_gru(store, "rnn2_s2", spec.dy, H, rng)
        init_gaussian_head(store, "prior1", H, spec.dz1, rng)
        init_gaussian_head(store, "prior2", H, spec.dz2, rng)
        init_gaussian_head(store, "q_post", 2 * H, spec.dz_total, rng)
        for prefix, d_in, d_out in (("emit1", spec.dz0 + spec.dz1, spec.dx),
                                    ("emit2", spec.dz0 + spec.dz2, spec.dy)):
            if spec.residual_connection:
                # the frozen step-I emitter supplies one branch, so the
                # fresh trunk is one hidden layer shallower than scratch
                init_emitter(store, prefix, d_in, spec.mlp_hidden[:-1], d_out, rng)
                init_gate(store, prefix, d_in, spec.mlp_hidden[0], d_out, rng)
            else:
                init_emitter(store, prefix, d_in, spec.mlp_hidden, d_out, rng)
    elif spec.kind == "dvib":
        d = spec.dx + spec.dy
        init_gru(store, "rnn", d, H, rng)
        init_gaussian_head(store, "q_z", H, spec.dz0, rng)
        init_emitter(store, "emit", spec.dz0, spec.mlp_hidden, d, rng)
    elif spec.kind == "dpcca":
        width = spec.mlp_hidden[0] if spec.mlp_hidden else 16
        for i, dz in enumerate((spec.dz0, spec.dz1, spec.dz2)):
            init_emitter(store, f"trans{i}", dz, (width,), dz, rng)
        init_emitter(store, "emit1", spec.dz0 + spec.dz1, spec.mlp_hidden, spec.dx, rng)
        init_emitter(store, "emit2", spec.dz0 + spec.dz2, spec.mlp_hidden, spec.dy, rng)
        init_gru(store, "post_rnn", spec.dx + spec.dy, H, rng)
        init_gaussian_head(store, "q_post", H + spec.dz_total, spec.dz_total, rng)
    return store


def _split_gauss(g: DiagGaussian, dims):
    parts, lo = [], 0
    for d in dims:
        parts.append(DiagGaussian(ad.slice_cols(g.mean, lo, lo + d),
                                  ad.slice_cols(g.std, lo, lo + d)))
        lo += d
    return parts


def _std_normal_batch(batch: int, dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros((batch, dim)), np.ones((batch, dim)))


# ---------------------------------------------------------------------------
# objective assembly per kind (x1, x2 are (T, B, d) float64 arrays)
# ---------------------------------------------------------------------------


def _step1_breakdown(pv, spec, x1, x2, weights, rng) -> LossBreakdown:
    T, B = x1.shape[0], x1.shape[1]
    h1s = gru_sequence(pv, x1, "rnn1")
    h2s = gru_sequence(pv, x2, "rnn2")
    noise = rng.standard_normal((T - 1, B, spec.dz0))
    q012, q01, q02, p10, p20 = [], [], [], [], []
    for s in range(T - 1):
        joint = gaussian_head(pv, ad.concat_cols([h1s[s], h2s[s]]), "q0_12")
        q012.append(joint)
        q01.append(gaussian_head(pv, h1s[s], "q0_1"))
        q02.append(gaussian_head(pv, h2s[s], "q0_2"))
        z = ad.add(joint.mean, ad.mul(joint.std, noise[s]))
        p10.append(emitter_forward(pv, "p10", z, spec.emitter_activation))
        p20.append(emitter_forward(pv, "p20", z, spec.emitter_activation))
    return step1_loss(q012, q01, q02, p10, p20, x1[1:], x2[1:], weights)


def _step2_breakdown(pv, spec, x1, x2, weights, rng) -> LossBreakdown:
    T, B = x1.shape[0], x1.shape[1]
    h1s = gru_sequence(pv, x1, "rnn1")
    h2s = gru_sequence(pv, x2, "rnn2")
    if spec.reuse_rnn:
        e1s, e2s = h1s, h2s
    else:
        e1s = gru_sequence(pv, x1, "rnn1_s2")
        e2s = gru_sequence(pv, x2, "rnn2_s2")
    dims = (spec.dz0, spec.dz1, spec.dz2)
    noise = rng.standard_normal((T - 1, B, spec.dz_total))
    q0, q1, q2 = [], [], []
    pr0, pr1, pr2 = [], [], []
    rec1, rec2 = [], []
    for s in range(T - 1):
        post = gaussian_head(pv, ad.concat_cols([e1s[s + 1], e2s[s + 1]]), "q_post")
        bq0, bq1, bq2 = _split_gauss(post, dims)
        q0.append(bq0)
        q1.append(bq1)
        q2.append(bq2)
        pr0.append(gaussian_head(pv, ad.concat_cols([h1s[s], h2s[s]]), "q0_12"))
        pr1.append(gaussian_head(pv, e1s[s], "prior1"))
        pr2.append(gaussian_head(pv, e2s[s], "prior2"))
        z = ad.add(post.mean, ad.mul(post.std, noise[s]))
        z0 = ad.slice_cols(z, 0, dims[0])
        z1 = ad.slice_cols(z, dims[0], dims[0] + dims[1])
        z2 = ad.slice_cols(z, dims[0] + dims[1], spec.dz_total)
        if spec.residual_connection:
            rec1.append(gated_residual_emit(pv, "p10", "emit1", z0, z1,
                                            spec.emitter_activation,
                                            spec.reuse_sigma1))
            rec2.append(gated_residual_emit(pv, "p20", "emit2", z0, z2,
                                            spec.emitter_activation,
                                            spec.reuse_sigma1))
        else:
            rec1.append(emitter_forward(pv, "emit1", ad.concat_cols([z0, z1]),
                                        spec.emitter_activation))
            rec2.append(emitter_forward(pv, "emit2", ad.concat_cols([z0, z2]),
                                        spec.emitter_activation))
    return step2_elbo((q0, q1, q2), (pr0, pr1, pr2), rec1, rec2, x1[1:], x2[1:])


def _dvib_breakdown(pv, spec, x1, x2, weights, rng) -> LossBreakdown:
    xcat = np.concatenate([x1, x2], axis=2)
    T, B = xcat.shape[0], xcat.shape[1]
    hs = gru_sequence(pv, xcat, "rnn")
    noise = rng.standard_normal((T - 1, B, spec.dz0))
    q, recon = [], []
    for s in range(T - 1):
        g = gaussian_head(pv, hs[s], "q_z")
        q.append(g)
        z = ad.add(g.mean, ad.mul(g.std, noise[s]))
        recon.append(emitter_forward(pv, "emit", z, spec.emitter_activation))
    return dvib_loss(q, recon, xcat[1:], weights)


def _dpcca_breakdown(pv, spec, x1, x2, weights, rng) -> LossBreakdown:
    xcat = np.concatenate([x1, x2], axis=2)
    T, B = xcat.shape[0], xcat.shape[1]
    # backward recurrence: state at t summarizes x[t:]
    back = gru_sequence(pv, np.ascontiguousarray(xcat[::-1]), "post_rnn")
    dims = (spec.dz0, spec.dz1, spec.dz2)
    noise = rng.standard_normal((T, B, spec.dz_total))
    q = ([], [], [])
    pr = ([], [], [])
    rec1, rec2 = [], []
    z_prev = ad.lift(np.zeros((B, spec.dz_total)))
    for t in range(T):
        post = gaussian_head(pv, ad.concat_cols([back[T - 1 - t], z_prev]), "q_post")
        for acc, block in zip(q, _split_gauss(post, dims)):
            acc.append(block)
        if t == 0:
            for i, d in enumerate(dims):
                pr[i].append(_std_normal_batch(B, d))
        else:
            lo = 0
            for i, d in enumerate(dims):
                zp = ad.slice_cols(z_prev, lo, lo + d)
                pr[i].append(emitter_forward(pv, f"trans{i}", zp, "identity"))
                lo += d
        z = ad.add(post.mean, ad.mul(post.std, noise[t]))
        z0 = ad.slice_cols(z, 0, dims[0])
        z1 = ad.slice_cols(z, dims[0], dims[0] + dims[1])
        z2 = ad.slice_cols(z, dims[0] + dims[1], spec.dz_total)
        rec1.append(emitter_forward(pv, "emit1", ad.concat_cols([z0, z1]),
                                    spec.emitter_activation))
        rec2.append(emitter_forward(pv, "emit2", ad.concat_cols([z0, z2]),
                                    spec.emitter_activation))
        z_prev = z
    return dpcca_elbo(q, pr, rec1, rec2, x1, x2)


_BUILDERS = {
    "step1": (_step1_breakdown, False),   # (builder, maximize)
    "step2": (_step2_breakdown, True),
    "dvib": (_dvib_breakdown, False),
    "dpcca": (_dpcca_breakdown, True),
}


# ---------------------------------------------------------------------------
# optimizer + training loop
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment SGD with bias correction."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, store: ParameterStore, grads: dict) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            store[name] = store[name] - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _as_time_major(ds: SequencePairDataset):
    x1 = np.ascontiguousarray(ds.x1.transpose(1, 0, 2), dtype=np.float64)
    x2 = np.ascontiguousarray(ds.x2.transpose(1, 0, 2), dtype=np.float64)
    return x1, x2


def _train(store: ParameterStore, spec: ModelSpec, ds: SequencePairDataset,
           config: TrainConfig, objective: str, history: list) -> dict:
    """Run one training stage in place; returns the trainer's final RNG state."""
    if ds.x1.shape[2] != spec.dx or ds.x2.shape[2] != spec.dy:
        raise InvalidSpec(f"dataset dims ({ds.x1.shape[2]}, {ds.x2.shape[2]}) do not "
                          f"match spec ({spec.dx}, {spec.dy})")
    builder, maximize = _BUILDERS[objective]
    x1_all, x2_all = _as_time_major(ds)
    n = ds.n_seq
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(10 + _STAGE_TAGS[objective],)))
    opt = Adam(config.learning_rate)
    best = None
    stall = 0
    last_good = store.copy()
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        sums: dict = {}
        total_sum = 0.0
        seen = 0
        try:
            for lo in range(0, n, config.batch_size):
                idx = perm[lo:lo + config.batch_size]
                xb1 = x1_all[:, idx]
                xb2 = x2_all[:, idx]
                pv = store.as_vars()
                bd = builder(pv, spec, xb1, xb2, config.weights, rng)
                obj = ad.scale(bd.total, -1.0) if maximize else bd.total
                obj.backward()
                grads = {name: v.grad for name, v in pv.items()
                         if v.requires_grad and v.grad is not None}
                _clip_global_norm(grads, config.grad_clip_norm)
                opt.step(store, grads)
                det = bd.detach()
                w = len(idx)
                seen += w
                total_sum += det.total * w
                for k, val in det.terms.items():
                    sums[k] = sums.get(k, 0.0) + val * w
        except NonFiniteLoss as exc:
            store_restore(store, last_good)
            history.append({"stage": objective, "epoch": epoch,
                            "event": "non_finite_abort", "detail": str(exc)})
            break
        entry = {"stage": objective, "epoch": epoch,
                 "total": total_sum / seen,
                 "alpha": config.weights.alpha, "beta": config.weights.beta}
        for k, val in sums.items():
            entry[k] = val / seen
        if objective == "step1":
            entry["cmi"] = cmi_diagnostic(
                entry["shared_logq"] + entry["prior_cross_entropy"],
                entry["recon1"] + entry["recon2"])
        elif objective == "dvib":
            entry["cmi"] = cmi_diagnostic(
                entry["compression"] + entry["prior_cross_entropy"],
                entry["reconstruction"])
        history.append(entry)
        last_good = store.copy()

        score = -entry["total"] if maximize else entry["total"]
        if best is None or best - score > \
                config.min_rel_improvement * max(1.0, abs(best)):
            best = score
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    return rng.bit_generator.state


def store_restore(store: ParameterStore, snapshot: ParameterStore) -> None:
    for name in store.names():
        store[name] = snapshot[name].copy()


def train_step1(spec: ModelSpec, store: ParameterStore, ds: SequencePairDataset,
                config: TrainConfig) -> Checkpoint:
    """Step I: fit the shared-state encoder stack by the info objective."""
    if spec.kind != "infodpcca":
        raise InvalidSpec("train_step1 applies to the two-step model only")
    frozen = [p for p in STEP1_PREFIXES if any(
        store.is_frozen(n) for n in store.names() if n.startswith(p))]
    if frozen:
        raise InvalidSpec(f"step-I parameters are frozen: {frozen}")
    history: list = []
    state = _train(store, spec, ds, config, "step1", history)
    return Checkpoint(spec, store, config, history, stage="step1", rng_state=state)


def train_step2(ckpt: Checkpoint, ds: SequencePairDataset,
                config: Optional[TrainConfig] = None,
                freeze_step1: bool = True) -> Checkpoint:
    """Step II: fit the full generative model by ELBO.

    With ``freeze_step1`` (the default, and the published procedure) every
    step-I parameter is frozen bitwise. ``freeze_step1=False`` is the
    step-II-only ablation: step-I-shaped components train jointly from
    their random initialization.
    """
    if ckpt.spec.kind != "infodpcca":
        raise InvalidSpec("train_step2 applies to the two-step model only")
    if ckpt.stage != "step1":
        raise StageMismatch(f"step-II training needs a step1 checkpoint, "
                            f"got stage {ckpt.stage!r}")
    if not freeze_step1 and ckpt.spec.residual_connection:
        raise InvalidSpec("residual_connection requires trained, frozen step-I "
                          "emitters; not available in the step-II-only ablation")
    config = config or ckpt.config
    store = ckpt.store.copy()
    if freeze_step1:
        for prefix in STEP1_PREFIXES:
            store.freeze(prefix)
    history = list(ckpt.history)
    state = _train(store, ckpt.spec, ds, config, "step2", history)
    return Checkpoint(ckpt.spec, store, config, history, stage="step2",
                      rng_state=state)


def train_full(spec: ModelSpec, ds: SequencePairDataset,
               config: TrainConfig) -> Checkpoint:
    """Build and train end to end (both steps for the two-step model)."""
    store = build(spec, config.seed)
    if spec.kind == "infodpcca":
        ckpt = train_step1(spec, store, ds, config)
        return train_step2(ckpt, ds, config)
    history: list = []
    state = _train(store, spec, ds, config, spec.kind, history)
    return Checkpoint(spec, store, config, history, stage="step2", rng_state=state)


# ---------------------------------------------------------------------------
# extraction & prediction
# ---------------------------------------------------------------------------

_EXTRACT_BATCH = 64


def _check_extract_stage(ckpt: Checkpoint, stage: str) -> None:
    kind = ckpt.spec.kind
    if stage not in ("step1", "step2"):
        raise StageMismatch(f"unknown extraction stage {stage!r}")
    if kind == "dvib" and stage != "step1":
        raise StageMismatch("the bottleneck baseline only has a causal (step1) encoder")
    if kind == "dpcca" and stage != "step2":
        raise StageMismatch("the state-space baseline only has a smoothing "
                            "(step2) posterior")
    if kind == "infodpcca" and stage == "step2" and ckpt.stage != "step2":
        raise StageMismatch("posterior extraction needs a stage=step2 checkpoint")


def extract_latents(ckpt: Checkpoint, ds: SequencePairDataset,
                    stage: str) -> LatentExtraction:
    """Deterministic per-sequence latent trajectories (head means/stds).

    ``step1`` reads the causal shared-state encoder (depends on x_{1:t}
    only); ``step2`` reads the smoothing posterior (x_{1:t+1}).
    """
    _check_extract_stage(ckpt, stage)
    spec = ckpt.spec
    pv = ckpt.store.as_vars()
    outs: list = []
    for lo in range(0, ds.n_seq, _EXTRACT_BATCH):
        x1 = np.ascontiguousarray(
            ds.x1[lo:lo + _EXTRACT_BATCH].transpose(1, 0, 2), dtype=np.float64)
        x2 = np.ascontiguousarray(
            ds.x2[lo:lo + _EXTRACT_BATCH].transpose(1, 0, 2), dtype=np.float64)
        outs.append(_extract_batch(pv, spec, x1, x2, stage))
    merged = {k: np.concatenate([o[k] for o in outs], axis=0)
              for k in outs[0]}
    tag = "step1_prior" if stage == "step1" else "step2_posterior"
    meta = {"format_version": FORMAT_VERSION, "kind": "latents", "stage": tag,
            "model_kind": spec.kind, "n_seq": ds.n_seq, "t_steps": ds.t_len - 1,
            "dz0": spec.dz0,
            "dz1": spec.dz1 if stage == "step2" else None,
            "dz2": spec.dz2 if stage == "step2" else None}
    return LatentExtraction(stage=tag, meta=meta, **merged)


def _extract_batch(pv, spec, x1, x2, stage):
    T = x1.shape[0]

    def tonp(gaussians):
        mean = np.stack([g.mean.value for g in gaussians], axis=1)
        std = np.stack([g.std.value for g in gaussians], axis=1)
        return mean, std

    if spec.kind == "dvib":
        hs = gru_sequence(pv, np.concatenate([x1, x2], axis=2), "rnn")
        q = [gaussian_head(pv, hs[s], "q_z") for s in range(T - 1)]
        m, s = tonp(q)
        return {"z0_mean": m, "z0_std": s}

    if spec.kind == "dpcca":
        m, s = _dpcca_posterior_means(pv, spec, x1, x2)
        out = {}
        lo = 0
        for i, d in enumerate((spec.dz0, spec.dz1, spec.dz2)):
            out[f"z{i}_mean"] = m[:, :T - 1, lo:lo + d]
            out[f"z{i}_std"] = s[:, :T - 1, lo:lo + d]
            lo += d
        return out

    h1s = gru_sequence(pv, x1, "rnn1")
    h2s = gru_sequence(pv, x2, "rnn2")
    if stage == "step1":
        q = [gaussian_head(pv, ad.concat_cols([h1s[s], h2s[s]]), "q0_12")
             for s in range(T - 1)]
        m, s = tonp(q)
        return {"z0_mean": m, "z0_std": s}

    if spec.reuse_rnn:
        e1s, e2s = h1s, h2s
    else:
        e1s = gru_sequence(pv, x1, "rnn1_s2")
        e2s = gru_sequence(pv, x2, "rnn2_s2")
    post = [gaussian_head(pv, ad.concat_cols([e1s[s + 1], e2s[s + 1]]), "q_post")
            for s in range(T - 1)]
    m, s = tonp(post)
    out = {}
    lo = 0
    for i, d in enumerate((spec.dz0, spec.dz1, spec.dz2)):
        out[f"z{i}_mean"] = m[..., lo:lo + d]
        out[f"z{i}_std"] = s[..., lo:lo + d]
        lo += d
    return out


def _dpcca_posterior_means(pv, spec, x1, x2):
    """Smoothing posterior means/stds over full sequences; the previous-z
    conditioning uses the running posterior mean (deterministic)."""
    xcat = np.concatenate([x1, x2], axis=2)
    T, B = xcat.shape[0], xcat.shape[1]
    back = gru_sequence(pv, np.ascontiguousarray(xcat[::-1]), "post_rnn")
    z_prev = ad.lift(np.zeros((B, spec.dz_total)))
    means, stds = [], []
    for t in range(T):
        post = gaussian_head(pv, ad.concat_cols([back[T - 1 - t], z_prev]), "q_post")
        means.append(post.mean.value)
        stds.append(post.std.value)
        z_prev = post.mean
    return np.stack(means, axis=1), np.stack(stds, axis=1)


def _pred_stage(ckpt: Checkpoint, stage: Optional[str]) -> str:
    """Which predictive path to use for the two-step model.

    The shared-state path ("step1": joint encoder + step-I emitters) is
    available from any checkpoint; the generative path ("step2": private
    priors + full emitters) needs a stage=step2 checkpoint.
    """
    if ckpt.spec.kind != "infodpcca":
        return ckpt.stage
    if stage is None:
        return ckpt.stage
    if stage not in ("step1", "step2"):
        raise StageMismatch(f"unknown prediction stage {stage!r}")
    if stage == "step2" and ckpt.stage != "step2":
        raise StageMismatch("generative prediction needs a stage=step2 checkpoint")
    return stage


def predict_sequence(ckpt: Checkpoint, x1: np.ndarray, x2: np.ndarray,
                     mode: str = "deterministic", seed: int = 0,
                     stage: Optional[str] = None):
    """One-step-ahead predictive Gaussians along one sequence pair.

    Returns four arrays of shape (T-1, d): means and stds per stream;
    entry s predicts observation s+1 from the prefix through s.
    """
    preds = _predictive_gaussians(ckpt, x1, x2, mode, seed,
                                  _pred_stage(ckpt, stage))
    m1 = np.stack([p[0].mean for p in preds[:-1]])
    s1 = np.stack([p[0].std for p in preds[:-1]])
    m2 = np.stack([p[1].mean for p in preds[:-1]])
    s2 = np.stack([p[1].std for p in preds[:-1]])
    return m1, s1, m2, s2


def predict_next(ckpt: Checkpoint, prefix_x1: np.ndarray, prefix_x2: np.ndarray,
                 mode: str = "deterministic", seed: int = 0,
                 stage: Optional[str] = None):
    """Predictive Gaussians for the observations following the prefix."""
    if len(prefix_x1) < 1 or len(prefix_x1) != len(prefix_x2):
        raise ShapeMismatch("prefixes must be nonempty and equally long")
    preds = _predictive_gaussians(ckpt, prefix_x1, prefix_x2, mode, seed,
                                  _pred_stage(ckpt, stage))
    return preds[-1]


def _predictive_gaussians(ckpt, x1, x2, mode, seed, stage):
    """Per-prefix-length predictions; element s predicts step s+1."""
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    spec = ckpt.spec
    pv = ckpt.store.as_vars()
    x1 = np.ascontiguousarray(np.asarray(x1, dtype=np.float64)[:, None, :])
    x2 = np.ascontiguousarray(np.asarray(x2, dtype=np.float64)[:, None, :])
    T = x1.shape[0]

    def draw(g):
        if mode == "deterministic":
            return g.mean
        noise = rng.standard_normal(g.mean.value.shape)
        return ad.add(g.mean, ad.mul(g.std, noise))

    def out(g):
        return DiagGaussian(g.mean.value[0].copy(), g.std.value[0].copy())

    preds = []
    if spec.kind == "dvib":
        hs = gru_sequence(pv, np.concatenate([x1, x2], axis=2), "rnn")
        for s in range(T):
            z = draw(gaussian_head(pv, hs[s], "q_z"))
            g = emitter_forward(pv, "emit", z, spec.emitter_activation)
            gm, gs = g.mean.value[0], g.std.value[0]
            preds.append((DiagGaussian(gm[:spec.dx].copy(), gs[:spec.dx].copy()),
                          DiagGaussian(gm[spec.dx:].copy(), gs[spec.dx:].copy())))
        return preds

    if spec.kind == "dpcca":
        dims = (spec.dz0, spec.dz1, spec.dz2)
        for s in range(T):
            m, sd = _dpcca_posterior_means(pv, spec, x1[:s + 1], x2[:s + 1])
            z_last = m[0, s]
            if mode == "stochastic":
                z_last = z_last + sd[0, s] * rng.standard_normal(spec.dz_total)
            z_next, lo = [], 0
            for i, d in enumerate(dims):
                g = emitter_forward(pv, f"trans{i}",
                                    z_last[None, lo:lo + d], "identity")
                z_next.append(draw(g))
                lo += d
            g1 = emitter_forward(pv, "emit1", ad.concat_cols([z_next[0], z_next[1]]),
                                 spec.emitter_activation)
            g2 = emitter_forward(pv, "emit2", ad.concat_cols([z_next[0], z_next[2]]),
                                 spec.emitter_activation)
            preds.append((out(g1), out(g2)))
        return preds

    h1s = gru_sequence(pv, x1, "rnn1")
    h2s = gru_sequence(pv, x2, "rnn2")
    generative = stage == "step2"
    if generative:
        if spec.reuse_rnn:
            e1s, e2s = h1s, h2s
        else:
            e1s = gru_sequence(pv, x1, "rnn1_s2")
            e2s = gru_sequence(pv, x2, "rnn2_s2")
    for s in range(T):
        z0 = draw(gaussian_head(pv, ad.concat_cols([h1s[s], h2s[s]]), "q0_12"))
        if not generative:
            g1 = emitter_forward(pv, "p10", z0, spec.emitter_activation)
            g2 = emitter_forward(pv, "p20", z0, spec.emitter_activation)
        else:
            z1 = draw(gaussian_head(pv, e1s[s], "prior1"))
            z2 = draw(gaussian_head(pv, e2s[s], "prior2"))
            if spec.residual_connection:
                g1 = gated_residual_emit(pv, "p10", "emit1", z0, z1,
                                         spec.emitter_activation, spec.reuse_sigma1)
                g2 = gated_residual_emit(pv, "p20", "emit2", z0, z2,
                                         spec.emitter_activation, spec.reuse_sigma1)
            else:
                g1 = emitter_forward(pv, "emit1", ad.concat_cols([z0, z1]),
                                     spec.emitter_activation)
                g2 = emitter_forward(pv, "emit2", ad.concat_cols([z0, z2]),
                                     spec.emitter_activation)
        preds.append((out(g1), out(g2)))
    return preds


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_checkpoint(ckpt: Checkpoint, dir_path) -> None:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.store.names())
    index, offset = [], 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.store[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": "<f4", "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "stage": ckpt.stage,
        "spec": _spec_dict(ckpt.spec),
        "config": _config_dict(ckpt.config),
        "frozen": ckpt.store.frozen_names(),
        "rng_state": _jsonable(ckpt.rng_state),
        "tensors": index,
        "history_file": "history.jsonl",
    }
    (out / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    (out / "tensors.bin").write_bytes(b"".join(blobs))
    with (out / "history.jsonl").open("w", encoding="utf-8") as fh:
        for entry in ckpt.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_checkpoint(dir_path) -> Checkpoint:
    src = Path(dir_path)
    man_path = src / "manifest.json"
    if not man_path.exists():
        raise FormatError(f"missing manifest.json in {src}")
    try:
        man = json.loads(man_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable manifest.json: {exc}") from exc
    if man.get("format_version") != FORMAT_VERSION or man.get("kind") != "checkpoint":
        raise FormatError("not a checkpoint manifest of a supported version")
    spec = _spec_from_dict(man["spec"])
    config = _config_from_dict(man["config"])
    raw = (src / "tensors.bin").read_bytes() if (src / "tensors.bin").exists() else None
    if raw is None:
        raise FormatError("missing tensors.bin")
    store = ParameterStore()
    end = 0
    for rec in man["tensors"]:
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape)) * 4
        chunk = raw[rec["offset"]:rec["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"tensor {rec['name']}: tensors.bin truncated "
                              f"({len(chunk)} of {nbytes} bytes)")
        store.add(rec["name"], np.frombuffer(chunk, dtype="<f4")
                  .reshape(shape).astype(np.float64))
        end = max(end, rec["offset"] + nbytes)
    if end != len(raw):
        raise FormatError(f"tensors.bin holds {len(raw)} bytes, manifest covers {end}")
    store.set_frozen(man.get("frozen", []))
    history = []
    hist_path = src / man.get("history_file", "history.jsonl")
    if hist_path.exists():
        for line in hist_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                history.append(json.loads(line))
    return Checkpoint(spec, store, config, history, stage=man["stage"],
                      rng_state=man.get("rng_state"))


def _spec_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["mlp_hidden"] = list(spec.mlp_hidden)
    return d


def _spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["mlp_hidden"] = tuple(d.get("mlp_hidden", ()))
    try:
        return ModelSpec(**d)
    except TypeError as exc:
        raise FormatError(f"bad model spec in manifest: {exc}") from exc


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    try:
        d["weights"] = IbWeights(**d.get("weights", {}))
        return TrainConfig(**d)
    except TypeError as exc:
        raise FormatError(f"bad train config in manifest: {exc}") from exc


def _jsonable(obj):
    if obj is None or isinstance(obj, (int, float, str, bool)):
        return obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return repr(obj)


_LATENT_FIELDS = ("z0_mean", "z0_std", "z1_mean", "z1_std", "z2_mean", "z2_std")


def write_latents(ext: LatentExtraction, dir_path) -> None:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    meta = dict(ext.meta)
    meta["format_version"] = FORMAT_VERSION
    meta["kind"] = "latents"
    meta["stage"] = ext.stage
    meta["tensors"] = [f for f in _LATENT_FIELDS if getattr(ext, f) is not None]
    shape = ext.z0_mean.shape
    meta["n_seq"], meta["t_steps"] = int(shape[0]), int(shape[1])
    for f in meta["tensors"]:
        arr = np.ascontiguousarray(getattr(ext, f), dtype="<f4")
        (out / f"{f}.bin").write_bytes(arr.tobytes())
        meta[f + "_shape"] = list(arr.shape)
    (out / "meta.json").write_text(_dump_json(meta), encoding="utf-8")


def read_latents(dir_path) -> LatentExtraction:
    src = Path(dir_path)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"missing meta.json in {src}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "latents":
        raise FormatError("not a latents directory of a supported version")
    fields = {}
    for f in meta.get("tensors", []):
        shape = tuple(meta[f + "_shape"])
        path = src / f"{f}.bin"
        if not path.exists():
            raise FormatError(f"missing tensor file for {f}")
        raw = path.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise FormatError(f"tensor {f}: {len(raw)} bytes, expected {expected}")
        fields[f] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return LatentExtraction(stage=meta["stage"], meta=meta, **fields)
