"""Differentiable building blocks: MLPs, GRU encoders, Gaussian heads,
reparameterized sampling and the gated residual emitter.

All operations accept a ``ParameterStore`` or a prepared ``{name: Var}``
mapping (one graph leaf per parameter, as produced by
``ParameterStore.as_vars``) and return autodiff ``Var`` objects. Analytic
gradients of every op are checked against central finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ShapeMismatch
from .params import ParameterStore, uniform_fan_in

#: additive floor on every softplus std head; keeps likelihoods finite on
#: near-noiseless data
STD_FLOOR = 1e-4

ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "identity": lambda v: v,
}

# An RNN state is just the hidden vector (batch-major).
RnnState = Union[Var, np.ndarray]


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by elementwise mean and (positive) std.

    Fields may be numpy arrays or autodiff ``Var``s; batched uses are
    row-major ``(B, d)``.
    """

    mean: Union[Var, np.ndarray]
    std: Union[Var, np.ndarray]

    def numpy(self):
        m = self.mean.value if isinstance(self.mean, Var) else np.asarray(self.mean)
        s = self.std.value if isinstance(self.std, Var) else np.asarray(self.std)
        return m, s

    @property
    def dim(self) -> int:
        m, _ = self.numpy()
        return m.shape[-1]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus one activation name per layer."""

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.layer_widths) != len(self.activations):
            raise ShapeMismatch("MlpSpec needs one activation per layer, got "
                                f"{len(self.layer_widths)} widths / "
                                f"{len(self.activations)} activations")
        if any(w <= 0 for w in self.layer_widths):
            raise ShapeMismatch(f"layer widths must be positive: {self.layer_widths}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ShapeMismatch(f"unknown activation {a!r}")


def _vars(params):
    if isinstance(params, ParameterStore):
        return params.as_vars()
    return params


# ---------------------------------------------------------------------------
# initialisation helpers (parameter creation order is fixed => builds are
# bit-reproducible under a fixed seed)
# ---------------------------------------------------------------------------


def init_affine(store: ParameterStore, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator, w_name="W", b_name="b",
                bias_value: float = 0.0) -> None:
    store.add(f"{prefix}/{w_name}", uniform_fan_in(rng, d_in, (d_in, d_out)))
    store.add(f"{prefix}/{b_name}", np.full(d_out, bias_value, dtype=np.float64))


def init_mlp(store: ParameterStore, prefix: str, d_in: int, spec: MlpSpec,
             rng: np.random.Generator) -> None:
    cur = d_in
    for i, width in enumerate(spec.layer_widths):
        init_affine(store, f"{prefix}/mlp{i}", cur, width, rng)
        cur = width


def init_gaussian_head(store: ParameterStore, prefix: str, d_in: int, d_out: int,
                       rng: np.random.Generator) -> None:
    init_affine(store, f"{prefix}/head", d_in, d_out, rng, "W_mu", "b_mu")
    init_affine(store, f"{prefix}/head", d_in, d_out, rng, "W_sigma", "b_sigma")


def init_gru(store: ParameterStore, prefix: str, d_in: int, hidden: int,
             rng: np.random.Generator) -> None:
    store.add(f"{prefix}/gru/W_x", uniform_fan_in(rng, d_in, (d_in, 3 * hidden)))
    store.add(f"{prefix}/gru/W_h", uniform_fan_in(rng, hidden, (hidden, 3 * hidden)))
    store.add(f"{prefix}/gru/b", np.zeros(3 * hidden))


def init_emitter(store: ParameterStore, prefix: str, d_in: int,
                 hidden: Sequence[int], d_out: int, rng: np.random.Generator) -> None:
    """ReLU trunk of the given widths followed by a Gaussian head."""
    cur = d_in
    for i, width in enumerate(hidden):
        init_affine(store, f"{prefix}/mlp{i}", cur, width, rng)
        cur = width
    init_gaussian_head(store, prefix, cur, d_out, rng)


def init_gate(store: ParameterStore, prefix: str, d_in: int, hidden: int,
              d_out: int, rng: np.random.Generator) -> None:
    """One-hidden-layer gating MLP; output bias -1 so training starts with
    the gate mostly closed (favouring the reused branch)."""
    init_affine(store, f"{prefix}/gate0", d_in, hidden, rng)
    init_affine(store, f"{prefix}/gate_out", hidden, d_out, rng, bias_value=-1.0)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def mlp_forward(params, spec: MlpSpec, x, prefix: str = "mlp") -> Var:
    """Run the MLP stored under ``prefix`` on a batch ``x`` of rows."""
    pv = _vars(params)
    h = ad.lift(x)
    if h.value.ndim != 2:
        raise ShapeMismatch(f"mlp_forward expects (B, d) input, got {h.value.shape}")
    for i, (width, act) in enumerate(zip(spec.layer_widths, spec.activations)):
        w = pv[f"{prefix}/mlp{i}/W"]
        if h.value.shape[1] != w.value.shape[0]:
            raise ShapeMismatch(f"layer {i} of {prefix!r}: input width "
                                f"{h.value.shape[1]} != {w.value.shape[0]}")
        h = ACTIVATIONS[act](ad.affine(h, w, pv[f"{prefix}/mlp{i}/b"]))
    return h


def gru_step(params, h: RnnState, x, prefix: str = "rnn") -> Var:
    """One gated recurrent update; output components lie in (-1, 1)."""
    pv = _vars(params)
    h = ad.lift(h)
    x = ad.lift(x)
    w_x = pv[f"{prefix}/gru/W_x"]
    if x.value.ndim != 2 or x.value.shape[1] != w_x.value.shape[0]:
        raise ShapeMismatch(f"gru_step {prefix!r}: input shape {x.value.shape} "
                            f"does not match W_x {w_x.value.shape}")
    ax = ad.affine(x, w_x, pv[f"{prefix}/gru/b"])
    ah = ad.matmul(h, pv[f"{prefix}/gru/W_h"])
    return ad.gru_gates(ax, ah, h)


def gru_sequence(params, xs: np.ndarray, prefix: str = "rnn",
                 h0: Optional[np.ndarray] = None) -> list[Var]:
    """Run a GRU over ``xs`` of shape (T, B, d); returns the T hidden states."""
    pv = _vars(params)
    T, B, _ = xs.shape
    hidden = pv[f"{prefix}/gru/W_h"].value.shape[0]
    h = ad.lift(np.zeros((B, hidden)) if h0 is None else h0)
    out = []
    for t in range(T):
        h = gru_step(pv, h, np.ascontiguousarray(xs[t]), prefix)
        out.append(h)
    return out


def gaussian_head(params, h, prefix: str, mean_activation: str = "identity",
                  std_floor: float = STD_FLOOR) -> DiagGaussian:
    """Affine mean (optionally squashed) and floored-softplus std."""
    pv = _vars(params)
    h = ad.lift(h)
    w_mu = pv[f"{prefix}/head/W_mu"]
    if h.value.ndim != 2 or h.value.shape[1] != w_mu.value.shape[0]:
        raise ShapeMismatch(f"gaussian_head {prefix!r}: input shape {h.value.shape} "
                            f"does not match W_mu {w_mu.value.shape}")
    mean = ACTIVATIONS[mean_activation](ad.affine(h, w_mu, pv[f"{prefix}/head/b_mu"]))
    pre = ad.affine(h, pv[f"{prefix}/head/W_sigma"], pv[f"{prefix}/head/b_sigma"])
    std = ad.add(ad.softplus(pre), float(std_floor))
    return DiagGaussian(mean, std)


def sample_reparam(g: DiagGaussian, noise) -> Var:
    """mean + std * noise; gradients flow into the distribution parameters."""
    mean, std = ad.lift(g.mean), ad.lift(g.std)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mean.value.shape:
        raise ShapeMismatch(f"noise shape {noise.shape} != mean shape {mean.value.shape}")
    return ad.add(mean, ad.mul(std, noise))


def emitter_forward(params, prefix: str, z, mean_activation: str = "identity",
                    std_floor: float = STD_FLOOR) -> DiagGaussian:
    """ReLU trunk (layers ``prefix/mlp{i}``) followed by the Gaussian head."""
    pv = _vars(params)
    h = ad.lift(z)
    i = 0
    while f"{prefix}/mlp{i}/W" in pv:
        h = ad.relu(ad.affine(h, pv[f"{prefix}/mlp{i}/W"], pv[f"{prefix}/mlp{i}/b"]))
        i += 1
    return gaussian_head(pv, h, prefix, mean_activation, std_floor)


def gate_forward(params, prefix: str, z) -> Var:
    pv = _vars(params)
    h = ad.relu(ad.affine(ad.lift(z), pv[f"{prefix}/gate0/W"], pv[f"{prefix}/gate0/b"]))
    return ad.sigmoid(ad.affine(h, pv[f"{prefix}/gate_out/W"], pv[f"{prefix}/gate_out/b"]))


def gated_residual_emit(params, frozen_prefix: str, fresh_prefix: str,
                        z0, zi, mean_activation: str = "identity",
                        reuse_sigma1: bool = False,
                        gate_override: Optional[np.ndarray] = None,
                        std_floor: float = STD_FLOOR) -> DiagGaussian:
    """Convex per-component mix of the frozen emitter's mean with a fresh
    branch, steered by a learned gate in (0, 1).

    The frozen emitter (under ``frozen_prefix``) sees only ``z0``; the
    fresh branch and the gate see ``[z0, zi]``. The output std comes from
    the fresh branch unless ``reuse_sigma1``. ``gate_override`` is a test
    hook that replaces the gate with a fixed array.
    """
    pv = _vars(params)
    g1 = emitter_forward(pv, frozen_prefix, z0, mean_activation, std_floor)
    zcat = ad.concat_cols([ad.lift(z0), ad.lift(zi)])
    g2 = emitter_forward(pv, fresh_prefix, zcat, mean_activation, std_floor)
    if gate_override is not None:
        gate = ad.lift(np.asarray(gate_override, dtype=np.float64))
    else:
        gate = gate_forward(pv, fresh_prefix, zcat)
    m1, m2 = ad.lift(g1.mean), ad.lift(g2.mean)
    if gate.value.shape != m1.value.shape or m1.value.shape != m2.value.shape:
        raise ShapeMismatch("gate/branch shapes disagree: "
                            f"{gate.value.shape}, {m1.value.shape}, {m2.value.shape}")
    mean = ad.add(ad.mul(ad.sub(1.0, gate), m1), ad.mul(gate, m2))
    std = g1.std if reuse_sigma1 else g2.std
    return DiagGaussian(mean, std)
