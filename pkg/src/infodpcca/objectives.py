"""Closed-form Gaussian information quantities and the trainable
objectives: the sequential VIB bound, the two-step shared/private CCA
objectives, the single-stage state-space ELBO, and the conditional
mutual-information diagnostic.

Entropy / cross-entropy / KL terms are computed analytically (every
stochastic map in the system is a diagonal Gaussian); reconstruction
terms use the single reparameterized sample the caller drew. Losses are
averaged over time steps and batch so the ``alpha``/``beta`` weights
transfer across sequence length and dataset size. ``step1_loss`` and
``dvib_loss`` are minimized; the ``*_elbo`` functions return values to
maximize (the trainer negates them explicitly).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import NonFiniteLoss, ShapeMismatch
from .nets import DiagGaussian


@dataclass(frozen=True)
class IbWeights:
    """Trade-off weights for the information-theoretic objectives.

    ``alpha``/``beta`` drive the two-stream shared-state objective;
    ``dvib_beta`` is the single-stream bottleneck weight. ``ceb_lambda``
    is kept for the optional CEB-form bottleneck variant only and plays
    no role in the shared-state objective.
    """

    alpha: float = 1.0
    beta: float = 0.1
    dvib_beta: float = 0.1
    ceb_lambda: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "dvib_beta", "ceb_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"IbWeights.{name} must be >= 0")


@dataclass
class LossBreakdown:
    """A scalar objective plus its named, signed-weighted terms.

    ``total == sum(term_weights[k] * terms[k])`` by construction; the
    invariant is re-checked in tests. Values are autodiff ``Var``s on the
    training path and plain floats after ``detach()``.
    """

    total: Union[Var, float]
    terms: dict
    term_weights: dict
    alpha: Optional[float] = None
    beta: Optional[float] = None

    def detach(self) -> "LossBreakdown":
        def val(v):
            return float(v.value) if isinstance(v, Var) else float(v)
        return LossBreakdown(val(self.total), {k: val(v) for k, v in self.terms.items()},
                             dict(self.term_weights), self.alpha, self.beta)

    def recompute_total(self) -> float:
        d = self.detach()
        return sum(d.term_weights[k] * d.terms[k] for k in d.terms)

    def json_line(self, step: int, epoch: int) -> str:
        d = self.detach()
        rec = {"step": step, "epoch": epoch, "total": d.total}
        rec.update(d.terms)
        rec["alpha"] = d.alpha
        rec["beta"] = d.beta
        return json.dumps(rec, sort_keys=True)


def standard_normal(dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(dim), np.ones(dim))


def _pair(g: DiagGaussian):
    return ad.lift(g.mean), ad.lift(g.std)


def _as_batch(v: Var):
    """(d,) -> (1,d) with a flag to collapse the result back to a scalar."""
    if v.value.ndim == 1:
        return _reshape_row(v), True
    if v.value.ndim == 2:
        return v, False
    raise ShapeMismatch(f"expected vector or (B,d) array, got shape {v.value.shape}")


def _reshape_row(v: Var) -> Var:
    value = v.value.reshape(1, -1)

    def bwd(g):
        if v.requires_grad:
            ad._acc(v, g.reshape(v.value.shape))

    return ad._make(value, (v,), bwd)


def _vec_or_scalar(out: Var, collapse: bool) -> Var:
    return ad.sum_all(out) if collapse else out


def gauss_logpdf(g: DiagGaussian, x) -> Var:
    """Exact diagonal-Gaussian log density of ``x`` under ``g``.

    Vector arguments give a scalar; (B,d) batches give a (B,) vector.
    Differentiable w.r.t. the distribution parameters and ``x``.
    """
    mean, std = _pair(g)
    mean, collapse = _as_batch(mean)
    std, _ = _as_batch(std)
    xv, cx = _as_batch(ad.lift(x))
    if cx != collapse:
        raise ShapeMismatch("x and distribution must both be vectors or both batched")
    return _vec_or_scalar(ad.gauss_logpdf_vec(xv, mean, std), collapse)


def gauss_entropy(q: DiagGaussian) -> Var:
    """H(q) = -E_q[log q], analytic."""
    _, std = _pair(q)
    std, collapse = _as_batch(std)
    return _vec_or_scalar(ad.gauss_entropy_vec(std), collapse)


def gauss_cross_entropy(q: DiagGaussian, p: DiagGaussian) -> Var:
    """CE(q,p) = -E_q[log p], analytic; satisfies CE = H(q) + KL(q||p)."""
    mq, sq = _pair(q)
    mp, sp = _pair(p)
    mq, collapse = _as_batch(mq)
    sq, _ = _as_batch(sq)
    mp, _ = _as_batch(mp)
    sp, _ = _as_batch(sp)
    return _vec_or_scalar(ad.gauss_cross_entropy_vec(mq, sq, mp, sp), collapse)


def kl_diag_gauss(q: DiagGaussian, p: DiagGaussian) -> Var:
    """KL(q || p) >= 0, zero iff q = p."""
    mq, sq = _pair(q)
    mp, sp = _pair(p)
    mq, collapse = _as_batch(mq)
    sq, _ = _as_batch(sq)
    mp, _ = _as_batch(mp)
    sp, _ = _as_batch(sp)
    return _vec_or_scalar(ad.gauss_kl_vec(mq, sq, mp, sp), collapse)


def cmi_diagnostic(i_upper: float, i_lower: float) -> float:
    """Difference of the compression upper bound and the prediction lower
    bound; tracks the conditional mutual information up to bound slack,
    so it may go negative."""
    return float(i_upper) - float(i_lower)


# ---------------------------------------------------------------------------
# sequence objectives
# ---------------------------------------------------------------------------


def _mean_over_steps(per_step: Sequence[Var]) -> Var:
    # fixed reduction order: ascending t, then batch
    means = [ad.mean_all(v) for v in per_step]
    return ad.scale(ad.add_n(means), 1.0 / len(means))


def _const_batch(g: DiagGaussian, batch: int) -> DiagGaussian:
    m, s = g.numpy()
    if m.ndim == 1:
        m = np.broadcast_to(m, (batch, m.shape[0])).copy()
        s = np.broadcast_to(s, (batch, s.shape[0])).copy()
    return DiagGaussian(ad.lift(m), ad.lift(s))


def _batched(g: DiagGaussian) -> tuple[Var, Var]:
    m, s = _pair(g)
    if m.value.ndim != 2 or s.value.ndim != 2:
        raise ShapeMismatch("per-step distributions must be batched (B,d)")
    return m, s


def _assemble(terms: dict, weights: dict, alpha=None, beta=None) -> LossBreakdown:
    bad = {}
    for name, v in terms.items():
        if not np.isfinite(v.value):
            bad[name] = float(v.value)
    if bad:
        raise NonFiniteLoss(f"non-finite objective terms: {bad}", terms=bad)
    total = ad.add_n([ad.scale(terms[k], weights[k]) for k in terms])
    if not np.isfinite(total.value):
        raise NonFiniteLoss(f"non-finite objective total {float(total.value)}",
                            terms={k: float(v.value) for k, v in terms.items()})
    return LossBreakdown(total, terms, dict(weights), alpha, beta)


def _check_steps(name, seqs, targets):
    S = len(seqs[0])
    if S < 1:
        raise ShapeMismatch(f"{name}: needs at least one prediction step")
    if any(len(s) != S for s in seqs) or any(t.shape[0] != S for t in targets):
        raise ShapeMismatch(f"{name}: per-step inputs disagree on length")
    return S


def dvib_loss(q_z: Sequence[DiagGaussian], recon: Sequence[DiagGaussian],
              x_next: np.ndarray, weights: IbWeights,
              prior: Optional[DiagGaussian] = None) -> LossBreakdown:
    """Sequential bottleneck bound: beta * (<log q> - <log r>) - <log p>.

    ``q_z[s]`` encodes the prefix through step s, ``recon[s]`` is the
    decoder evaluated on the sample of ``q_z[s]``, and ``x_next[s]`` is
    the step-(s+1) observation it must predict.
    """
    S = _check_steps("dvib_loss", [q_z, recon], [x_next])
    B = ad.lift(q_z[0].mean).value.shape[0]
    r = _const_batch(prior or standard_normal(q_z[0].dim), B)
    rm, rstd = _pair(r)

    logq, ce_r, rec = [], [], []
    for s in range(S):
        m, sd = _batched(q_z[s])
        logq.append(ad.scale(ad.gauss_entropy_vec(sd), -1.0))
        ce_r.append(ad.gauss_cross_entropy_vec(m, sd, rm, rstd))
        em, es = _batched(recon[s])
        rec.append(ad.gauss_logpdf_vec(np.ascontiguousarray(x_next[s]), em, es))
    b = float(weights.dvib_beta)
    terms = {
        "compression": _mean_over_steps(logq),
        "prior_cross_entropy": _mean_over_steps(ce_r),
        "reconstruction": _mean_over_steps(rec),
    }
    w = {"compression": b, "prior_cross_entropy": b, "reconstruction": -1.0}
    return _assemble(terms, w, alpha=None, beta=b)


def step1_loss(q012: Sequence[DiagGaussian], q01: Sequence[DiagGaussian],
               q02: Sequence[DiagGaussian], p10: Sequence[DiagGaussian],
               p20: Sequence[DiagGaussian], x1_next: np.ndarray,
               x2_next: np.ndarray, weights: IbWeights) -> LossBreakdown:
    """Shared-state extraction objective (minimized).

    Per step: (alpha+2 beta) <log q012> - alpha <log r> - <log p1> -
    <log p2> - beta <log q01> - beta <log q02>, all expectations under
    the joint encoder's sample; entropy/cross-entropy parts analytic.
    ``p10[s]``/``p20[s]`` must be emitter outputs on that same sample.
    """
    S = _check_steps("step1_loss", [q012, q01, q02, p10, p20], [x1_next, x2_next])
    B = ad.lift(q012[0].mean).value.shape[0]
    r = _const_batch(standard_normal(q012[0].dim), B)
    rm, rstd = _pair(r)

    neg_h, ce_r, rec1, rec2, ce1, ce2 = [], [], [], [], [], []
    for s in range(S):
        m, sd = _batched(q012[s])
        m1, sd1 = _batched(q01[s])
        m2, sd2 = _batched(q02[s])
        neg_h.append(ad.scale(ad.gauss_entropy_vec(sd), -1.0))
        ce_r.append(ad.gauss_cross_entropy_vec(m, sd, rm, rstd))
        ce1.append(ad.gauss_cross_entropy_vec(m, sd, m1, sd1))
        ce2.append(ad.gauss_cross_entropy_vec(m, sd, m2, sd2))
        em, es = _batched(p10[s])
        rec1.append(ad.gauss_logpdf_vec(np.ascontiguousarray(x1_next[s]), em, es))
        em, es = _batched(p20[s])
        rec2.append(ad.gauss_logpdf_vec(np.ascontiguousarray(x2_next[s]), em, es))

    a, b = float(weights.alpha), float(weights.beta)
    terms = {
        "shared_logq": _mean_over_steps(neg_h),
        "prior_cross_entropy": _mean_over_steps(ce_r),
        "recon1": _mean_over_steps(rec1),
        "recon2": _mean_over_steps(rec2),
        "marginal1_cross_entropy": _mean_over_steps(ce1),
        "marginal2_cross_entropy": _mean_over_steps(ce2),
    }
    w = {
        "shared_logq": a + 2.0 * b,
        "prior_cross_entropy": a,
        "recon1": -1.0,
        "recon2": -1.0,
        "marginal1_cross_entropy": b,
        "marginal2_cross_entropy": b,
    }
    return _assemble(terms, w, alpha=a, beta=b)


def _elbo(name, q_parts, priors, recon1, recon2, x1_t, x2_t) -> LossBreakdown:
    q0, q1, q2 = q_parts
    p0, p1, p2 = priors
    S = _check_steps(name, [q0, q1, q2, p0, p1, p2, recon1, recon2], [x1_t, x2_t])

    kls = {"kl_shared": [], "kl_private1": [], "kl_private2": []}
    rec1, rec2 = [], []
    for s in range(S):
        for key, q, p in (("kl_shared", q0[s], p0[s]),
                          ("kl_private1", q1[s], p1[s]),
                          ("kl_private2", q2[s], p2[s])):
            mq, sq = _batched(q)
            mp, sp = _batched(p)
            kls[key].append(ad.gauss_kl_vec(mq, sq, mp, sp))
        em, es = _batched(recon1[s])
        rec1.append(ad.gauss_logpdf_vec(np.ascontiguousarray(x1_t[s]), em, es))
        em, es = _batched(recon2[s])
        rec2.append(ad.gauss_logpdf_vec(np.ascontiguousarray(x2_t[s]), em, es))

    terms = {
        "recon1": _mean_over_steps(rec1),
        "recon2": _mean_over_steps(rec2),
        "kl_shared": _mean_over_steps(kls["kl_shared"]),
        "kl_private1": _mean_over_steps(kls["kl_private1"]),
        "kl_private2": _mean_over_steps(kls["kl_private2"]),
    }
    w = {"recon1": 1.0, "recon2": 1.0,
         "kl_shared": -1.0, "kl_private1": -1.0, "kl_private2": -1.0}
    return _assemble(terms, w)


def step2_elbo(q_parts, priors, recon1, recon2, x1_next, x2_next) -> LossBreakdown:
    """Evidence lower bound of the full generative model (maximized).

    ``q_parts = (q0, q1, q2)`` are the per-step posterior blocks,
    ``priors`` their matching per-step priors (shared block: the frozen
    joint encoder; private blocks: the stream encoders), ``recon*`` the
    emitters evaluated on the joint posterior sample, and ``x*_next`` the
    step-(s+1) targets.
    """
    return _elbo("step2_elbo", q_parts, priors, recon1, recon2, x1_next, x2_next)


def dpcca_elbo(q_parts, priors, recon1, recon2, x1, x2) -> LossBreakdown:
    """Single-stage state-space ELBO (maximized).

    Same structure as ``step2_elbo`` but targets are the same-step
    observations and the priors come from the latent transition model
    (standard normal at the first step).
    """
    return _elbo("dpcca_elbo", q_parts, priors, recon1, recon2, x1, x2)
