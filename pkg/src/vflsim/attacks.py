"""Adversarial procedures run against recorded transcripts.

Attacks only read :class:`~vflsim.protocol.TranscriptView` objects plus the
attacking party's own data. Ground truth from the side channel is used solely
by the evaluation helpers that build an :class:`AttackReport`.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import crypto
from .crypto import FixedPointCodec
from .model import GRADIENT_SCALE, ApproxScheme
from .numeric import solve_linear_combination
from .protocol import (
    Party,
    ProtocolContext,
    Transcript,
    TranscriptView,
    encrypt_values,
    feature_scalars,
    masked_decrypt,
    transcript_checkpoint,
)

REPORT_SCHEMA = "vflsim-attack-report v1"
MINIMAX_CRIT = math.sqrt(197.0 / 12.0)


class AttackError(ValueError):
    pass


# Coefficient recovery -------------------------------------------------------

@dataclass(frozen=True)
class CoefficientEstimate:
    t: int
    batch: np.ndarray
    f: np.ndarray | None
    unique: bool
    rank: int
    residual: float
    counterpart: np.ndarray | None = None

    @property
    def underdetermined(self) -> bool:
        return not self.unique


def _solve(columns: np.ndarray, target: np.ndarray, t: int, batch) -> CoefficientEstimate:
    batch = np.asarray(batch if batch is not None else np.arange(columns.shape[1]))
    if columns.shape[0] == 0 or columns.shape[0] < columns.shape[1]:
        return CoefficientEstimate(t, batch, None, False, 0 if columns.shape[0] == 0 else -1, math.inf)
    rep = solve_linear_combination(columns, target)
    return CoefficientEstimate(t, batch, rep.solution if rep.unique else None, rep.unique, rep.rank, rep.residual_norm)


def recover_coefficients(gradient, own_features, scale: float = 0.25, t: int = 0, batch=None) -> CoefficientEstimate:
    """Solve ``sum_i f_i x_i = (s / scale) * grad`` for the batch coefficients.

    ``own_features`` is the ``s x d_P`` block of the attacker's rows. Returns an
    estimate with ``f=None`` when the system is not uniquely solvable.
    """
    X = np.asarray(own_features, dtype=float)
    grad = np.asarray(gradient, dtype=float)
    s = X.shape[0]
    if grad.shape[0] != X.shape[1]:
        raise AttackError(f"gradient has {grad.shape[0]} entries but features have {X.shape[1]} columns")
    return _solve(X.T, grad * (s / scale), t, batch)


def extract_counterpart_inner(estimate: CoefficientEstimate, own_inner, labels=None) -> np.ndarray:
    """A (with labels): ``g^B = f - g^A + 2y``. B (without): ``f - g^B = g^A - 2y``."""
    if estimate.f is None:
        raise AttackError("coefficients were not uniquely recovered")
    if labels is None:
        return estimate.f - np.asarray(own_inner)
    return estimate.f - np.asarray(own_inner) + 2.0 * np.asarray(labels)


def party_views(transcript: Transcript, party: str, T: int | None = None) -> list[TranscriptView]:
    T = len(transcript) if T is None else min(T, len(transcript))
    return [transcript_checkpoint(transcript, t, party) for t in range(1, T + 1)]


def coefficient_stream(views: Sequence[TranscriptView], features, labels=None) -> list[CoefficientEstimate]:
    """Recover ``f`` and the counterpart term for each view of one party."""
    features = np.asarray(features, dtype=float)
    out = []
    for v in views:
        scale = GRADIENT_SCALE[ApproxScheme(v.public["scheme"])]
        xb = features[v.batch]
        est = recover_coefficients(v.own["grad"], xb, scale, v.t, v.batch)
        if est.f is not None:
            inner = xb @ v.own["theta"]
            lab = None if labels is None else np.asarray(labels)[v.batch]
            est = CoefficientEstimate(est.t, est.batch, est.f, True, est.rank, est.residual,
                                      extract_counterpart_inner(est, inner, lab))
        out.append(est)
    return out


# Label attacks --------------------------------------------------------------

@dataclass
class LabelEstimate:
    """Per-step label guesses; 0 means the attacker abstained or was not allowed to assert."""

    batches: np.ndarray  # (T', s)
    predictions: np.ndarray  # (T', s) in {-1, 0, +1}
    horizon: int | None
    n: int
    solved: np.ndarray | None = None  # (T',) False where the gradient system was underdetermined

    def __post_init__(self):
        if self.solved is None:
            self.solved = np.ones(len(self.batches), dtype=bool)

    @property
    def labels(self) -> np.ndarray:
        """First asserted label per sample (0 where never determined)."""
        out = np.zeros(self.n, dtype=np.int8)
        for b, p in zip(self.batches[::-1], self.predictions[::-1]):
            hit = p != 0
            out[b[hit]] = p[hit]
        return out

    @property
    def determined_at(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.int64)
        for t in range(len(self.batches), 0, -1):
            p = self.predictions[t - 1]
            out[self.batches[t - 1][p != 0]] = t
        return out

    def step_accuracy(self, y_true) -> np.ndarray:
        """Fraction of each batch labelled correctly; abstentions count as misses.

        Steps whose coefficients could not be recovered are NaN.
        """
        y = np.asarray(y_true)
        acc = np.mean(self.predictions == y[self.batches], axis=1)
        return np.where(self.solved, acc, np.nan)

    def cumulative_accuracy(self, y_true) -> np.ndarray:
        acc = self.step_accuracy(y_true)
        ok = ~np.isnan(acc)
        with np.errstate(invalid="ignore"):
            return np.cumsum(np.where(ok, acc, 0.0)) / np.cumsum(ok)


def label_attack_passive(
    views: Sequence[TranscriptView],
    features,
    scheme: ApproxScheme | None = None,
    horizon: int | None = None,
) -> LabelEstimate:
    """B's attack: ``y_hat = -sign(f_hat)`` while the horizon allows it.

    For TAYLOR1 and MINIMAX3 steps beyond ``horizon`` are not asserted; a zero
    coefficient is an abstention. PIECEWISE asserts whenever ``0 < |f| <= 1``
    at any step.
    """
    if not views:
        raise AttackError("no views supplied")
    scheme = ApproxScheme(scheme or views[0].public["scheme"])
    features = np.asarray(features, dtype=float)
    n = int(views[0].public.get("n", features.shape[0]))
    keep = [v for v in views if scheme is ApproxScheme.PIECEWISE or horizon is None or v.t <= horizon]
    batches = np.array([v.batch for v in keep]).reshape(len(keep), -1)
    preds = np.zeros(batches.shape, dtype=np.int8)
    solved = np.zeros(len(keep), dtype=bool)
    for k, est in enumerate(coefficient_stream(keep, features)):
        if est.f is None:
            continue
        solved[k] = True
        f = est.f
        sign = -np.sign(f).astype(np.int8)
        if scheme is ApproxScheme.PIECEWISE:
            sign[np.abs(f) > 1.0] = 0
        preds[k] = sign
    return LabelEstimate(batches, preds, horizon, n, solved)


def label_attack_dA0(gradient, own_features, own_inner, scale: float = 0.25, max_enumeration: int = 20) -> np.ndarray:
    """Exact batch labels when the label party contributes no features.

    The gradient gives ``I_t = sum_i y_i x_i``; the unique sign vector solving
    it is found by least squares when the batch features have full column rank
    and by enumeration otherwise.
    """
    X = np.asarray(own_features, dtype=float)
    g = np.asarray(own_inner, dtype=float)
    s = X.shape[0]
    if scale != 0.25:
        raise AttackError("the d_A = 0 attack is defined for the first-order Taylor scheme")
    target = (X.T @ g - (s / scale) * np.asarray(gradient, dtype=float)) / 2.0
    tol = 1e-8 * max(1.0, float(np.linalg.norm(target)))
    rep = solve_linear_combination(X.T, target)
    if rep.unique:
        z = np.where(rep.solution >= 0, 1.0, -1.0)
        if np.linalg.norm(X.T @ z - target) <= tol:
            return z
        raise AttackError("no feasible sign vector")
    if s > max_enumeration:
        raise AttackError(f"rank-deficient batch of size {s} exceeds the enumeration limit")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=s)))
    fits = signs[np.linalg.norm(signs @ X - target, axis=1) <= tol]
    if len(fits) == 0:
        raise AttackError("no feasible sign vector")
    if len(fits) > 1:
        raise AttackError("ambiguous: several sign vectors explain the gradient")
    return fits[0]


def sign_difference_exists(own_features, tol: float = 1e-9) -> bool:
    """Exhaustive check for a nonzero ``w`` in ``{-1, 0, 1}^s`` with ``sum w_i x_i = 0``.

    Labels are uniquely determined exactly when no such ``w`` exists.
    """
    X = np.asarray(own_features, dtype=float)
    s = X.shape[0]
    W = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=s)))
    W = W[np.any(W != 0, axis=1)]
    return bool(np.any(np.linalg.norm(W @ X, axis=1) <= tol))


# Feature reconstruction -----------------------------------------------------

class SortState:
    """Union-find over sample indices with multiplicative ratios to each set root."""

    def __init__(self, n: int, rtol: float = 1e-6):
        self.n = n
        self.rtol = rtol
        self._parent = list(range(n))
        self._ratio = np.ones(n)  # x_i / x_parent(i)
        self.inconsistencies = 0
        self.history: list[int] = []

    def find(self, i: int) -> tuple[int, float]:
        path = []
        while self._parent[i] != i:
            path.append(i)
            i = self._parent[i]
        root = i
        # Path compression keeps ratios relative to the root.
        acc = 1.0
        for j in reversed(path):
            acc *= self._ratio[j]
            self._ratio[j] = acc
            self._parent[j] = root
        return root, 1.0 if not path else self._ratio[path[0]]

    def ratio(self, i: int) -> float:
        """``x_i / x_root`` for the set containing ``i``."""
        return self.find(i)[1]

    def link(self, i: int, j: int, r_ij: float) -> None:
        """Record ``x_i / x_j = r_ij``."""
        ri, ai = self.find(i)
        rj, aj = self.find(j)
        if ri == rj:
            if not math.isclose(ai / aj, r_ij, rel_tol=self.rtol):
                self.inconsistencies += 1
            return
        # x_ri = x_i / ai = r_ij x_j / ai = r_ij aj x_rj / ai
        self._parent[ri] = rj
        self._ratio[ri] = r_ij * aj / ai

    def observe(self, batch, values, tol: float = 1e-12) -> bool:
        """Link a batch from its counterpart inner products ``g_i = theta x_i``."""
        values = np.asarray(values, dtype=float)
        if len(batch) < 2 or np.any(np.abs(values) <= tol * max(1.0, float(np.max(np.abs(values))))):
            return False
        for k in range(1, len(batch)):
            self.link(int(batch[k]), int(batch[0]), values[k] / values[0])
        return True

    def same_set(self, i: int, j: int) -> bool:
        return self.find(i)[0] == self.find(j)[0]

    def roots(self) -> np.ndarray:
        return np.array([self.find(i)[0] for i in range(self.n)])

    @property
    def count(self) -> int:
        return len(set(self.roots().tolist()))

    def close_epoch(self) -> None:
        self.history.append(self.count)


@dataclass
class FeatureReconstruction:
    magnitudes: np.ndarray  # |x_hat^B_i|, nan where unresolved
    state: SortState
    status: str
    epochs: int

    @property
    def resolved(self) -> np.ndarray:
        return ~np.isnan(self.magnitudes)

    def relative_error(self, truth) -> float:
        truth = np.abs(np.asarray(truth, dtype=float)).ravel()
        if not np.all(self.resolved):
            return math.inf
        return float(np.max(np.abs(self.magnitudes - truth) / np.maximum(truth, 1e-300)))


def feature_attack_1d(
    views: Sequence[TranscriptView],
    features,
    labels,
    n: int | None = None,
    m: int | None = None,
) -> FeatureReconstruction:
    """A's reconstruction of a one-dimensional ``x^B`` up to a global sign.

    Ratios ``x_i / x_j = g_i / g_j`` link every informative batch into sortable
    sets. Magnitudes follow from any index ``a`` seen at ``t1 < t2`` whose
    intermediate batches are sortable with it:
    ``x_root^2 = 4s (g_{a,t1} - g_{a,t2}) / (r_a sum_t eta_t sum_j f_{j,t} r_j)``.
    """
    if not views:
        raise AttackError("no views supplied")
    pub = views[0].public
    if list(pub.get("dims", [None, 1]))[1] != 1:
        raise AttackError("feature reconstruction requires d_B = 1")
    n = int(n or pub["n"])
    s = int(pub["s"])
    scale = GRADIENT_SCALE[ApproxScheme(pub["scheme"])]
    eta = pub["eta"]
    m = m or n // s
    state = SortState(n)
    if s < 2:
        return FeatureReconstruction(np.full(n, np.nan), state, "no information", 0)
    ests = coefficient_stream(views, features, labels)
    for k, est in enumerate(ests):
        if est.counterpart is not None:
            state.observe(est.batch, est.counterpart)
        if (k + 1) % m == 0:
            state.close_epoch()
    epochs = len(ests) // m
    rates = np.broadcast_to(np.asarray(eta, dtype=float), (len(ests),)) if np.ndim(eta) == 0 else np.asarray(eta)
    roots = state.roots()
    ratio = np.array([state.ratio(i) for i in range(n)])
    magnitudes = np.full(n, np.nan)
    # Best-conditioned closed-form pair for each sortable set.
    best: dict[int, tuple[float, float]] = {}
    last_seen: dict[int, int] = {}
    for k, est in enumerate(ests):
        if est.counterpart is None:
            last_seen.clear()
            continue
        for pos, i in enumerate(est.batch):
            i = int(i)
            if i in last_seen:
                k1 = last_seen[i]
                root = roots[i]
                span = ests[k1:k]
                if all(e.f is not None and np.all(roots[e.batch] == root) for e in span):
                    denom = ratio[i] * sum(rates[k1 + j] * float(e.f @ ratio[e.batch]) for j, e in enumerate(span))
                    g1 = _counterpart_of(ests[k1], i)
                    num = (s / scale) * (g1 - est.counterpart[pos])
                    if denom != 0 and (root not in best or abs(denom) > abs(best[root][1])):
                        best[root] = (num, denom)
            last_seen[i] = k
    for root, (num, denom) in best.items():
        sq = num / denom
        if sq <= 0:
            continue
        x_root = math.sqrt(sq)
        members = roots == root
        magnitudes[members] = np.abs(ratio[members]) * x_root
    if np.all(~np.isnan(magnitudes)):
        status = "complete"
    elif best:
        status = "partial"
    elif state.count > 1:
        status = "not yet sortable"
    else:
        raise AttackError("degenerate trajectory: no usable recurrence")
    return FeatureReconstruction(magnitudes, state, status, epochs)


def _counterpart_of(est: CoefficientEstimate, i: int) -> float:
    pos = int(np.nonzero(est.batch == i)[0][0])
    return float(est.counterpart[pos])


def sortability_epochs(n: int, s: int, epochs: int, seed) -> int | None:
    """Epoch at which every index becomes sortable under the permutation schedule.

    Purely combinatorial: every batch is assumed informative.
    """
    from .model import make_schedule

    sched = make_schedule(n, s, epochs, seed)
    state = SortState(n)
    m = n // s
    for t in range(sched.T):
        b = sched.batches[t]
        for k in range(1, s):
            state.link(int(b[k]), int(b[0]), 1.0)
        if (t + 1) % m == 0 and state.count == 1:
            return (t + 1) // m
    return None


@dataclass(frozen=True)
class Indistinguishability:
    match: bool
    max_deviation: float

    def __bool__(self) -> bool:
        return self.match


def orthogonal_indistinguishability(XA, XB, y, schedule, eta, theta0, Q, atol: float = 1e-9) -> Indistinguishability:
    """Re-run with ``x^B -> Q x^B`` and ``theta_0^B -> Q theta_0^B``; compare ``g^B``."""
    from .protocol import simulate_protocol

    Q = np.asarray(Q, dtype=float)
    XB = np.asarray(XB, dtype=float)
    dB = XB.shape[1]
    if dB < 2:
        raise AttackError("indistinguishability needs d_B >= 2")
    if Q.shape != (dB, dB) or np.max(np.abs(Q.T @ Q - np.eye(dB))) > 1e-12:
        raise AttackError("Q is not orthogonal")
    dA = np.asarray(XA).shape[1]
    theta0 = np.asarray(theta0, dtype=float)
    rotated = np.concatenate([theta0[:dA], Q @ theta0[dA:]])
    _, base = simulate_protocol(XA, XB, y, schedule, eta, theta0)
    _, moved = simulate_protocol(XA, XB @ Q.T, y, schedule, eta, rotated)
    dev = float(np.max(np.abs(base.side("gB") - moved.side("gB")), initial=0.0))
    return Indistinguishability(dev <= atol, dev)


# Active attack --------------------------------------------------------------

@dataclass(frozen=True)
class ActiveResult:
    estimate: CoefficientEstimate
    equations: int
    lanes: np.ndarray  # decoded u * d_A aggregates


def active_attack(
    ctx: ProtocolContext,
    A: Party,
    B: Party,
    batch,
    aux_features,
    u: int,
    value_bound: float = 4.0,
) -> ActiveResult:
    """A deviates from the exchange to harvest ``u * d_A`` equations in one step.

    B behaves honestly: it encrypts ``g^B`` under its key and decrypts what it
    is sent. A appends ``aux_features`` (``s x (u-1)*d_A``) to its rows, biases
    every aggregate by ``2**(iota-1)`` so each lane is a non-negative ``iota``-bit
    integer, packs ``u`` lanes per ciphertext and masks the result.
    """
    codec: FixedPointCodec = ctx.codec
    pk = ctx.keys_B.public
    batch = np.asarray(batch)
    s = batch.size
    xA = A.features[batch]
    dA = xA.shape[1]
    if dA < 1:
        raise AttackError("the active attack needs d_A >= 1")
    cap = crypto.max_pack_factor(pk.kappa, codec.iota)
    if not 1 <= u <= cap:
        raise crypto.PackingError(f"u = {u} outside 1..{cap} for kappa={pk.kappa}, iota={codec.iota}")
    aux = np.asarray(aux_features, dtype=float).reshape(s, -1)
    if aux.shape[1] != (u - 1) * dA:
        raise AttackError(f"expected {(u - 1) * dA} auxiliary columns, got {aux.shape[1]}")
    if not codec.accumulation_ok(s, value_bound):
        raise crypto.CodecOverflowError("lane bound violated for this batch size")
    Z = np.hstack([xA, aux])

    cts = encrypt_values(codec, pk, B.features[batch] @ B.theta, ctx.rng)

    bias = crypto.encrypt(pk, codec.half, ctx.rng)
    agg = [crypto.hom_add(crypto.hom_dot(cts, col, pk), bias) for col in feature_scalars(codec, pk.n, Z)]
    packed = crypto.pack_ciphertexts(agg, dA, u, codec.iota)
    masks = [ctx.rng.randrange(pk.n) for _ in packed]
    masked = [crypto.hom_add(c, crypto.encrypt(pk, (-r) % pk.n, ctx.rng)) for c, r in zip(packed, masks)]

    dec = masked_decrypt(ctx.keys_B, masked)

    words = [(d + r) % pk.n for d, r in zip(dec, masks)]
    lanes = np.array([(v - codec.half) / (codec.scale * codec.scale) for v in crypto.unpack(words, dA, u, codec.iota)])
    Zq = np.vectorize(codec.quantize, otypes=[float])(Z) / codec.scale
    est = _solve(Zq.T, lanes, 0, batch)
    return ActiveResult(estimate=est, equations=u * dA, lanes=lanes)


# Minimax inversion ----------------------------------------------------------

@dataclass(frozen=True)
class MinimaxRoots:
    roots: tuple[float, ...]
    unique: bool
    chosen: float | None


def _m(z: float, gA: float) -> float:
    return 0.004 * z**3 + 0.012 * gA * z**2 + (0.012 * gA**2 - 0.197) * z


def minimax_residual(f: float, y: float, gA: float) -> float:
    """``r = f + y/2 + 0.004 gA^3 - 0.197 gA``, which equals ``-m(g^B)``."""
    return f + 0.5 * y + 0.004 * gA**3 - 0.197 * gA


def minimax_inversion(r: float, gA: float, small_init: bool = False) -> MinimaxRoots:
    """Real roots ``z`` of ``m(z) + r = 0`` for the counterpart share under MINIMAX3.

    Three roots exist iff ``r`` lies in ``[-m(z1), -m(z0)]`` with critical points
    ``z0, z1 = -gA +- sqrt(197/12)``. ``small_init`` picks the middle root.
    """
    z0, z1 = MINIMAX_CRIT - gA, -MINIMAX_CRIT - gA
    lo, hi = -_m(z1, gA), -_m(z0, gA)
    ambiguous = lo <= r <= hi
    coeffs = [0.004, 0.012 * gA, 0.012 * gA**2 - 0.197, r]
    raw = np.roots(coeffs)
    if ambiguous:
        cand = np.sort(raw.real)
    else:
        cand = np.array([raw[np.argmin(np.abs(raw.imag))].real])
    polished = tuple(float(_newton(z, r, gA)) for z in cand)
    if not ambiguous:
        return MinimaxRoots(polished, True, polished[0])
    chosen = None
    if small_init:
        mids = [z for z in polished if z1 <= z <= z0]
        chosen = mids[0] if mids else None
    return MinimaxRoots(polished, False, chosen)


def _newton(z: float, r: float, gA: float, steps: int = 8) -> float:
    for _ in range(steps):
        val = _m(z, gA) + r
        der = 0.012 * (z + gA) ** 2 - 0.197
        if der == 0:
            break
        step = val / der
        z -= step
        if abs(step) < 1e-15 * max(1.0, abs(z)):
            break
    return z


# Reports --------------------------------------------------------------------

@dataclass
class AttackReport:
    attack: str
    metrics: dict
    curves: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "schema": REPORT_SCHEMA,
            "attack": self.attack,
            "metrics": {k: conv(v) for k, v in self.metrics.items()},
            "curves": {k: conv(v) for k, v in self.curves.items()},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def label_report(est: LabelEstimate, y_true, m: int) -> AttackReport:
    """Per-step and cumulative success rates, plus per-epoch means."""
    step = est.step_accuracy(y_true)
    cum = est.cumulative_accuracy(y_true)
    epochs = int(math.ceil(len(step) / m)) if len(step) else 0
    per_epoch = np.array([nan_mean(step[k * m : (k + 1) * m]) for k in range(epochs)])
    return AttackReport(
        attack="label_passive",
        metrics={
            "horizon": est.horizon,
            "steps": len(step),
            "mean_accuracy": nan_mean(step),
            "min_accuracy": float(np.nanmin(step)) if np.any(~np.isnan(step)) else math.nan,
            "abstentions": int(np.sum(est.predictions[est.solved] == 0)),
            "underdetermined_steps": int(np.sum(~est.solved)),
        },
        curves={"step_accuracy": step, "cumulative_accuracy": cum, "epoch_accuracy": per_epoch},
    )


def nan_mean(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.mean(values[~np.isnan(values)])) if np.any(~np.isnan(values)) else math.nan


def coefficient_report(ests: Iterable[CoefficientEstimate], truth: np.ndarray, name: str) -> AttackReport:
    """Max error of recovered counterpart terms against a ``T x s`` side-channel array."""
    errs = []
    skipped = 0
    for est, tru in zip(ests, truth):
        if est.counterpart is None:
            skipped += 1
            continue
        errs.append(float(np.max(np.abs(est.counterpart - tru))))
    return AttackReport(
        attack=name,
        metrics={"max_error": max(errs) if errs else math.nan, "underdetermined_steps": skipped},
        curves={"step_error": np.array(errs)},
    )
