"""Noise calibration, sensitivity bookkeeping and analytical horizons.

Closed-form bounds are evaluated with mpmath so that ceil-of-log horizons stay
stable next to integer boundaries. The absolute constants of the concentration
bounds are fixed once by Monte-Carlo calibration and read from
``constants.txt`` shipped with the package. The resulting privacy level is a
heuristic calibration, not a proven guarantee.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import mpmath
import numpy as np

from .model import BatchSchedule, make_schedule, train_plaintext

PRECISION_DPS = 50
CONSTANTS_FILE = "constants.txt"
CONSTANTS_HEADER = "vflsim-constants"


class DefenseError(ValueError):
    pass


# Constants file --------------------------------------------------------------

def load_constants(path=None) -> dict:
    """Parse ``name value`` lines; ``#`` starts a comment."""
    if path is None:
        text = resources.files("vflsim").joinpath(CONSTANTS_FILE).read_text()
    else:
        text = Path(path).read_text()
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith(CONSTANTS_HEADER):
        raise DefenseError("unrecognized constants file header")
    out = {"version": int(lines[0].split()[1])}
    for ln in lines[1:]:
        name, _, value = ln.partition(" ")
        out[name] = float(value)
    return out


def write_constants(path, values: dict, comments: dict | None = None, version: int = 1) -> None:
    comments = comments or {}
    rows = [f"{CONSTANTS_HEADER} {version}"]
    for name, value in values.items():
        note = f"  # {comments[name]}" if name in comments else ""
        rows.append(f"{name} {value!r}{note}")
    Path(path).write_text("\n".join(rows) + "\n")


def _constant(name: str) -> float:
    return load_constants()[name]


# Noise calibration -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseCalibration:
    epsilon: float
    delta: float
    G: float
    epochs: int
    T: int
    s: int
    eta: float

    def __post_init__(self):
        if not 0 < self.epsilon <= 1 or not 0 < self.delta < 1:
            raise DefenseError("need 0 < epsilon <= 1 and 0 < delta < 1")
        if not 0 < self.eta <= 1:
            raise DefenseError("the sensitivity bounds need 0 < eta <= 1")
        if self.G <= 0.5:
            raise DefenseError("G must exceed 1/2")
        if self.epochs < 1 or self.T < 1 or self.s < 1:
            raise DefenseError("epochs, T and s must be positive")


def _sens_closed(G, e, T, eta, s, last) -> mpmath.mpf:
    return mpmath.sqrt(8 * G**2 * e**2 * T * eta**2 / s + last**2 * e)


def calibrate_sigma(cal: NoiseCalibration) -> tuple[float, float]:
    """Gaussian-mechanism standard deviations ``(sigma_A, sigma_B)``."""
    with mpmath.workdps(PRECISION_DPS):
        G, e, T = mpmath.mpf(cal.G), mpmath.mpf(cal.epochs), mpmath.mpf(cal.T)
        eta, s, eps = mpmath.mpf(cal.eta), mpmath.mpf(cal.s), mpmath.mpf(cal.epsilon)
        lead = mpmath.sqrt(2 * mpmath.log(mpmath.mpf(5) / (4 * mpmath.mpf(cal.delta))))
        sa = lead * _sens_closed(G, e, T, eta, s, 8 * G) / eps
        sb = lead * _sens_closed(G, e, T, eta, s, 8 * G - 4) / eps
        return float(sa), float(sb)


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Classic mechanism requirement ``sqrt(2 ln(1.25/delta)) * Delta / epsilon``."""
    return math.sqrt(2 * math.log(1.25 / delta)) * sensitivity / epsilon


# Sensitivity -------------------------------------------------------------------

@dataclass
class SensitivityTrace:
    theta: np.ndarray  # (T + 1,) bounds on ||theta_t - theta'_t||
    sv_A: np.ndarray  # (T,) bounds on ||SV^A_t - SV'^A_t||
    sv_B: np.ndarray
    G: float
    eta: float
    s: int
    m: int
    epochs: int

    @property
    def aggregate_A(self) -> float:
        return float(np.sqrt(np.sum(self.sv_A**2)))

    @property
    def aggregate_B(self) -> float:
        return float(np.sqrt(np.sum(self.sv_B**2)))

    def envelope(self, party: str = "A") -> float:
        """Epoch-wise envelope: every step of epoch ``i`` charged ``i`` increments."""
        step = 2 * math.sqrt(2) * self.eta * self.G / self.s
        last = 8 * self.G if party == "A" else 8 * self.G - 4
        total = sum(self.s * self.m * (i * step) ** 2 for i in range(1, self.epochs + 1))
        return math.sqrt(total + last**2 * self.epochs)

    def closed_form(self, party: str = "A") -> float:
        last = 8 * self.G if party == "A" else 8 * self.G - 4
        with mpmath.workdps(PRECISION_DPS):
            return float(_sens_closed(self.G, self.epochs, self.m * self.epochs, self.eta, self.s, last))


def sensitivity_trace(G: float, eta: float, s: int, m: int, epochs: int, differing=None) -> SensitivityTrace:
    """Per-step sensitivity recursion for neighbouring datasets.

    ``differing`` lists the 1-based iterations whose batch contains the
    replaced instance; by default the first batch of every epoch, the worst
    placement for the aggregate.
    """
    if not 0 < eta <= 1:
        raise DefenseError("the sensitivity bounds need 0 < eta <= 1")
    T = m * epochs
    diff = set(range(1, T + 1, m)) if differing is None else {int(t) for t in differing}
    step = 2 * math.sqrt(2) * eta * G / s
    theta = np.zeros(T + 1)
    sv_A = np.zeros(T)
    sv_B = np.zeros(T)
    for t in range(1, T + 1):
        prev = theta[t - 1]
        if t in diff:
            sv_A[t - 1] = math.sqrt(s * prev**2 + (8 * G) ** 2)
            sv_B[t - 1] = math.sqrt(s * prev**2 + (8 * G - 4) ** 2)
            theta[t] = prev + step
        else:
            sv_A[t - 1] = math.sqrt(s) * prev
            sv_B[t - 1] = math.sqrt(s) * prev
            theta[t] = prev
    return SensitivityTrace(theta, sv_A, sv_B, G, eta, s, m, epochs)


def measured_G(X, y, dA: int, thetas) -> float:
    """Smallest ``G`` meeting the per-sample bounds along a trajectory."""
    X = np.asarray(X)
    y = np.asarray(y)
    inner = np.asarray(thetas) @ X.T
    inner_A = np.asarray(thetas)[:, :dA] @ X[:, :dA].T
    inner_B = inner - inner_A
    return float(max(
        np.max(np.abs(inner - 2 * y)) / 4,
        np.max(np.abs(inner_A - 2 * y)) / 4,
        (np.max(np.abs(inner_B)) + 2) / 4,
    ))


@dataclass
class SensitivityCheck:
    pairs: int
    violations: int
    G: float
    worst_ratio: float  # max observed distance / bound over all checked quantities
    first_violation: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.violations == 0


def empirical_sensitivity_check(
    X,
    y,
    dA: int,
    replacements,
    schedule: BatchSchedule,
    eta: float,
    theta0=None,
    G: float | None = None,
    atol: float = 1e-12,
) -> SensitivityCheck:
    """Exhaustive neighbour check on a tiny instance.

    Every row ``k`` is swapped for every ``(x', y')`` in ``replacements`` and
    both datasets are trained on the same schedule. The trace for each pair
    uses the iterations whose batch contains ``k``. With ``G=None`` the bound
    is ``max(1, measured)`` over all trajectories involved.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n > 8 or schedule.s > 4:
        raise DefenseError("exhaustive check is meant for n <= 8 and s <= 4")
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    base = train_plaintext("taylor1", X, y, schedule, eta, theta0, record_inner=False)
    runs = []
    for k in range(n):
        for xr, yr in replacements:
            X2, y2 = X.copy(), y.copy()
            X2[k], y2[k] = xr, yr
            runs.append((k, X2, y2, train_plaintext("taylor1", X2, y2, schedule, eta, theta0, record_inner=False)))
    if G is None:
        G = max([1.0, measured_G(X, y, dA, base.thetas)] + [measured_G(X2, y2, dA, r.thetas) for _, X2, y2, r in runs])
    m = schedule.m
    violations = 0
    worst = 0.0
    first = None
    for idx, (k, X2, y2, run) in enumerate(runs):
        differing = [t for t in range(1, schedule.T + 1) if k in schedule.batches[t - 1]]
        tr = sensitivity_trace(G, eta, schedule.s, m, schedule.epochs, differing)
        for t in range(1, schedule.T + 1):
            b = schedule.batches[t - 1]
            prev, prev2 = base.thetas[t - 1], run.thetas[t - 1]
            svA = X[b, :dA] @ prev[:dA] - 2 * y[b]
            svA2 = X2[b, :dA] @ prev2[:dA] - 2 * y2[b]
            svB = X[b, dA:] @ prev[dA:]
            svB2 = X2[b, dA:] @ prev2[dA:]
            checks = (
                ("theta", np.linalg.norm(base.thetas[t] - run.thetas[t]), tr.theta[t]),
                ("sv_A", np.linalg.norm(svA - svA2), tr.sv_A[t - 1]),
                ("sv_B", np.linalg.norm(svB - svB2), tr.sv_B[t - 1]),
            )
            for name, dist, bound in checks:
                if bound > 0:
                    worst = max(worst, dist / bound)
                if dist > bound + atol:
                    violations += 1
                    if first is None:
                        first = (idx, k, t, name, float(dist), float(bound))
    return SensitivityCheck(len(runs), violations, G, worst, first)


# Horizons --------------------------------------------------------------------

def _ceil_log(ratio, eta) -> tuple[int, float]:
    with mpmath.workdps(PRECISION_DPS):
        val = mpmath.log(ratio) / mpmath.log(1 + mpmath.mpf(eta) / 4)
        return int(mpmath.ceil(val)), float(val)


def horizon_passive_value(eps: float, eta: float) -> float:
    """Real-valued horizon before the ceiling."""
    _check_horizon_args(eps, eta, 0.0)
    with mpmath.workdps(PRECISION_DPS):
        return _ceil_log(mpmath.mpf(4) / (2 + mpmath.mpf(eps)), eta)[1]


def horizon_passive(eps: float, eta: float) -> int:
    """``ceil(log_{1+eta/4}(4 / (2 + eps)))`` with ``eps = max_i |theta_0 x_i|``."""
    _check_horizon_args(eps, eta, 0.0)
    with mpmath.workdps(PRECISION_DPS):
        return _ceil_log(mpmath.mpf(4) / (2 + mpmath.mpf(eps)), eta)[0]


def _defended_ratio(eps, u):
    u = mpmath.mpf(u)
    return (4 * u + 4) / (4 * u + 2 + mpmath.mpf(eps))


def horizon_defended_value(eps: float, eta: float, u_noise: float) -> float:
    _check_horizon_args(eps, eta, u_noise)
    with mpmath.workdps(PRECISION_DPS):
        return _ceil_log(_defended_ratio(eps, u_noise), eta)[1]


def horizon_defended(eps: float, eta: float, u_noise: float) -> int:
    """``ceil(log_{1+eta/4}((4u + 4) / (4u + 2 + eps)))``; equals the passive horizon at ``u = 0``."""
    _check_horizon_args(eps, eta, u_noise)
    with mpmath.workdps(PRECISION_DPS):
        return _ceil_log(_defended_ratio(eps, u_noise), eta)[0]


def _check_horizon_args(eps, eta, u):
    if eps >= 2:
        raise DefenseError("criterion invalid at t=1: eps >= 2")
    if eps < 0 or eta <= 0 or u < 0:
        raise DefenseError("need eps >= 0, eta > 0 and u_noise >= 0")


def psi1_norm_standard_normal() -> float:
    """Sub-exponential norm of N(0, 1): the K with ``E exp(|X| / K) = 2``."""
    with mpmath.workdps(30):
        f = lambda K: 2 * mpmath.exp(1 / (2 * K**2)) * mpmath.ncdf(1 / K) - 2
        return float(mpmath.findroot(f, 1.4))


def horizon_small_init(l: float, d: int, eta: float, n: int = 1, c: float | None = None) -> tuple[int, float]:
    """Horizon for i.i.d. ``N(0, 1/d)`` initialisation and its failure-probability bound."""
    if d < 1 or l <= 0:
        raise DefenseError("need d >= 1 and l > 0")
    c = _constant("bernstein_c") if c is None else c
    with mpmath.workdps(PRECISION_DPS):
        ratio = 4 * mpmath.mpf(c) / (2 * mpmath.mpf(c) + mpmath.mpf(l) * mpmath.mpf(d) ** mpmath.mpf(-0.25))
        T = _ceil_log(ratio, eta)[0]
        fail = float(2 * n * mpmath.exp(-mpmath.sqrt(d)))
    return T, fail


def small_init_threshold(l: float, d: int, c: float | None = None) -> float:
    c = _constant("bernstein_c") if c is None else c
    return l * d ** -0.25 / c


# Gradient error ----------------------------------------------------------------

def gradient_error_bound(sigma: float, s: int, T: int, delta: float, c: float | None = None) -> float:
    """``u_noise = sqrt(ln(2T/delta) / (c s)) * sigma``."""
    if sigma < 0:
        raise DefenseError("sigma must be non-negative")
    c = _constant("gradient_error_c") if c is None else c
    with mpmath.workdps(PRECISION_DPS):
        return float(mpmath.sqrt(mpmath.log(2 * mpmath.mpf(T) / mpmath.mpf(delta)) / (mpmath.mpf(c) * s)) * sigma)


# Reference setting for the calibration of c.
ERROR_REFERENCE = {"n": 512, "d": 32, "s": 64, "T": 16, "sigma": 1.0, "delta": 0.05}


def max_error_norm(seed, n=512, d=32, s=64, T=16, sigma=1.0) -> float:
    """``max_t ||e_t||`` for one simulated DP run on fresh synthetic data."""
    from .data import synth_continuous
    from .protocol import DpConfig, noise_error, simulate_protocol

    ds = synth_continuous(n, d, seed=[seed, 7])
    XA, XB = ds.features(0), ds.features(1)
    sched = make_schedule(n, s, math.ceil(T * s / n), [seed, 8]).truncated(T)
    _, tr = simulate_protocol(XA, XB, ds.y, sched, 0.01, np.zeros(d), DpConfig(sigma, sigma, True), noise_seed=seed)
    return float(np.max(np.linalg.norm(noise_error(tr, XA, XB), axis=1)))


@dataclass
class ErrorCheck:
    runs: int
    coverage: float
    u_noise: float
    max_norms: np.ndarray = field(repr=False)


def empirical_error_check(seeds, c: float | None = None, **ref) -> ErrorCheck:
    cfg = dict(ERROR_REFERENCE, **ref)
    delta = cfg.pop("delta")
    u = gradient_error_bound(cfg["sigma"], cfg["s"], cfg["T"], delta, c)
    norms = np.array([max_error_norm(sd, **cfg) for sd in seeds])
    return ErrorCheck(len(norms), float(np.mean(norms <= u)), u, norms)


def calibrate_error_constant(seeds, quantile: float | None = None, **ref) -> float:
    """Largest ``c`` covering all but a ``quantile`` fraction of calibration runs.

    Each run yields the ``c`` at which ``u_noise`` equals its observed maximum;
    the default quantile is ``delta / 2`` to leave room for held-out variation.
    """
    cfg = dict(ERROR_REFERENCE, **ref)
    delta = cfg.pop("delta")
    q = delta / 2 if quantile is None else quantile
    norms = np.array([max_error_norm(sd, **cfg) for sd in seeds])
    per_run = math.log(2 * cfg["T"] / delta) * cfg["sigma"] ** 2 / (cfg["s"] * norms**2)
    return float(np.quantile(per_run, q))


# Utility ---------------------------------------------------------------------

def utility_bound(C: float, G: float, u_noise: float, T: int, delta: float) -> float:
    """Excess-loss bound at ``eta = C / ((G + u) sqrt(T))``."""
    if C <= 0 or G <= 0 or T < 1:
        raise DefenseError("need C, G > 0 and T >= 1")
    with mpmath.workdps(PRECISION_DPS):
        C, G, u, T = (mpmath.mpf(v) for v in (C, G, u_noise, T))
        val = (G + u) * C / mpmath.sqrt(T) + (2 * G + u) * C * mpmath.sqrt(2 * mpmath.log(1 / mpmath.mpf(delta)) / T)
        return float(val)


def utility_step(C: float, G: float, u_noise: float, T: int) -> float:
    return C / ((G + u_noise) * math.sqrt(T))


@dataclass
class UtilityCheck:
    excess: float
    bound: float
    G: float
    C: float

    @property
    def ok(self) -> bool:
        return self.excess <= self.bound


def excess_loss_check(seed, T: int = 10_000, n: int = 256, d: int = 8, s: int = 16,
                      sigma: float = 0.0, delta: float = 0.05, G: float = 1.0) -> UtilityCheck:
    """Run noisy MGD on the surrogate loss and compare ``L(avg theta) - L(theta*)`` with the bound.

    ``theta*`` is the exact least-squares minimiser; ``C = ||theta*||`` with a
    zero start. Runs whose trajectory breaks the gradient bound ``G`` are
    reported through a larger measured ``G``.
    """
    from .data import synth_continuous
    from .model import surrogate_loss

    ds = synth_continuous(n, d, seed=[seed, 11])
    X, y = ds.X, ds.y
    theta_star = np.linalg.lstsq(X, 2 * y, rcond=None)[0]
    C = float(np.linalg.norm(theta_star))
    u = gradient_error_bound(sigma, s, T, delta) if sigma > 0 else 0.0
    eta = utility_step(C, G, u, T)
    sched = make_schedule(n, s, math.ceil(T * s / n), [seed, 12]).truncated(T)
    rng = np.random.default_rng([seed, 13])
    theta = np.zeros(d)
    total = np.zeros(d)
    worst = 0.0
    for t in range(T):
        b = sched.batches[t]
        xb = X[b]
        r = xb @ theta - 2 * y[b]
        grad = xb.T @ r / (4 * s)
        worst = max(worst, float(np.linalg.norm(grad)))
        if sigma > 0:
            grad = grad + xb.T @ rng.normal(0.0, sigma, s) / (4 * s)
        theta = theta - eta * grad
        total += theta
    avg = total / T
    excess = surrogate_loss(avg, X, y) - surrogate_loss(theta_star, X, y)
    G_used = max(G, worst)
    return UtilityCheck(excess, utility_bound(C, G_used, u, T, delta), G_used, C)


# Reports -----------------------------------------------------------------------

@dataclass
class BoundReport:
    sigma_A: float | None
    sigma_B: float | None
    T_eps: int
    T_tilde: int
    u_noise: float
    utility: float | None
    params: dict
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def bound_report(epsilon: float | None, delta: float, G: float, epochs: int, m: int, s: int, eta: float,
                 init_eps: float = 0.0, T_mode: str = "iterations", C: float | None = None) -> BoundReport:
    """All bounds for one configuration.

    ``T_mode="iterations"`` plugs ``T = epochs * m`` into the noise formula;
    ``"epochs"`` plugs ``T = epochs`` as the experiments section does.
    """
    if T_mode not in ("iterations", "epochs"):
        raise DefenseError("T_mode must be 'iterations' or 'epochs'")
    T = epochs * m if T_mode == "iterations" else epochs
    notes = ["heuristic calibration: sensitivity is estimated, not proven"]
    if T_mode == "epochs":
        notes.append("T set to the epoch count; the formula distinguishes epochs from iterations")
    sa = sb = None
    u = 0.0
    if epsilon is not None:
        sa, sb = calibrate_sigma(NoiseCalibration(epsilon, delta, G, epochs, T, s, eta))
        u = gradient_error_bound(max(sa, sb), s, epochs * m, delta)
    util = utility_bound(C, G, u, epochs * m, delta) if C else None
    return BoundReport(
        sigma_A=sa,
        sigma_B=sb,
        T_eps=horizon_passive(init_eps, eta),
        T_tilde=horizon_defended(init_eps, eta, u),
        u_noise=u,
        utility=util,
        params={"epsilon": epsilon, "delta": delta, "G": G, "epochs": epochs, "m": m, "s": s,
                "eta": eta, "T": T, "T_mode": T_mode, "init_eps": init_eps},
        notes=notes,
    )
