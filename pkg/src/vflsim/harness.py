"""Experiment runner and command-line entry point.

Configuration is a flat ``key = value`` file; every key is also a command-line
flag (``--frac-bits 24`` sets ``frac_bits``). Each output directory receives
``config.lock`` (the canonical resolved configuration), ``metrics.csv``,
``summary.csv`` and ``report.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks, crypto, data, defense, model, protocol
from .numeric import clip_norms

CSV_SCHEMA_VERSION = 1
METRIC_COLUMNS = (
    "schema", "seed", "epoch", "iterations", "train_acc", "test_acc", "theta_norm",
    "label_step_acc", "label_cum_acc", "T_eps", "T_tilde", "sigma_A", "sigma_B", "wall_time",
)
SUMMARY_METRICS = ("train_acc", "test_acc", "theta_norm", "label_step_acc", "label_cum_acc")
DATASETS = ("mnist", "credit", "synthetic")
ATTACKS = ("none", "label", "coefficients", "feature")
INITS = ("zero", "xavier", "kaiming", "gaussian")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    credit_path: str = ""
    synth_n: int = 1024
    synth_d: int = 32
    split: str = ""
    subsample: int = 2048
    scheme: str = "taylor1"
    init: str = "zero"
    sigma0: float | None = None
    s: int = 64
    eta: float = 0.01
    epochs: int = 30
    seeds: str = "0,1,2,3,4"
    dp: bool = False
    epsilon: float = 0.5
    delta: float = 0.1
    G: float = 1.0
    T_mode: str = "iterations"
    attack: str = "label"
    backend: str = "plain"
    kappa: int = 1024
    iota: int = 64
    frac_bits: int = 24
    save_transcripts: bool = False

    @property
    def seed_list(self) -> list[int]:
        return [int(v) for v in self.seeds.split(",") if v.strip()]

    @property
    def split_dims(self) -> tuple[int, ...] | None:
        return tuple(int(v) for v in self.split.split(",")) if self.split.strip() else None

    def codec(self) -> crypto.FixedPointCodec:
        return crypto.FixedPointCodec(self.iota, self.frac_bits)

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "credit" and not self.credit_path:
            raise ConfigError("dataset=credit needs credit_path")
        try:
            scheme = model.ApproxScheme(self.scheme)
        except ValueError:
            raise ConfigError(f"unknown scheme {self.scheme!r}") from None
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if self.backend not in ("plain", "paillier"):
            raise ConfigError("backend must be 'plain' or 'paillier'")
        if self.s < 1 or self.epochs < 1 or self.eta <= 0:
            raise ConfigError("s and epochs must be positive and eta > 0")
        if not self.seed_list:
            raise ConfigError("at least one seed is required")
        if self.split_dims is not None and len(self.split_dims) != 2:
            raise ConfigError("the harness runs two-party experiments; split must be 'd_A,d_B'")
        if self.subsample < 0:
            raise ConfigError("subsample must be >= 0 (0 keeps the full training set)")
        if scheme is not model.ApproxScheme.TAYLOR1 and (self.dp or self.backend == "paillier"):
            raise ConfigError("dp and the paillier backend require scheme=taylor1")
        if self.dp:
            if not 0 < self.epsilon <= 1 or not 0 < self.delta < 1:
                raise ConfigError("need 0 < epsilon <= 1 and 0 < delta < 1")
            if self.G <= 0.5:
                raise ConfigError("G must exceed 1/2")
            if self.eta > 1:
                raise ConfigError("dp calibration requires eta <= 1")
            if self.T_mode not in ("iterations", "epochs"):
                raise ConfigError("T_mode must be 'iterations' or 'epochs'")
        if self.backend == "paillier":
            if self.kappa not in crypto.SUPPORTED_KAPPA:
                raise ConfigError(f"kappa must be one of {crypto.SUPPORTED_KAPPA}")
            try:
                codec = self.codec()
            except crypto.CryptoError as exc:
                raise ConfigError(str(exc)) from None
            if not codec.accumulation_ok(self.s):
                raise ConfigError(f"codec iota={self.iota}, frac_bits={self.frac_bits} overflows at s={self.s}")
            if 2 * self.iota + 16 > self.kappa:
                raise ConfigError("kappa too small for the codec word size")
        return self

    def lock_text(self) -> str:
        rows = [f"{k} = {_format(v)}" for k, v in sorted(dataclasses.asdict(self).items())]
        return "\n".join(rows) + "\n"


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    default = fields[name].default
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or name == "sigma0":
            return None if text.lower() == "none" else float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        out[key.strip()] = _parse_value(key.strip(), value)
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return ExperimentConfig(**values).validate()


# Running ------------------------------------------------------------------------

@functools.lru_cache(maxsize=2)
def _mnist(root: str) -> data.VerticalDataset:
    return data.load_mnist_binary(root or None)


def load_experiment_data(cfg: ExperimentConfig, seed: int) -> data.VerticalDataset:
    if cfg.dataset == "mnist":
        ds = _mnist(cfg.data_dir)
    elif cfg.dataset == "credit":
        ds = data.load_credit(cfg.credit_path, seed=seed)
    else:
        ds = data.synth_continuous(cfg.synth_n, cfg.synth_d, seed=seed, n_test=max(1, cfg.synth_n // 4))
    if cfg.subsample and cfg.subsample < ds.n:
        ds = ds.subsample(cfg.subsample, seed)
    if cfg.split_dims is not None:
        ds = ds.with_split(data.SplitSpec(cfg.split_dims))
    if ds.n % cfg.s:
        # Batches must partition each epoch; drop a seeded remainder of n mod s rows.
        keep = ds.n - ds.n % cfg.s
        if keep == 0:
            raise ConfigError(f"batch size {cfg.s} exceeds n = {ds.n}")
        ds = ds.subsample(keep, [seed, 3])
    return ds


def noise_levels(cfg: ExperimentConfig, m: int) -> tuple[float, float]:
    if not cfg.dp:
        return 0.0, 0.0
    T = cfg.epochs * m if cfg.T_mode == "iterations" else cfg.epochs
    cal = defense.NoiseCalibration(cfg.epsilon, cfg.delta, cfg.G, cfg.epochs, T, cfg.s, cfg.eta)
    return defense.calibrate_sigma(cal)


@dataclass
class SeedRun:
    seed: int
    rows: list
    step_accuracy: np.ndarray
    sigma: tuple
    horizons: tuple
    trajectory: model.Trajectory | None = field(default=None, repr=False)
    transcript: protocol.Transcript | None = field(default=None, repr=False)
    dataset: data.VerticalDataset | None = field(default=None, repr=False)

    def light(self) -> "SeedRun":
        return SeedRun(self.seed, self.rows, self.step_accuracy, self.sigma, self.horizons)


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedRun:
    """Train one seed, replay the chosen attack and emit one row per epoch."""
    start = time.perf_counter()
    ds = load_experiment_data(cfg, seed)
    dA = ds.split.dims[0]
    XA, XB = ds.features(0), ds.features(1)
    theta0 = model.init_theta(cfg.init, ds.d, seed=[seed, 1], sigma0=cfg.sigma0)
    sched = model.make_schedule(ds.n, cfg.s, cfg.epochs, [seed, 2])
    sigma_A, sigma_B = noise_levels(cfg, sched.m)
    dp = protocol.DpConfig(sigma_A, sigma_B, cfg.dp)
    ctx = protocol.ProtocolContext.create(cfg.kappa, seed, cfg.codec()) if cfg.backend == "paillier" else None
    traj, tr = protocol.train_encrypted(XA, XB, ds.y, sched, cfg.eta, theta0, dp=dp, ctx=ctx,
                                        scheme=cfg.scheme, backend=cfg.backend, noise_seed=seed)
    tr.meta.update(seed=seed, dataset=cfg.dataset)

    init_eps = float(np.max(np.abs(ds.X @ theta0)))
    T_eps = defense.horizon_passive(init_eps, cfg.eta) if init_eps < 2 else 0
    u = defense.gradient_error_bound(max(sigma_A, sigma_B), cfg.s, sched.T, cfg.delta) if cfg.dp else 0.0
    T_tilde = defense.horizon_defended(init_eps, cfg.eta, u) if init_eps < 2 else 0

    step = np.full(sched.T, np.nan)
    if cfg.attack == "label":
        est = attacks.label_attack_passive(attacks.party_views(tr, "B"), XB, cfg.scheme)
        step = est.step_accuracy(ds.y)
    elif cfg.attack == "coefficients":
        ests = attacks.coefficient_stream(attacks.party_views(tr, "A"), XA, ds.y)
        truth = tr.side("gB")
        step = np.array([np.max(np.abs(e.counterpart - g)) if e.counterpart is not None else np.nan
                         for e, g in zip(ests, truth)])

    rows = []
    elapsed = time.perf_counter() - start
    for epoch in range(1, cfg.epochs + 1):
        t = epoch * sched.m
        theta = traj.thetas[t]
        window = step[(epoch - 1) * sched.m : t]
        rows.append({
            "schema": CSV_SCHEMA_VERSION,
            "seed": seed,
            "epoch": epoch,
            "iterations": t,
            "train_acc": model.accuracy(theta, ds.X, ds.y),
            "test_acc": model.accuracy(theta, ds.X_test, ds.y_test) if ds.X_test is not None else math.nan,
            "theta_norm": float(np.linalg.norm(theta)),
            "label_step_acc": attacks.nan_mean(window) if cfg.attack == "label" else math.nan,
            "label_cum_acc": attacks.nan_mean(step[:t]) if cfg.attack == "label" else math.nan,
            "T_eps": T_eps,
            "T_tilde": T_tilde,
            "sigma_A": sigma_A,
            "sigma_B": sigma_B,
            "wall_time": elapsed,
        })
    return SeedRun(seed, rows, step, (sigma_A, sigma_B), (T_eps, T_tilde), traj, tr, ds)


def _run_light(cfg: ExperimentConfig, seed: int) -> SeedRun:
    run = run_seed(cfg, seed)
    if cfg.save_transcripts:
        return dataclasses.replace(run.light(), transcript=run.transcript)
    return run.light()


def _json_float(v):
    v = float(v)
    return None if math.isnan(v) else v


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and standard error across seeds for every epoch."""
    by_epoch: dict[int, list[dict]] = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(r)
    out = []
    for epoch in sorted(by_epoch):
        group = by_epoch[epoch]
        rec = {"schema": CSV_SCHEMA_VERSION, "epoch": epoch, "seeds": len(group)}
        for key in SUMMARY_METRICS:
            vals = np.array([float(r[key]) for r in group])
            rec[f"{key}_mean"] = float(np.mean(vals))
            rec[f"{key}_stderr"] = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(rec)
    return out


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentResult:
    runs: list[SeedRun]
    rows: list[dict]
    summary: list[dict]
    report: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, keep_runs: bool = False) -> ExperimentResult:
    cfg.validate()
    seeds = cfg.seed_list
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_light, [cfg] * len(seeds), seeds))
    else:
        runs = [run_seed(cfg, sd) if keep_runs else _run_light(cfg, sd) for sd in seeds]
    rows = [r for run in runs for r in run.rows]
    summary = summarize(rows)
    final = [run.rows[-1] for run in runs]
    report = {
        "schema": CSV_SCHEMA_VERSION,
        "seeds": seeds,
        "final_test_acc_mean": float(np.mean([r["test_acc"] for r in final])),
        "final_train_acc_mean": float(np.mean([r["train_acc"] for r in final])),
        "sigma_A": runs[0].sigma[0],
        "sigma_B": runs[0].sigma[1],
        "T_eps": runs[0].horizons[0],
        "T_tilde": runs[0].horizons[1],
        "notes": ["heuristic calibration"] if cfg.dp else [],
    }
    if cfg.attack == "label":
        T0 = runs[0].horizons[0]
        within = [attacks.nan_mean(r.step_accuracy[:T0]) for r in runs] if T0 else []
        report["label_acc_within_T_eps"] = _json_float(np.mean(within)) if within else None
        report["label_acc_overall"] = _json_float(np.mean([attacks.nan_mean(r.step_accuracy) for r in runs]))
        unsolved = sum(int(np.sum(np.isnan(r.step_accuracy))) for r in runs)
        if unsolved:
            report["notes"].append(f"{unsolved} steps had an underdetermined gradient system (s > rank of own features)")
    if cfg.dp and cfg.T_mode == "epochs":
        report["notes"].append("T set to the epoch count; the formula distinguishes epochs from iterations")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.lock").write_text(cfg.lock_text())
        write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
        write_csv(out / "summary.csv", summary, list(summary[0]))
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        for run in runs:
            if cfg.save_transcripts and run.transcript is not None:
                (out / f"transcript-seed{run.seed}.bin").write_bytes(run.transcript.to_bytes())
    return ExperimentResult(runs, rows, summary, report)


# Attack replay --------------------------------------------------------------------

def attack_transcript(cfg: ExperimentConfig, transcript: protocol.Transcript) -> attacks.AttackReport:
    """Replay the configured attack on a saved transcript."""
    seed = int(transcript.meta.get("seed", cfg.seed_list[0]))
    ds = load_experiment_data(cfg, seed)
    XA, XB = ds.features(0), ds.features(1)
    m = ds.n // int(transcript.meta["s"])
    if cfg.attack == "label":
        first = transcript.record(1)
        theta0 = np.concatenate([first["A:theta"], first["B:theta"]])
        init_eps = float(np.max(np.abs(ds.X @ theta0)))
        est = attacks.label_attack_passive(attacks.party_views(transcript, "B"), XB, cfg.scheme)
        report = attacks.label_report(est, ds.y, m)
        report.metrics["init_eps"] = init_eps
        report.metrics["T_eps"] = defense.horizon_passive(init_eps, cfg.eta) if init_eps < 2 else 0
        return report
    if cfg.attack == "coefficients":
        if not transcript.side_channel:
            raise ConfigError("coefficient evaluation needs a transcript with the side channel")
        ests = attacks.coefficient_stream(attacks.party_views(transcript, "A"), XA, ds.y)
        return attacks.coefficient_report(ests, transcript.side("gB"), "coefficients_A")
    if cfg.attack == "feature":
        if ds.split.dims[1] != 1:
            raise ConfigError("feature attack needs d_B = 1; set split accordingly")
        rec = attacks.feature_attack_1d(attacks.party_views(transcript, "A"), XA, ds.y)
        err = rec.relative_error(XB[:, 0]) if rec.status == "complete" else math.inf
        return attacks.AttackReport("feature_1d", {"status": rec.status, "relative_error": err},
                                    {"sortable_sets": np.array(rec.state.history)})
    raise ConfigError("attack=none: nothing to replay")


# Verification suites ---------------------------------------------------------------

class _CorruptCodec(crypto.FixedPointCodec):
    """Flips a low bit on every decode; used to prove the equivalence suite has teeth."""

    def to_signed(self, word: int) -> int:
        return super().to_signed(word) ^ (1 << 12)


def _suite_protocol(inject: bool = False) -> tuple[bool, str]:
    ds = data.synth_continuous(64, 8, seed=0)
    sched = model.make_schedule(64, 8, 1, 0).truncated(4)
    codec = _CorruptCodec() if inject else crypto.FixedPointCodec()
    ctx = protocol.ProtocolContext.create(512, 0, codec)
    traj, _ = protocol.train_encrypted(ds.features(0), ds.features(1), ds.y, sched, 0.5, np.zeros(8), ctx=ctx)
    ref = model.train_plaintext("taylor1", ds.X, ds.y, sched, 0.5, np.zeros(8))
    err = float(np.max(np.abs(traj.thetas - ref.thetas)))
    tol = 2.0 ** (-codec.frac_bits + 6) * sched.T
    return err <= tol, f"max trajectory error {err:.3g} (tolerance {tol:.3g})"


def _suite_packing() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    iota, u, dA = 64, 31, 3
    vals = [int(v) for v in rng.integers(0, 2**62, u * dA)]
    ok = crypto.unpack(crypto.pack(vals, dA, u, iota, 2048), dA, u, iota) == vals
    return ok and crypto.max_pack_factor(2048, 64) == 31, "pack/unpack round trip at u=31"


def _suite_sensitivity() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    X = clip_norms(rng.standard_normal((4, 4)), axis=1)
    y = rng.choice([-1.0, 1.0], 4)
    reps = [(clip_norms(rng.standard_normal(4), axis=0), float(rng.choice([-1.0, 1.0]))) for _ in range(5)]
    sched = model.make_schedule(4, 2, 2, 0)
    chk = defense.empirical_sensitivity_check(X, y, 2, reps, sched, 0.5)
    return chk.ok, f"{chk.pairs} pairs, worst distance/bound {chk.worst_ratio:.3f}"


def _suite_sortability() -> tuple[bool, str]:
    m, s, trials = 8, 4, 400
    limit = int(math.floor(math.log2(m))) + 1
    hits = sum((attacks.sortability_epochs(m * s, s, limit, sd) or limit + 1) <= limit for sd in range(trials))
    need = 1 - 2 / m ** (s - 1)
    return hits / trials >= need, f"{hits}/{trials} sortable within {limit} epochs (need {need:.4f})"


def _suite_horizon() -> tuple[bool, str]:
    ok = defense.horizon_passive(0, 1) == 4 and defense.horizon_passive(0, 0.01) == 278
    ok &= defense.horizon_defended(0, 0.01, 1) == 116
    return ok, "T(1, 0)=4, T(0.01, 0)=278, T~(0.01, 0, 1)=116"


VERIFY_SUITES = {
    "protocol": _suite_protocol,
    "packing": _suite_packing,
    "sensitivity": _suite_sensitivity,
    "sortability": _suite_sortability,
    "horizon": _suite_horizon,
}


def verify(suite: str = "all", inject: bool = False) -> dict[str, tuple[bool, str]]:
    names = list(VERIFY_SUITES) if suite == "all" else [suite]
    out = {}
    for name in names:
        if name not in VERIFY_SUITES:
            raise ConfigError(f"unknown suite {name!r}; choose from {sorted(VERIFY_SUITES)}")
        fn = VERIFY_SUITES[name]
        out[name] = fn(inject) if name == "protocol" else fn()
    return out


# Figures -------------------------------------------------------------------------

def render_report(out_dir) -> list[Path]:
    """Render PNG figures next to ``metrics.csv`` (and refresh ``summary.csv``)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    rows = read_csv(out / "metrics.csv")
    if not rows:
        raise ConfigError("metrics.csv holds no rows")
    summary = summarize(rows)
    write_csv(out / "summary.csv", summary, list(summary[0]))
    epochs = [r["epoch"] for r in summary]
    paths = []

    def band(ax, key, label):
        mean = np.array([r[f"{key}_mean"] for r in summary])
        err = np.array([r[f"{key}_stderr"] for r in summary])
        ax.plot(epochs, mean, label=label)
        ax.fill_between(epochs, mean - err, mean + err, alpha=0.25)

    figures = {
        "accuracy.png": ([("train_acc", "train"), ("test_acc", "test")], "accuracy"),
        "label_attack.png": ([("label_step_acc", "per epoch"), ("label_cum_acc", "cumulative")], "label attack success"),
        "theta_norm.png": ([("theta_norm", "||theta||")], "parameter norm"),
    }
    for name, (series, ylabel) in figures.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for key, label in series:
            band(ax, key, label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        paths.append(out / name)
    return paths


# CLI -----------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    for f in dataclasses.fields(ExperimentConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")
    p.add_argument("--full", action="store_true", help="use the full training set (subsample = 0)")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = _parse_value(f.name, raw)
    if args.full:
        overrides["subsample"] = 0
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vflsim", description="Encrypted vertical logistic regression simulator")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train, replay the configured attack, write metrics")
    _add_config_flags(tr)
    tr.add_argument("--out", required=True)
    tr.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")

    at = sub.add_parser("attack", help="replay an attack on a saved transcript")
    _add_config_flags(at)
    at.add_argument("--transcript", required=True)
    at.add_argument("--out", required=True)

    ca = sub.add_parser("calibrate", help="noise levels, horizons and bounds")
    _add_config_flags(ca)
    ca.add_argument("--out")
    ca.add_argument("--C", type=float, help="distance to the optimum for the utility bound")

    ve = sub.add_parser("verify", help="run property suites")
    ve.add_argument("suite", nargs="?", default="all")
    ve.add_argument("--inject-codec-fault", action="store_true")

    rp = sub.add_parser("report", help="render figures from an output directory")
    rp.add_argument("out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, data.DataError, defense.DefenseError, crypto.CryptoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "verify":
        results = verify(args.suite, args.inject_codec_fault)
        for name, (ok, detail) in results.items():
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return 0 if all(ok for ok, _ in results.values()) else 1
    if args.command == "report":
        for path in render_report(args.out):
            print(path)
        return 0
    cfg = _config_from_args(args)
    if args.command == "train":
        res = run_experiment(cfg, args.out, jobs=args.jobs)
        print(json.dumps(res.report, indent=2, sort_keys=True))
        return 0
    if args.command == "attack":
        tr = protocol.Transcript.from_bytes(Path(args.transcript).read_bytes())
        report = attack_transcript(cfg, tr)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.lock").write_text(cfg.lock_text())
        (out / "report.json").write_text(report.to_json())
        curves = {k: v for k, v in report.to_dict()["curves"].items() if isinstance(v, list)}
        if curves:
            length = max(len(v) for v in curves.values())
            rows = [{"schema": CSV_SCHEMA_VERSION, "index": i + 1,
                     **{k: (v[i] if i < len(v) else "") for k, v in curves.items()}} for i in range(length)]
            write_csv(out / "metrics.csv", rows, ["schema", "index", *curves])
        print(report.to_json())
        return 0
    if args.command == "calibrate":
        ds = load_experiment_data(cfg, cfg.seed_list[0])
        rep = defense.bound_report(cfg.epsilon if cfg.dp else None, cfg.delta, cfg.G, cfg.epochs,
                                   ds.n // cfg.s, cfg.s, cfg.eta, T_mode=cfg.T_mode, C=args.C)
        text = rep.to_json()
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.lock").write_text(cfg.lock_text())
            (out / "report.json").write_text(text)
        print(text)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
