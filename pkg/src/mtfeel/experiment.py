"""Experiment configuration, runs, sweeps and CSV artifacts.

A configuration is a nested mapping (YAML on disk).  Every key has a
default, so an empty file is a valid configuration: it runs the 9-device
synthetic desk cohort.  See README.md for the full key list.
"""
from __future__ import annotations

import copy
import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .channel import ChannelConfig, db_to_linear
from .data import CohortSpec, FederationData, desk_cohorts, load_idx, mnist_cohorts, partition_mnist, synth_cohorts
from .discrepancy import DdeConfig, dde_run, save_discrepancy_csv
from .nn import LossSpec, architecture, param_count
from .objective import PenaltyConfig
from .train import ALGORITHMS, SCHEDULES, TrainConfig, baseline_train, mtfeel_train

OUT_ENV = "MTFEEL_OUT"
PRESETS = ("desk-cohort", "paper-fig2", "paper-fig4a", "paper-fig4b")
SWEEP_AXES = ("snr_db", "flip_p", "rounds_T")
METRIC_COLUMNS = ("round", "algorithm", "mean_train_acc", "mean_test_acc", "objective",
                  "w_drift", "alpha_drift", "mean_delta", "outages")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synth"          # synth | idx
    images: str = ""
    labels: str = ""
    cohorts: object = "desk"       # desk | mnist | list of cohort mappings
    devices_per_cohort: int = 3    # only for cohorts: desk
    samples_per_device: int = 100
    train_fraction: float = 0.2
    d_in: int = 20
    separation: float = 4.0
    spread: float = 0.8
    n_classes: int = 10


@dataclass
class TrainSection:
    rounds: int = 300
    eta: float = 0.3
    mu: float = 0.5
    batch_size: int = 20
    batch_equals_rounds: bool = False
    local_epochs: int = 5
    lr_schedule: str = "inv_sqrt_t"
    hidden: list = field(default_factory=lambda: [32])
    activation: str = "relu"
    diagnostics: bool = True
    baseline_eta: dict = field(default_factory=lambda: {
        "local": 0.3, "fedsgd": 0.3, "fedavg": 0.1, "sign_fedsgd": 0.003})
    baseline_schedule: str = "constant"


@dataclass
class PenaltySection:
    bound_M: float = 10.0
    delta: float = 0.05
    log_cover: float = 2.0
    gamma: float = 0.0


@dataclass
class DdeSection:
    iterations: int = 200
    eta: float = 0.01
    init_std: float = 0.01


@dataclass
class ChannelSection:
    mode: str = "perfect"
    snr_db: float = 0.0
    bandwidth: float = 1.0
    payload_ratio: float | None = None   # d / B; overrides bandwidth when set
    payload_bits: int | None = None
    flip_p: float = 0.0


@dataclass
class SweepSection:
    axis: str = "snr_db"
    values: list = field(default_factory=lambda: [-20.0, -10.0, 0.0, 10.0])


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = ""
    algorithms: list = field(default_factory=lambda: ["mtfeel", "local", "fedsgd", "fedavg"])
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)
    dde: DdeSection = field(default_factory=DdeSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"algorithms must be a non-empty subset of {ALGORITHMS}, got {self.algorithms}")
        if self.data.source not in ("synth", "idx"):
            raise ConfigError("data.source must be 'synth' or 'idx'")
        if self.data.source == "idx" and not (self.data.images and self.data.labels):
            raise ConfigError("data.source=idx needs data.images and data.labels")
        if self.train.lr_schedule not in SCHEDULES or self.train.baseline_schedule not in SCHEDULES:
            raise ConfigError(f"schedules must be one of {SCHEDULES}")
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        if self.channel.payload_ratio is not None and not self.channel.payload_ratio > 0:
            raise ConfigError("channel.payload_ratio must be positive")
        try:
            self.train_config("mtfeel")
            self.channel_config(1)
            self.dde_config()
            self.cohort_specs()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- typed views -------------------------------------------------------

    def cohort_specs(self):
        d = self.data
        if d.cohorts == "desk":
            return desk_cohorts(d.devices_per_cohort, d.samples_per_device, d.train_fraction)
        if d.cohorts == "mnist":
            return mnist_cohorts(d.samples_per_device, d.train_fraction)
        if not isinstance(d.cohorts, list):
            raise ConfigError("data.cohorts must be 'desk', 'mnist' or a list")
        specs = []
        for c in d.cohorts:
            c = dict(c)
            specs.append(CohortSpec(str(c.pop("name")), int(c.pop("devices")), tuple(c.pop("labels")),
                                    int(c.pop("samples", d.samples_per_device)),
                                    float(c.pop("train_fraction", d.train_fraction))))
            if c:
                raise ConfigError(f"unknown cohort keys {sorted(c)}")
        return specs

    def train_config(self, algorithm: str) -> TrainConfig:
        t = self.train
        base = dict(rounds=t.rounds, mu=t.mu, batch_size=t.batch_size,
                    batch_equals_rounds=t.batch_equals_rounds, local_epochs=t.local_epochs,
                    seed=self.seed, hidden=tuple(t.hidden), activation=t.activation,
                    diagnostics=t.diagnostics)
        if algorithm == "mtfeel":
            return TrainConfig(eta=t.eta, lr_schedule=t.lr_schedule, **base)
        return TrainConfig(eta=float(t.baseline_eta.get(algorithm, t.eta)),
                           lr_schedule=t.baseline_schedule, **base)

    def channel_config(self, model_dim: int) -> ChannelConfig:
        c = self.channel
        payload = c.payload_bits if c.payload_bits is not None else model_dim
        bandwidth = c.bandwidth
        if c.payload_ratio is not None:
            bandwidth = max(payload, 1) / c.payload_ratio
        return ChannelConfig(mode=c.mode, snr_linear=db_to_linear(c.snr_db), bandwidth=bandwidth,
                             payload_bits=c.payload_bits, flip_p=c.flip_p, seed=self.seed)

    def dde_config(self) -> DdeConfig:
        return DdeConfig(iterations=self.dde.iterations, eta=self.dde.eta,
                         init_seed=self.seed, init_std=self.dde.init_std)

    def loss_spec(self) -> LossSpec:
        return LossSpec(bound_M=self.penalty.bound_M)


def _merge(dc, mapping: dict, path: str = ""):
    """Overlay ``mapping`` onto dataclass instance ``dc``; unknown keys are errors."""
    if mapping is None:
        return dc
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(dc)}
    updates = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        current = getattr(dc, key)
        if hasattr(current, "__dataclass_fields__"):
            updates[key] = _merge(current, value, f"{path}{key}.")
        else:
            updates[key] = value
    return replace(dc, **updates)


def config_from_dict(mapping: dict | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = copy.deepcopy(base) if base is not None else ExperimentConfig()
    return _merge(base, mapping or {})


def load_config(path=None, preset: str | None = None) -> ExperimentConfig:
    """Preset (if any) overlaid with the YAML file at ``path`` (if any)."""
    cfg = ExperimentConfig()
    if preset:
        cfg = config_from_dict(preset_dict(preset), cfg)
    if path:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = config_from_dict(raw, cfg)
    return cfg


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("mtfeel.presets").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text) or {}


def apply_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """``apply_override(cfg, "train.rounds", 10)``"""
    tree: dict = {}
    node = tree
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return config_from_dict(tree, cfg)


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "runs")


# ---------------------------------------------------------------------------
# running


def build_data(cfg: ExperimentConfig) -> FederationData:
    d = cfg.data
    specs = cfg.cohort_specs()
    if d.source == "synth":
        return synth_cohorts(specs, d.d_in, seed=cfg.seed, n_classes=d.n_classes,
                             separation=d.separation, spread=d.spread)
    X, y = load_idx(d.images, d.labels)
    return partition_mnist(X, y, specs, seed=cfg.seed, n_classes=d.n_classes)


@dataclass
class RunResult:
    out_dir: Path
    data: FederationData
    dhat: np.ndarray | None
    histories: dict
    states: dict
    seconds: float = 0.0

    def final(self, algorithm: str):
        return self.histories[algorithm][-1]


def _metric_row(m) -> list:
    return [m.round, m.algorithm, repr(m.mean_train_acc), repr(m.mean_test_acc), repr(m.objective),
            repr(m.w_drift), repr(m.alpha_drift), repr(m.mean_delta), m.outages]


def write_metrics_csv(path, histories: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for hist in histories.values():
            for m in hist:
                w.writerow(_metric_row(m))


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round"] = int(r["round"])
        r["outages"] = int(r["outages"])
        for k in METRIC_COLUMNS[2:-1]:
            r[k] = float(r[k])
    return rows


def write_matrix_csv(path, matrix):
    save_discrepancy_csv(path, matrix)


def snapshot_yaml(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    yaml.safe_dump(cfg.to_dict(), buf, sort_keys=True)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, data: FederationData | None = None,
                   write: bool = True) -> RunResult:
    """Run every configured algorithm and write the CSV artifacts.

    Writes ``metrics.csv``, ``discrepancy.csv`` and ``alpha_final.csv`` (when
    MtFEEL is among the algorithms) and ``config.yaml`` (resolved config).
    """
    cfg.validate()
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.out or default_out_dir())
    data = data or build_data(cfg)
    loss = cfg.loss_spec()
    dims = architecture(data.d_in, data.n_classes, tuple(cfg.train.hidden))
    channel = cfg.channel_config(param_count(dims))

    dhat = None
    if "mtfeel" in cfg.algorithms:
        dhat = dde_run(data, cfg.dde_config(), loss, hidden=tuple(cfg.train.hidden),
                       activation=cfg.train.activation)

    histories, states = {}, {}
    for algo in cfg.algorithms:
        tcfg = cfg.train_config(algo)
        if algo == "mtfeel":
            pen = PenaltyConfig.uniform(data.train_counts, gamma=np.full(data.N, cfg.penalty.gamma),
                                        bound_M=cfg.penalty.bound_M, delta=cfg.penalty.delta,
                                        log_cover=cfg.penalty.log_cover)
            states[algo], histories[algo] = mtfeel_train(data, dhat, tcfg, pen, channel, loss)
        else:
            states[algo], histories[algo] = baseline_train(algo, data, tcfg, channel, loss)

    result = RunResult(out, data, dhat, histories, states, time.perf_counter() - t0)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", histories)
        if dhat is not None:
            write_matrix_csv(out / "discrepancy.csv", dhat)
            write_matrix_csv(out / "alpha_final.csv", states["mtfeel"].alpha)
        (out / "config.yaml").write_text(snapshot_yaml(replace(cfg, out=str(out))))
    return result


def run_dde(cfg: ExperimentConfig, out_dir=None) -> np.ndarray:
    cfg.validate()
    out = Path(out_dir or cfg.out or default_out_dir())
    data = build_data(cfg)
    dhat = dde_run(data, cfg.dde_config(), cfg.loss_spec(), hidden=tuple(cfg.train.hidden),
                   activation=cfg.train.activation)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "discrepancy.csv", dhat)
    (out / "config.yaml").write_text(snapshot_yaml(replace(cfg, out=str(out))))
    return dhat


def sweep_point(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "snr_db":
        cfg = apply_override(cfg, "channel.mode", "rayleigh")
        return apply_override(cfg, "channel.snr_db", float(value))
    if axis == "flip_p":
        cfg = apply_override(cfg, "channel.mode", "bitflip")
        return apply_override(cfg, "channel.flip_p", float(value))
    if axis == "rounds_T":
        return apply_override(cfg, "train.rounds", int(value))
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")


def _sweep_job(args):
    cfg, axis, value, out = args
    res = run_experiment(sweep_point(cfg, axis, value), out_dir=out)
    return value, {a: (h[-1].mean_test_acc, h[-1].mean_train_acc) for a, h in res.histories.items()}


def sweep(cfg: ExperimentConfig, axis: str | None = None, values=None, out_dir=None,
          parallel: bool = False) -> Path:
    """One run per axis value; writes ``sweep.csv`` with final accuracies."""
    axis = axis or cfg.sweep.axis
    values = list(cfg.sweep.values if values is None else values)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values or not all(np.isfinite(float(v)) for v in values):
        raise ConfigError("sweep values must be finite")
    cfg.validate()
    out = Path(out_dir or cfg.out or default_out_dir())
    jobs = [(cfg, axis, v, out / f"{axis}={v}") for v in values]
    if parallel:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "algorithm", "final_test_acc", "final_train_acc"])
        for value, accs in results:
            for algo, (te, tr) in accs.items():
                w.writerow([axis, value, algo, repr(te), repr(tr)])
    return path


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
        r["final_test_acc"] = float(r["final_test_acc"])
        r["final_train_acc"] = float(r["final_train_acc"])
    return rows
