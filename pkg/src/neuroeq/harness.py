"""Experiment orchestration: config files, curve CSVs, reference overlays and runs."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .channel import BOUNDARY_TAPS, NONLINEARITIES, PAPER_TAPS, SNR_CONVENTIONS, ChannelSpec, SnrPoint, apply_nonlinearity, sigma_from_snr
from .classic import map_ber_baseline
from .models import (
    PAPER_CNN,
    PAPER_DNN,
    CnnDetector,
    CnnNndSystem,
    CnnScSystem,
    NetworkSpec,
    TrainingConfig,
    joint_finetune,
    train_cnn_equalizer,
    train_nnd_awgn,
)
from .montecarlo import BerRecord, evaluate_ber
from .nn import Network, StateError, save_checkpoint
from .polar import PolarCode

log = logging.getLogger(__name__)

EXPERIMENTS = ("fig2_sweep", "fig3_linear", "fig5_nonlinear", "fig6_joint", "boundary")
REFERENCE_FILE = "reference_curves.csv"
REFERENCE_SHA256 = "32445731bddbe86eb0af0182daa18305ac66ae92d66c0fbb0cd658b0b7c925fd"
SWEEP_STRUCTURES = (
    (8, 16, 8, 1),
    (16, 32, 16, 1),
    (32, 64, 32, 1),
    (4, 8, 16, 8, 4, 1),
    (8, 16, 32, 16, 8, 1),
    (6, 12, 24, 12, 6, 1),
)


class ConfigError(ValueError):
    pass


class ReferenceDataError(RuntimeError):
    pass


def _grid(lo: float, hi: float, step: float = 1.0) -> tuple[float, ...]:
    return tuple(float(x) for x in np.round(np.arange(lo, hi + step / 2, step), 10))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs; keys mirror the config file.

    ``snr_range`` is the training grid, ``test_snr_range`` the evaluation grid.
    """

    experiment: str = "fig3_linear"
    cnn_structure: tuple[int, ...] = PAPER_CNN
    dnn_structure: tuple[int, ...] = PAPER_DNN
    structures: tuple[tuple[int, ...], ...] = SWEEP_STRUCTURES
    kernel_size: int = 3
    snr_range: tuple[float, ...] = _grid(0, 11)
    test_snr_range: tuple[float, ...] = _grid(0, 8)
    training_samples_per_snr: int = 20
    testing_samples_per_snr: int = 50_000
    mini_batch_size: int = 240
    iterations: int = 5000
    learning_rate: float = 0.001
    weights_init: str = "he"
    channel_taps: tuple[float, ...] = PAPER_TAPS
    nonlinearity: str = "identity"
    snr_convention: str = "es_n0"
    code_n: int = 16
    code_k: int = 8
    coded: bool = True
    frame_len: int = 16
    tail: bool = True
    random_history: bool = False
    pilot_lengths: tuple[int, ...] = (10, 20)
    nnd_iterations: int = 20_000
    finetune_iterations: int = 5000
    finetune_learning_rate: float = 0.0005
    freeze_cnn: bool = False
    boundary_range: float = 3.0
    boundary_step: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.snr_convention not in SNR_CONVENTIONS:
            raise ConfigError(f"unknown snr_convention {self.snr_convention!r}")
        if self.mini_batch_size != self.training_samples_per_snr * len(self.snr_range):
            raise ConfigError(
                f"mini_batch_size {self.mini_batch_size} must equal training_samples_per_snr "
                f"{self.training_samples_per_snr} x {len(self.snr_range)} SNR points"
            )
        if self.testing_samples_per_snr <= 0:
            raise ConfigError("testing_samples_per_snr must be positive")
        if self.weights_init != "he":
            try:
                float(self.weights_init)
            except ValueError:
                raise ConfigError(f"weights_init must be 'he' or a number, got {self.weights_init!r}") from None

    @property
    def init_std(self) -> float | str:
        return "he" if self.weights_init == "he" else float(self.weights_init)

    def channel(self) -> ChannelSpec:
        return ChannelSpec(self.channel_taps, self.nonlinearity)

    def code(self) -> PolarCode:
        return PolarCode(self.code_n, self.code_k)

    def training(self, iterations: int | None = None) -> TrainingConfig:
        return TrainingConfig(
            snr_grid=self.snr_range,
            frames_per_snr=self.training_samples_per_snr,
            batch_size=self.mini_batch_size,
            iterations=self.iterations if iterations is None else iterations,
            learning_rate=self.learning_rate,
            seed=self.seed,
            frame_info_bits=self.code_k,
            convention=self.snr_convention,
            coded=self.coded,
            frame_len=self.frame_len,
            tail=self.tail,
            random_history=self.random_history,
            init_std=self.init_std,
            code=self.code(),
        )

    def cnn_spec(self, structure=None) -> NetworkSpec:
        return NetworkSpec("cnn", structure or self.cnn_structure, self.kernel_size)

    def to_text(self) -> str:
        """Canonical ``key = value`` form; parsing it gives back the same config."""
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


PRESETS: dict[str, dict] = {
    "fig2_sweep": {},
    "fig3_linear": {},
    "fig5_nonlinear": {
        "nonlinearity": "poly_cos_magnitude",
        "snr_convention": "eb_n0",
        "test_snr_range": _grid(2, 7),
    },
    "fig6_joint": {
        "nonlinearity": "poly_cos_magnitude",
        "snr_convention": "eb_n0",
        "test_snr_range": _grid(1, 11, 2),
    },
    "boundary": {
        "channel_taps": BOUNDARY_TAPS,
        "nonlinearity": "cubic",
        "snr_range": (1.0,),
        "test_snr_range": (1.0,),
        "training_samples_per_snr": 240,
        "coded": False,
        "frame_len": 2,
        "tail": False,
        "random_history": True,
    },
}


def default_config(experiment: str, **changes) -> ExperimentConfig:
    if experiment not in PRESETS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    return ExperimentConfig(experiment=experiment, **{**PRESETS[experiment], **changes})


# -- config text ---------------------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(_format_value(x) for x in v)
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    # "0:11" and "1:11:2" are inclusive ranges
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] <= 0):
            raise ValueError(f"bad range {text!r}")
        return _grid(*parts)
    return tuple(float(p) for p in text.split(",") if p.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace("{", "").replace("}", "").split(",") if p.strip())


_PARSERS = {
    "experiment": str,
    "cnn_structure": _parse_ints,
    "dnn_structure": _parse_ints,
    "structures": lambda t: tuple(_parse_ints(s) for s in t.split(";") if s.strip()),
    "snr_range": _parse_floats,
    "test_snr_range": _parse_floats,
    "channel_taps": _parse_floats,
    "pilot_lengths": _parse_ints,
    "nonlinearity": str,
    "snr_convention": str,
    "weights_init": str,
}


def _parse_value(key: str, text: str, kind):
    if key in _PARSERS:
        return _PARSERS[key](text)
    if kind is bool or kind == "bool":
        return _parse_bool(text)
    if kind is int or kind == "int":
        return int(text)
    return float(text)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(entries: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string entries on top of the experiment preset (or ``base``)."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(entries) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if base is None or "experiment" in entries:
        base = default_config(entries.get("experiment", base.experiment if base else "fig3_linear"))
    changes = {}
    for key, text in entries.items():
        try:
            changes[key] = _parse_value(key, text, types[key])
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    # keep the batch arithmetic consistent unless the file pins it
    if "mini_batch_size" not in changes and ({"snr_range", "training_samples_per_snr"} & set(changes)):
        grid = changes.get("snr_range", base.snr_range)
        per = changes.get("training_samples_per_snr", base.training_samples_per_snr)
        changes["mini_batch_size"] = per * len(grid)
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                experiment: str | None = None) -> ExperimentConfig:
    entries = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    if experiment:
        entries.setdefault("experiment", experiment)
    entries.update(overrides or {})
    return build_config(entries)


# -- CSV output ------------------------------------------------------------------


def _sci(x: float) -> str:
    return f"{x:.5e}"


def format_curve(records: list[BerRecord]) -> str:
    lines = ["snr_db,ber,ci"]
    for r in records:
        lines.append(f"{_sci(r.snr_db)},{_sci(r.ber)},{_sci(r.wilson95_halfwidth)}")
    return "\n".join(lines) + "\n"


def format_reference(points: list[tuple[float, float]]) -> str:
    lines = ["snr_db,ber,ci"]
    for snr, ber in points:
        lines.append(f"{_sci(snr)},{_sci(ber)},nan")
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_curve(path: str | Path, records: list[BerRecord]) -> None:
    _write(Path(path), format_curve(records))


def read_curve(path: str | Path) -> list[tuple[float, float, float]]:
    rows = Path(path).read_text().splitlines()
    if rows[0] != "snr_db,ber,ci":
        raise ValueError(f"{path}: not a curve file")
    return [tuple(float(x) for x in row.split(",")) for row in rows[1:]]


# -- reference overlays ------------------------------------------------------------


def load_reference_curves() -> dict[str, dict[str, list[tuple[float, float]]]]:
    """Transcribed curves per experiment id, after checking the file checksum."""
    raw = resources.files("neuroeq").joinpath("data", REFERENCE_FILE).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != REFERENCE_SHA256:
        raise ReferenceDataError(f"reference data checksum mismatch: {digest}")
    curves: dict[str, dict[str, list[tuple[float, float]]]] = {}
    lines = [ln for ln in raw.decode().splitlines() if ln and not ln.startswith("#")]
    for ln in lines[1:]:
        exp, curve, snr, ber = ln.split(",")
        curves.setdefault(exp, {}).setdefault(curve, []).append((float(snr), float(ber)))
    return curves


# -- experiments -------------------------------------------------------------------


def structure_label(structure) -> str:
    return "cnn_" + "-".join(str(m) for m in structure)


def train_cnn(config: ExperimentConfig, structure=None) -> Network:
    net, losses = train_cnn_equalizer(config.training(), config.channel(), config.cnn_spec(structure))
    log.info("trained %s: final loss %.5f", structure_label(structure or config.cnn_structure),
             float(np.mean(losses[-100:])) if losses else float("nan"))
    return net


def evaluate(system, config: ExperimentConfig, threads: int = 1, grid=None) -> list[BerRecord]:
    return evaluate_ber(
        system,
        config.channel(),
        config.test_snr_range if grid is None else grid,
        config.testing_samples_per_snr,
        convention=config.snr_convention,
        code=config.code(),
        seed=config.seed,
        threads=threads,
        frame_len=config.frame_len,
        tail=config.tail,
    )


def run_structure_sweep(config: ExperimentConfig, threads: int = 1):
    """Train every structure with the same seed and schedule; returns (curves, networks)."""
    curves, nets = {}, {}
    for structure in config.structures:
        label = structure_label(structure)
        net = train_cnn(config, structure)
        nets[label] = net
        curves[label] = evaluate(CnnDetector(net, coded=config.coded), config, threads)
    return curves, nets


def export_decision_boundary(cnn: Network, grid_range: float = 3.0, step: float = 0.05) -> np.ndarray:
    """Rows (r1, r2, decision): CNN sign at the first position of the window (r1, r2)."""
    if cnn.iterations_trained == 0:
        raise StateError("decision boundary requested from an untrained network")
    if not (grid_range > 0 and step > 0):
        raise ValueError("grid_range and step must be positive")
    axis = np.round(np.arange(-grid_range, grid_range + step / 2, step), 10)
    r1, r2 = np.meshgrid(axis, axis, indexing="ij")
    windows = np.stack([r1.ravel(), r2.ravel()], axis=1)
    out = cnn.forward(windows)[:, 0]
    return np.column_stack([windows, np.where(out >= 0, 1.0, -1.0)])


def map_window_decisions(channel: ChannelSpec, sigma: float, windows) -> np.ndarray:
    """MAP sign of s_i from (r_i, r_{i+1}) on a two-tap channel, summing over s_{i-1}, s_{i+1}."""
    if len(channel.taps) != 2:
        raise ValueError("the window oracle needs a two-tap channel")
    h0, h1 = channel.taps
    w = np.asarray(windows, dtype=float)

    def g(v):
        return apply_nonlinearity(v, channel.nonlinearity)

    def likelihood(s):
        total = 0.0
        for prev in (1.0, -1.0):
            for nxt in (1.0, -1.0):
                d = (w[:, 0] - g(h0 * s + h1 * prev)) ** 2 + (w[:, 1] - g(h0 * nxt + h1 * s)) ** 2
                total = total + np.exp(-d / (2 * sigma**2))
        return total

    return np.where(likelihood(1.0) >= likelihood(-1.0), 1.0, -1.0)


def linearly_separable(points, labels) -> bool:
    """True when some line puts every +1 point strictly on one side of every -1 point."""
    x = np.asarray(points, dtype=float)
    y = np.asarray(labels, dtype=float)
    if np.all(y == y[0]):
        return True
    a = -y[:, None] * np.column_stack([x, np.ones(len(x))])
    res = linprog(np.zeros(a.shape[1]), A_ub=a, b_ub=-np.ones(len(x)), bounds=[(None, None)] * a.shape[1],
                  method="highs")
    return res.status == 0


def format_boundary(grid: np.ndarray) -> str:
    lines = ["r1,r2,decision"]
    for r1, r2, d in grid:
        lines.append(f"{_sci(r1)},{_sci(r2)},{int(d):d}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: dict[str, list[BerRecord]] = field(default_factory=dict)
    references: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    networks: dict[str, Network] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    boundary: np.ndarray | None = None


def _fig3(config, threads, result):
    cnn = train_cnn(config)
    result.networks["cnn"] = cnn
    result.curves["cnn"] = evaluate(CnnDetector(cnn, coded=config.coded), config, threads)
    kw = dict(convention=config.snr_convention, code=config.code(), seed=config.seed, threads=threads, tail=config.tail)
    spec, grid, frames = config.channel(), config.test_snr_range, config.testing_samples_per_snr
    result.curves["bcjr_perfect"] = map_ber_baseline(spec, grid, frames, mode="perfect", **kw)
    for n in config.pilot_lengths:
        result.curves[f"bcjr_ls_n{n}"] = map_ber_baseline(spec, grid, frames, mode="estimated", pilot_length=n, **kw)


def _fig5(config, threads, result):
    cnn = train_cnn(config)
    result.networks["cnn"] = cnn
    result.curves["cnn"] = evaluate(CnnDetector(cnn, coded=config.coded), config, threads)


def _fig6(config, threads, result):
    cnn = train_cnn(config)
    nnd, _ = train_nnd_awgn(config.training(config.nnd_iterations), NetworkSpec("dnn", config.dnn_structure))
    joint = joint_finetune(
        cnn, nnd, config.training(), config.channel(),
        iterations=config.finetune_iterations,
        learning_rate=config.finetune_learning_rate,
        freeze_cnn=config.freeze_cnn,
    )
    result.networks.update(cnn=cnn, nnd=nnd, cnn_joint=joint.cnn, nnd_joint=joint.nnd)
    result.curves["cnn_sc"] = evaluate(CnnScSystem(cnn, config.code()), config, threads)
    result.curves["cnn_nnd"] = evaluate(CnnNndSystem(cnn, nnd), config, threads)
    result.curves["cnn_nnd_joint"] = evaluate(CnnNndSystem(joint.cnn, joint.nnd), config, threads)


def _boundary(config, threads, result):
    cnn = train_cnn(config)
    result.networks["cnn"] = cnn
    grid = export_decision_boundary(cnn, config.boundary_range, config.boundary_step)
    sigma = sigma_from_snr(SnrPoint(config.snr_range[0], config.snr_convention))
    oracle = map_window_decisions(config.channel(), sigma, grid[:, :2])
    result.boundary = grid
    result.metrics["map_agreement"] = float(np.mean(oracle == grid[:, 2]))
    result.metrics["linearly_separable"] = float(linearly_separable(grid[:, :2], grid[:, 2]))


def _fig2(config, threads, result):
    result.curves, result.networks = run_structure_sweep(config, threads)


_RUNNERS = {
    "fig2_sweep": _fig2,
    "fig3_linear": _fig3,
    "fig5_nonlinear": _fig5,
    "fig6_joint": _fig6,
    "boundary": _boundary,
}


def run(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Train and evaluate in memory; nothing touches the disk."""
    result = ExperimentResult(config)
    _RUNNERS[config.experiment](config, threads, result)
    result.references = load_reference_curves().get(config.experiment, {})
    return result


def write_result(result: ExperimentResult, out_dir: str | Path, wall_time: float) -> Path:
    """Curves, reference overlays, checkpoints and a manifest under ``out_dir/<experiment>``."""
    config = result.config
    root = Path(out_dir) / config.experiment
    root.mkdir(parents=True, exist_ok=True)
    for name, records in result.curves.items():
        write_curve(root / f"{name}.csv", records)
    for name, points in result.references.items():
        _write(root / f"reference_{name}.csv", format_reference(points))
    for name, net in result.networks.items():
        save_checkpoint(net, root / f"{name}.ckpt")
    if result.boundary is not None:
        _write(root / "boundary.csv", format_boundary(result.boundary))
    lines = [
        f"experiment = {config.experiment}",
        f"seed = {config.seed}",
        f"config_hash = {config.config_hash()}",
        f"wall_time_s = {wall_time:.3f}",
        f"info_set = {', '.join(str(i) for i in config.code().info_set)}",
    ]
    lines += [f"config.{ln}" for ln in config.to_text().splitlines()]
    for name, records in result.curves.items():
        for r in records:
            lines.append(f"ber.{name}.{r.snr_db:g} = {_sci(r.ber)}")
    for key, value in result.metrics.items():
        lines.append(f"metric.{key} = {value:.6g}")
    _write(root / "manifest.txt", "\n".join(lines) + "\n")
    return root


def run_experiment(config: ExperimentConfig, out_dir: str | Path, threads: int = 1) -> Path:
    start = time.perf_counter()
    log.info("experiment %s, info set %s, config %s", config.experiment, config.code().info_set,
             config.config_hash()[:12])
    result = run(config, threads)
    return write_result(result, out_dir, time.perf_counter() - start)

