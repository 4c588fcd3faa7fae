"""Desk-scale experiments: filter-bank regression, beta sweep, DCL->ACL chain.

Each ``run_*`` function writes its artifacts under ``config.out_dir`` and
returns a dict mapping artifact names to paths. Identical configs produce
byte-identical files.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .filterbank import FAMILIES, FilterBankSpec, FilterBankTask, build_filterbank, overparam_factor, \
    white_noise_spectrum, write_filterbank_csv
from .layers import AdaptiveLinear, DynamicLinear, ModelGraph, active_units, consolidate, forward, save_model, summary
from .profiler import DEFAULT_FRAME_RATE, profile
from .rng import RngStream
from .svg import write_line_chart
from .trainer import TrainConfig, TrainHistory, train_two_phase

log = logging.getLogger(__name__)

EXPERIMENTS = ("filterbank", "beta_sweep", "acl_chain")
DEFAULT_BETA = {"filterbank": 0.06, "beta_sweep": 0.1, "acl_chain": 0.01}
EVAL_FRAMES = 512
FAILED_MARKER = ".failed"


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 1)."""


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


@dataclass
class ExperimentConfig:
    experiment: str = "filterbank"
    # filter bank
    family: str = "bark"
    n_filters: int = 32
    fft_size: int = 512
    sample_rate: float = 16000.0
    overparam: float = 2.0
    # training
    total_steps: int = 3000
    phase1_steps: int = 1000
    lr: float = 1e-3
    beta: float | None = None
    lambda_min: float = 0.0625
    l1_scale: float = 1e-3
    batch_frames: int = 32
    threshold: float = 0.5
    settle_steps: int = 250
    gate_mode: str = "ordered_K"
    # sweep
    beta_list: tuple[float, ...] = (0.01, 0.1, 0.5, 1.0)
    overparam_list: tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0)
    # DCL -> ACL chain
    chain_in: int = 16
    chain_hidden: int = 16
    chain_out: int = 8
    chain_rank: int = 4
    # output
    frame_rate: float = DEFAULT_FRAME_RATE
    out_dir: str = "runs"
    seed: int = 0
    overwrite: bool = False

    @classmethod
    def from_ini(cls, path) -> ExperimentConfig:
        """Read ``key = value`` pairs from the ``[experiment]`` section of an INI file."""
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not parser.has_section("experiment"):
            raise ConfigError(f"{path}: missing [experiment] section")
        return cls().with_overrides(**dict(parser.items("experiment")))

    def with_overrides(self, **values) -> ExperimentConfig:
        known = {f.name: f for f in dataclasses.fields(self)}
        updates = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if raw is None:
                continue
            updates[name] = _coerce(name, raw)
        return dataclasses.replace(self, **updates)

    @property
    def filterbank_spec(self) -> FilterBankSpec:
        return FilterBankSpec(self.family, self.n_filters, self.fft_size, self.sample_rate)

    @property
    def resolved_beta(self) -> float:
        return DEFAULT_BETA[self.experiment] if self.beta is None else self.beta

    def train_config(self, beta: float | None = None) -> TrainConfig:
        return TrainConfig(
            total_steps=self.total_steps,
            phase1_steps=self.phase1_steps,
            lr=self.lr,
            beta=self.resolved_beta if beta is None else beta,
            lambda_min=self.lambda_min,
            l1_scale=self.l1_scale,
            seed=self.seed,
            batch_frames=self.batch_frames,
            threshold=self.threshold,
            settle_steps=min(self.settle_steps, self.total_steps - self.phase1_steps),
        )

    def validate(self) -> ExperimentConfig:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown filter bank family {self.family!r}")
        if self.gate_mode not in ("per_unit", "ordered_K"):
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.frame_rate <= 0:
            raise ConfigError(f"frame_rate must be positive, got {self.frame_rate}")
        if self.l1_scale <= 0:
            raise ConfigError(f"l1_scale must be positive, got {self.l1_scale}")
        try:
            spec = self.filterbank_spec
            build_filterbank(spec)
            self.train_config()
            for b in self.beta_list:
                self.train_config(b)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        factors = self.overparam_list if self.experiment == "beta_sweep" else (self.overparam,)
        for f in factors:
            if f < 1 or round(f * self.n_filters) != f * self.n_filters:
                raise ConfigError(f"overparameterization factor {f} must be >= 1 and give a whole DCL width")
        if self.experiment == "beta_sweep" and not self.beta_list:
            raise ConfigError("beta_list must not be empty")
        if not 1 <= self.chain_rank <= min(self.chain_in, self.chain_out):
            raise ConfigError(f"chain_rank must lie in [1, min(chain_in, chain_out)], got {self.chain_rank}")
        if min(self.chain_in, self.chain_hidden, self.chain_out) < 1:
            raise ConfigError("chain dimensions must be positive")
        return self


def _coerce(name: str, raw):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if name in ("beta_list", "overparam_list"):
            return _floats(raw)
        if name == "overwrite":
            if isinstance(raw, str):
                if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                return raw.lower() in ("1", "true", "yes", "on")
            return bool(raw)
        if name == "beta":
            return None if raw in ("", "none", "None") else float(raw)
        if name in ("experiment", "family", "gate_mode", "out_dir"):
            return str(raw)
        if name in ("sample_rate", "overparam", "lr", "lambda_min", "l1_scale", "threshold", "frame_rate"):
            return float(raw)
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {raw!r} for {name}") from None


# --------------------------------------------------------------------------
# helpers


def prepare_out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not config.overwrite:
        raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    (out / FAILED_MARKER).unlink(missing_ok=True)
    return out


def mark_failed(out_dir, message: str) -> None:
    try:
        Path(out_dir, FAILED_MARKER).write_text(message + "\n")
    except OSError:
        log.exception("could not write failure marker")


def filterbank_model(spec: FilterBankSpec, width: int, rng: RngStream, lambda_min: float,
                     gate_mode: str) -> ModelGraph:
    """Bias-free DCL(bins -> width) followed by ACL(width -> n_filters)."""
    dcl = DynamicLinear.create(spec.bins, width, bias=False, rng=rng.child("dcl"), lambda_min=lambda_min,
                               gate_mode=gate_mode)
    acl = AdaptiveLinear.create(dcl, spec.n_filters, bias=False, rng=rng.child("acl"))
    return ModelGraph([dcl, acl])


def effective_matrix(model: ModelGraph) -> np.ndarray:
    """Product of the chain's weights with gate scaling: the learned filter bank."""
    m = None
    for layer in model.layers:
        w = layer.weight.data
        if isinstance(layer, DynamicLinear):
            w = w * np.sqrt(layer.gate.values)
        m = w if m is None else m @ w
    return m


def eval_l1(model: ModelGraph, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.abs(forward(model, x).data - y)))


def _write_text(path: Path, lines) -> None:
    path.write_text("".join(f"{k}: {v}\n" for k, v in lines))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _threads() -> int:
    raw = os.environ.get("DYNCAP_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ConfigError(f"DYNCAP_THREADS must be an integer, got {raw!r}") from None
    return cap


# --------------------------------------------------------------------------
# experiments


@dataclass
class FilterbankRun:
    model: ModelGraph
    consolidated: ModelGraph
    history: TrainHistory
    initial_matrix: np.ndarray
    width: int
    out_width: int
    final_l1: float


def train_filterbank(config: ExperimentConfig, width: int, beta: float, rng: RngStream) -> FilterbankRun:
    spec = config.filterbank_spec
    model = filterbank_model(spec, width, rng.child("init"), config.lambda_min, config.gate_mode)
    initial = effective_matrix(model)
    task = FilterBankTask(spec, rng, config.batch_frames)
    history = train_two_phase(model, task, config.train_config(beta), rng)
    consolidated = consolidate(model, config.threshold)
    x_eval = white_noise_spectrum(rng.child("eval"), spec, EVAL_FRAMES)
    final_l1 = eval_l1(consolidated, x_eval, x_eval @ task.matrix)
    return FilterbankRun(model, consolidated, history, initial, width, consolidated.layers[0].out_dim, final_l1)


def run_filterbank(config: ExperimentConfig) -> dict[str, Path]:
    config.validate()
    out = prepare_out_dir(config)
    spec = config.filterbank_spec
    width = int(round(config.overparam * spec.n_filters))
    run = train_filterbank(config, width, config.resolved_beta, RngStream(config.seed))

    art = {
        "history": out / "history.csv",
        "filterbank_initial": out / "filterbank_initial.csv",
        "filterbank_final": out / "filterbank_final.csv",
        "filterbank_target": out / "filterbank_target.csv",
        "filterbank_svg": out / "filterbank_final.svg",
        "model": out / "model.dcm",
        "model_summary": out / "model_summary.txt",
        "profile": out / "profile.csv",
        "summary": out / "summary.txt",
    }
    run.history.write_csv(art["history"])
    write_filterbank_csv(run.initial_matrix, art["filterbank_initial"])
    final = effective_matrix(run.consolidated)
    write_filterbank_csv(final, art["filterbank_final"])
    target = build_filterbank(spec)
    write_filterbank_csv(target, art["filterbank_target"])
    freqs = spec.bin_frequencies()
    write_line_chart(
        art["filterbank_svg"],
        [(f"filter {j}", freqs, final[:, j]) for j in range(0, final.shape[1], max(1, final.shape[1] // 8))],
        title=f"learned {spec.family} filter bank (every {max(1, final.shape[1] // 8)}th filter)",
        x_label="frequency (Hz)", y_label="gain", markers=False,
    )
    save_model(run.consolidated, art["model"])
    art["model_summary"].write_text(summary(run.model, config.threshold) + "\nconsolidated:\n" + summary(run.consolidated))
    prof_before = profile(run.model, config.frame_rate)
    prof_after = profile(run.consolidated, config.frame_rate)
    prof_after.write_csv(art["profile"])
    _write_text(art["summary"], [
        ("experiment", "filterbank"),
        ("filter_bank", f"{spec.family}/{spec.n_filters}/fft{spec.fft_size}"),
        ("beta", _fmt(config.resolved_beta)),
        ("l1_scale", _fmt(config.l1_scale)),
        ("gate_mode", config.gate_mode),
        ("steps", config.total_steps),
        ("dcl_width", run.width),
        ("consolidated_width", run.out_width),
        ("in_overparam_factor", _fmt(overparam_factor(spec.bins * run.width, spec.bins * spec.n_filters))),
        ("out_overparam_factor", _fmt(overparam_factor(spec.bins * run.out_width, spec.bins * spec.n_filters))),
        ("final_l1", _fmt(run.final_l1)),
        ("final_train_l1", _fmt(run.history.task_loss[-1]) if len(run.history) else "nan"),
        ("flops_per_frame_before", prof_before.flops_per_frame),
        ("flops_per_frame_after", prof_after.flops_per_frame),
    ])
    return art


def run_beta_sweep(config: ExperimentConfig) -> dict[str, Path]:
    config.validate()
    out = prepare_out_dir(config)
    n = config.n_filters
    grid = [(b, f) for b in config.beta_list for f in config.overparam_list]

    def point(item):
        beta, factor = item
        # keyed by the width so every beta starts from the same initialization
        rng = RngStream(config.seed).child("sweep", repr(float(factor)))
        run = train_filterbank(config, int(round(factor * n)), beta, rng)
        return beta, factor, run.out_width / n, run.final_l1

    with ThreadPoolExecutor(max_workers=min(_threads(), len(grid))) as pool:
        rows = list(pool.map(point, grid))

    art = {"sweep": out / "beta_sweep.csv", "chart": out / "beta_sweep.svg"}
    with open(art["sweep"], "w", newline="") as fh:
        fh.write("beta,in_factor,out_factor,final_l1\n")
        for beta, f_in, f_out, l1 in rows:
            fh.write(f"{beta!r},{float(f_in)!r},{float(f_out)!r},{float(l1)!r}\n")
    series = []
    for beta in config.beta_list:
        pts = [(f_in, f_out) for b, f_in, f_out, _ in rows if b == beta]
        series.append((f"beta={beta:g}", [p[0] for p in pts], [p[1] for p in pts]))
    write_line_chart(art["chart"], series, title="overparameterization after training",
                     x_label="input overparameterization factor", y_label="output overparameterization factor",
                     diagonal=True, y_range=(0.0, max(config.overparam_list)))
    return art


def chain_task(config: ExperimentConfig, rng: RngStream):
    """Rank-limited linear map ``x -> x @ A @ B`` and a batch generator for it."""
    a = rng.child("A").normal((config.chain_in, config.chain_rank)) / np.sqrt(config.chain_rank)
    b = rng.child("B").normal((config.chain_rank, config.chain_out)) / np.sqrt(config.chain_rank)
    mapping = a @ b
    data = rng.child("chain-data")

    def task(step: int):
        x = data.at(step).normal((config.batch_frames, config.chain_in))
        return x, x @ mapping

    return mapping, task


def run_acl_chain(config: ExperimentConfig) -> dict[str, Path]:
    config.validate()
    out = prepare_out_dir(config)
    rng = RngStream(config.seed)
    mapping, task = chain_task(config, rng)
    dcl = DynamicLinear.create(config.chain_in, config.chain_hidden, bias=False, rng=rng.child("dcl"),
                               lambda_min=config.lambda_min, gate_mode=config.gate_mode)
    acl = AdaptiveLinear.create(dcl, config.chain_out, bias=False, rng=rng.child("acl"))
    model = ModelGraph([dcl, acl])
    history = train_two_phase(model, task, config.train_config(), rng)

    consolidated = consolidate(model, config.threshold)
    x_eval = rng.child("eval").normal((EVAL_FRAMES, config.chain_in))
    # pruning only exact zeros must reproduce the gated evaluation output
    exact = consolidate(model, 1e-12)
    gated_out = forward(model, x_eval).data
    equiv = float(np.max(np.abs(forward(exact, x_eval).data - gated_out)))

    art = {
        "history": out / "history.csv",
        "model": out / "model.dcm",
        "model_summary": out / "model_summary.txt",
        "profile": out / "profile.csv",
        "summary": out / "summary.txt",
    }
    history.write_csv(art["history"])
    save_model(consolidated, art["model"])
    art["model_summary"].write_text(summary(model, config.threshold) + "\nconsolidated:\n" + summary(consolidated))
    profile(consolidated, config.frame_rate).write_csv(art["profile"])
    _write_text(art["summary"], [
        ("experiment", "acl_chain"),
        ("beta", _fmt(config.resolved_beta)),
        ("gate_mode", config.gate_mode),
        ("target_rank", config.chain_rank),
        ("hidden_width", config.chain_hidden),
        ("active_units", active_units(dcl, config.threshold)),
        ("consolidated_hidden_width", consolidated.layers[0].out_dim),
        ("final_l1", _fmt(eval_l1(consolidated, x_eval, x_eval @ mapping))),
        ("max_abs_diff_exact_zero_pruning", _fmt(equiv)),
    ])
    return art


RUNNERS = {"filterbank": run_filterbank, "beta_sweep": run_beta_sweep, "acl_chain": run_acl_chain}


def run_experiment(config: ExperimentConfig) -> dict[str, Path]:
    config.validate()
    return RUNNERS[config.experiment](config)


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out


__all__ = [
    "EXPERIMENTS",
    "ConfigError",
    "ExperimentConfig",
    "FilterbankRun",
    "filterbank_model",
    "effective_matrix",
    "train_filterbank",
    "run_filterbank",
    "run_beta_sweep",
    "run_acl_chain",
    "run_experiment",
    "read_summary",
    "prepare_out_dir",
    "mark_failed",
]
