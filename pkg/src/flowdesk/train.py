"""Experiment configuration, the training loop, and checkpoint-backed sampling."""

from __future__ import annotations

import dataclasses
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import tensor as T
from .checkpoint import assign_params, dumps_params, load_params
from .diffusion import LossWeighting, Objective, TimestepSampler, training_loss
from .errors import ConfigError, ContractError, NumericError, SchemaError
from .fields import DiT, DiTConfig, MlpField, Module, cfg_dropout_condition
from .metrics import fit_gaussian, frechet_distance_sets, wasserstein2
from .optim import AdamW
from .rng import Rng
from .samplers import GuidanceSpec, Method, OdeField, SamplerConfig, guided_field, sample, steps_for_nfe
from .tensor import Param, Tensor
from .toy import DATASETS, gen_toy_dataset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

LOG_EVERY = 50

# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataSpec:
    name: str = "gauss_mixture"
    n: int = 200000


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: tuple = (128, 128, 128)
    t_dim: int = 16
    cond_dim: int = 8
    depth: int = 2
    width: int = 16
    heads: int = 2
    p_dropout: float = 0.0


@dataclass
class ObjectiveSpec:
    kind: str = "otcfm"
    t_sampler: str = "logit_normal"
    min_snr_gamma: float | None = None


@dataclass
class OptimSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    steps: int = 3000
    batch: int = 256
    final_lr_ratio: float = 1.0


@dataclass
class SamplerSpec:
    method: str = "euler"
    nfe: int = 100
    w_cfg: float = 3.5


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    p_uncond: float = 0.1
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.data.name not in DATASETS:
            raise ConfigError(f"data.name: unknown dataset {self.data.name!r}")
        if self.data.n < 1:
            raise ConfigError("data.n must be at least 1")
        if self.model.kind not in ("mlp", "dit"):
            raise ConfigError(f"model.kind must be 'mlp' or 'dit', got {self.model.kind!r}")
        try:
            objective = Objective(self.objective.kind)
            TimestepSampler(self.objective.t_sampler)
            Method(self.sampler.method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.objective.min_snr_gamma is not None:
            if self.objective.min_snr_gamma <= 0:
                raise ConfigError("objective.min_snr_gamma must be positive")
            if objective is Objective.OTCFM:
                raise ConfigError("objective.min_snr_gamma needs objective.kind = 'v_diffusion'")
        if self.optim.steps < 1 or self.optim.batch < 1:
            raise ConfigError("optim.steps and optim.batch must be at least 1")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not 0.0 < self.optim.final_lr_ratio <= 1.0:
            raise ConfigError("optim.final_lr_ratio must lie in (0, 1]")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must lie in [0, 1]")
        if self.sampler.nfe < 1:
            raise ConfigError("sampler.nfe must be at least 1")
        if self.sampler.w_cfg < 0:
            raise ConfigError("sampler.w_cfg must be non-negative")
        if self.model.kind == "dit":
            try:
                self.dit_config()
            except ContractError as exc:
                raise ConfigError(f"model: {exc}") from None
        return self

    def dit_config(self) -> DiTConfig:
        m = self.model
        return DiTConfig(in_dim=1, depth=m.depth, width=m.width, heads=m.heads,
                         p_dropout=m.p_dropout, cond_dim=m.cond_dim)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["hidden"] = list(self.model.hidden)
        return d


SECTIONS = {"data": DataSpec, "model": ModelSpec, "objective": ObjectiveSpec,
            "optim": OptimSpec, "sampler": SamplerSpec}
TOP_LEVEL = ("p_uncond", "seed")


def _coerce(key: str, value, default):
    """Convert a file or flag value to the type of the field's default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if isinstance(default, float) or default is None:
            if value is None or (isinstance(value, str) and value.lower() in ("none", "")):
                return None
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def config_keys() -> list[str]:
    """Every overridable dotted key, e.g. ``optim.lr``."""
    keys = [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]
    return keys + list(TOP_LEVEL)


def apply_overrides(cfg: ExperimentConfig, values: Mapping[str, Any]) -> ExperimentConfig:
    known = set(config_keys())
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if "." in key:
            section, name = key.split(".", 1)
            target = getattr(cfg, section)
        else:
            target, name = cfg, key
        setattr(target, name, _coerce(key, value, getattr(target, name)))
    return cfg


def flatten_config_doc(doc: Mapping[str, Any]) -> dict[str, Any]:
    flat = {}
    for key, value in doc.items():
        if isinstance(value, Mapping):
            if key not in SECTIONS:
                raise ConfigError(f"unknown config section [{key}]")
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return flat


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the TOML file, then explicit overrides (flag > file > default)."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        apply_overrides(cfg, flatten_config_doc(doc))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), flatten_config_doc(doc)).validate()


# ---------------------------------------------------------------------------
# models


class DitPointField(Module):
    """Adapter running the toy DiT on 2-D points as a two-token sequence."""

    def __init__(self, cfg: DiTConfig, n_classes: int, rng):
        self.n_classes = n_classes
        self.cond_dim = cfg.cond_dim
        self.class_table = Param(0.5 * rng.normal((max(n_classes, 1), cfg.cond_dim)))
        self.dit = DiT(cfg, rng)
        self.dropout_rng = None

    @property
    def null(self) -> Tensor:
        return self.dit.null_text.reshape(-1)

    def embed_condition(self, labels, batch: int) -> Tensor:
        if labels is None:
            return T.broadcast_to(self.null, (batch, self.cond_dim))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (batch,))
        if np.any(labels >= self.n_classes):
            raise ContractError(f"label out of range for {self.n_classes} classes")
        is_null = (labels < 0).astype(np.float64)[:, None]
        return is_null * self.null + (1.0 - is_null) * self.class_table[np.clip(labels, 0, None)]

    def __call__(self, x, t, cond=None) -> Tensor:
        x = T.as_tensor(x)
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        c = cond if isinstance(cond, Tensor) else self.embed_condition(cond, batch)
        out = self.dit(x.reshape(batch, 2, 1), t, c.reshape(batch, 1, self.cond_dim), self.dropout_rng)
        return out.reshape(batch, 2)


def build_model(cfg: ExperimentConfig, n_classes: int, rng: Rng) -> Module:
    m = cfg.model
    if m.kind == "mlp":
        return MlpField(2, n_classes, tuple(m.hidden), m.t_dim, m.cond_dim, rng)
    return DitPointField(cfg.dit_config(), n_classes, rng)


def velocity_scale(objective: Objective) -> float:
    """Factor turning the network output into dx/dt along the 1 -> 0 path.

    For v-prediction on the cosine schedule ``dx_t/dt = (pi/2) v``.
    """
    return 1.0 if objective is Objective.OTCFM else 0.5 * math.pi


# ---------------------------------------------------------------------------
# training


@dataclass
class RunReport:
    loss_curve: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    sample_mean: list | None = None
    sample_cov: list | None = None
    w2_to_target: float | None = None
    fd_to_target: float | None = None
    wall_time: float = 0.0
    diverged_at: int | None = None

    def to_dict(self, include_wall_time: bool = True) -> dict:
        d = {
            "loss_curve": [[int(s), float(v)] for s, v in self.loss_curve],
            "sample_mean": self.sample_mean,
            "sample_cov": self.sample_cov,
            "w2_to_target": self.w2_to_target,
            "fd_to_target": self.fd_to_target,
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


class TrainingDiverged(NumericError):
    def __init__(self, step: int, detail: str):
        self.step = step
        self.last_good_step = step - 1
        super().__init__(f"loss diverged at step {step} ({detail}); last good step {step - 1}")


@dataclass
class TrainedModel:
    config: ExperimentConfig
    model: Module
    n_classes: int

    @property
    def objective(self) -> Objective:
        return Objective(self.config.objective.kind)

    def checkpoint_text(self) -> str:
        meta = {"config": self.config.to_dict(), "n_classes": self.n_classes}
        return dumps_params(self.model.state(), meta)

    def save(self, path) -> None:
        Path(path).write_text(self.checkpoint_text(), encoding="utf-8")


def load_model(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise SchemaError("checkpoint not found", path)
    values, meta = load_params(path)
    if not meta or "config" not in meta:
        raise SchemaError("checkpoint lacks its experiment config", path)
    cfg = config_from_dict(meta["config"])
    n_classes = int(meta.get("n_classes", 0))
    model = build_model(cfg, n_classes, Rng(cfg.seed))
    assign_params(model.state(), values)
    return TrainedModel(cfg, model.eval(), n_classes)


def lr_at(o: OptimSpec, step: int) -> float:
    """Exponential decay from ``lr`` at step 0 to ``lr * final_lr_ratio`` at the last step."""
    if o.final_lr_ratio == 1.0 or o.steps == 1:
        return o.lr
    return o.lr * o.final_lr_ratio ** (step / (o.steps - 1))


def train(cfg: ExperimentConfig, log=None, eval_samples: int = 1000) -> tuple[TrainedModel, RunReport]:
    """Minibatch training with CFG condition dropout and AdamW.

    Loss is logged at step 0 and every ``LOG_EVERY`` steps after, each point
    being the mean loss since the previous log point. After training,
    ``eval_samples`` points are drawn with the configured sampler and
    compared with fresh target data (0 skips this).
    """
    cfg.validate()
    start = time.perf_counter()
    root = Rng(cfg.seed)
    data = gen_toy_dataset(cfg.data.name, cfg.data.n, cfg.seed)
    n_classes = data.n_classes
    model = build_model(cfg, n_classes, root.derive(1)).train()
    batch_rng, loss_rng, drop_rng = root.derive(2), root.derive(3), root.derive(4)
    if isinstance(model, DitPointField):
        model.dropout_rng = root.derive(5)
    o = cfg.optim
    opt = AdamW(model.params(), lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    objective = Objective(cfg.objective.kind)
    sampler = TimestepSampler(cfg.objective.t_sampler)
    gamma = cfg.objective.min_snr_gamma
    weighting = LossWeighting.unit() if gamma is None else LossWeighting.min_snr(gamma)
    report = RunReport()
    window = []
    for step in range(o.steps):
        idx = batch_rng.integers(data.n, o.batch)
        x0 = data.points[idx]
        opt.zero_grad()
        opt.lr = lr_at(o, step)
        try:
            with T.Tape() as tape:
                cond = model.embed_condition(None if data.labels is None else data.labels[idx], o.batch)
                if data.labels is not None:
                    cond, _ = cfg_dropout_condition(cond, model.null, drop_rng, cfg.p_uncond)
                loss = training_loss(model, x0, cond, objective, sampler, weighting, loss_rng)
                tape.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError("non-finite loss")
            opt.step()
        except NumericError as exc:
            report.diverged_at = step
            raise TrainingDiverged(step, str(exc)) from None
        report.step_losses.append(value)
        window.append(value)
        if step % LOG_EVERY == 0:
            report.loss_curve.append((step, float(np.mean(window))))
            window = []
            if log is not None:
                log(step, report.loss_curve[-1][1])
    trained = TrainedModel(cfg, model.eval(), n_classes)
    if eval_samples > 0:
        pts, _ = sample_points(trained, eval_samples, seed=cfg.seed)
        ref = gen_toy_dataset(cfg.data.name, eval_samples, cfg.seed + 1).points
        stats = fit_gaussian(pts)
        report.sample_mean = stats.mean.tolist()
        report.sample_cov = stats.cov.tolist()
        report.fd_to_target = frechet_distance_sets(ref, pts)
        report.w2_to_target = wasserstein2(ref, pts, rng=root.derive(6))
    report.wall_time = time.perf_counter() - start
    return trained, report


# ---------------------------------------------------------------------------
# sampling


def model_fields(trained: TrainedModel, spec: GuidanceSpec) -> OdeField:
    scale = velocity_scale(trained.objective)
    model = trained.model

    def cond_fn(x, t, c):
        return scale * model(x, t, c).data

    uncond = OdeField(cond_fn, "uncond") if spec.cfg_enabled else None
    return guided_field(OdeField(cond_fn, "cond"), uncond, spec)


def default_labels(trained: TrainedModel, n: int, label: int | None = None):
    if trained.n_classes == 0:
        return None
    if label is not None:
        if not 0 <= label < trained.n_classes:
            raise ContractError(f"label must lie in [0, {trained.n_classes})")
        return np.full(n, label, dtype=np.int64)
    return np.arange(n, dtype=np.int64) % trained.n_classes


def sample_points(trained: TrainedModel, n: int, method=None, nfe: int | None = None,
                  w_cfg: float | None = None, seed: int = 0, label: int | None = None,
                  cfg_interval=(0.0, 1.0)):
    """Integrate ``n`` seeded Gaussian draws to t=0. Returns ``(points, labels)``.

    Unconditional models ignore ``w_cfg``.
    """
    s = trained.config.sampler
    method = Method(method or s.method)
    nfe = s.nfe if nfe is None else int(nfe)
    w_cfg = s.w_cfg if w_cfg is None else float(w_cfg)
    if nfe < 1:
        raise ContractError("NFE must be at least 1")
    if n < 0:
        raise ContractError("sample count must be non-negative")
    labels = default_labels(trained, n, label)
    if n == 0:
        return np.zeros((0, 2)), labels
    if labels is None:
        w_cfg = 1.0
    spec = GuidanceSpec(w_cfg=w_cfg, cfg_interval=tuple(cfg_interval))
    field_ = model_fields(trained, spec)
    x_init = Rng(seed).derive(7).normal((n, 2))
    config = SamplerConfig(method, steps_for_nfe(method, nfe))
    return sample(field_, x_init, labels, config), labels


def samples_to_csv(points, labels=None) -> str:
    header = "x,y,label\n" if labels is not None else "x,y\n"
    lines = [header]
    for i, (x, y) in enumerate(np.asarray(points).reshape(-1, 2)):
        row = f"{float(x)!r},{float(y)!r}"
        if labels is not None:
            row += f",{int(labels[i])}"
        lines.append(row + "\n")
    return "".join(lines)
