"""Deterministic ODE samplers (Euler, Heun) with guidance and NFE accounting.

Integration runs from t=1 (noise) to t=0 (data) on a uniform grid. A field
is any callable ``(x, t, cond) -> velocity``; wrapping it in :class:`OdeField`
counts evaluations.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, FlowdeskError, NumericError


class Method(enum.Enum):
    EULER = "euler"
    HEUN = "heun"


class OdeField:
    """Callable velocity field with an evaluation counter."""

    def __init__(self, fn: Callable, name: str = "field"):
        self.fn = fn
        self.name = name
        self.nfe = 0

    def __call__(self, x, t, cond=None):
        self.nfe += 1
        out = self.fn(x, t, cond)
        return np.asarray(getattr(out, "data", out), dtype=np.float64)

    @property
    def model_calls(self) -> int:
        return self.nfe

    def reset(self):
        self.nfe = 0


def as_field(fn) -> OdeField:
    return fn if isinstance(fn, OdeField) else OdeField(fn)


@dataclass
class GuidanceSpec:
    w_cfg: float = 1.0
    cfg_interval: tuple[float, float] = (0.0, 1.0)
    w_ag: float = 1.0
    bad_field: Callable | None = None

    def __post_init__(self):
        if self.w_cfg < 0 or self.w_ag < 0:
            raise ContractError("guidance scales must be non-negative")
        lo, hi = self.cfg_interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ContractError(f"cfg_interval must be a sub-interval of [0, 1], got {self.cfg_interval}")
        if self.w_ag != 1.0 and self.bad_field is None:
            raise ContractError("autoguidance with w_ag != 1 needs a bad_field")

    @classmethod
    def limited_interval(cls, w_cfg: float, skip_fraction: float = 0.4, **kw):
        """CFG switched off for the first ``skip_fraction`` of the 1 -> 0 trajectory."""
        return cls(w_cfg=w_cfg, cfg_interval=(0.0, 1.0 - skip_fraction), **kw)

    @property
    def cfg_enabled(self) -> bool:
        return self.w_cfg != 1.0

    @property
    def ag_enabled(self) -> bool:
        return self.w_ag != 1.0 and self.bad_field is not None

    def cfg_active_at(self, t: float) -> bool:
        lo, hi = self.cfg_interval
        return self.cfg_enabled and lo <= t <= hi


class GuidedField(OdeField):
    """CFG first, then autoguidance against the bad model's (conditional) output."""

    def __init__(self, cond_field, uncond_eval, spec: GuidanceSpec):
        super().__init__(None, "guided")
        self.cond_field = as_field(cond_field)
        self.uncond_eval = as_field(uncond_eval) if uncond_eval is not None else None
        self.bad_field = as_field(spec.bad_field) if spec.bad_field is not None else None
        self.spec = spec
        if spec.cfg_enabled and self.uncond_eval is None:
            raise ContractError("CFG with w_cfg != 1 needs an unconditional evaluator")

    def __call__(self, x, t, cond=None):
        self.nfe += 1
        spec = self.spec
        v = self.cond_field(x, t, cond)
        if spec.cfg_active_at(float(t)):
            v_uncond = self.uncond_eval(x, t, None)
            v = v_uncond + spec.w_cfg * (v - v_uncond)
        if spec.ag_enabled:
            v_bad = self.bad_field(x, t, cond)
            v = v_bad + spec.w_ag * (v - v_bad)
        return v

    @property
    def model_calls(self) -> int:
        inner = [self.cond_field, self.uncond_eval, self.bad_field]
        return sum(f.nfe for f in inner if f is not None)

    def reset(self):
        self.nfe = 0
        for f in (self.cond_field, self.uncond_eval, self.bad_field):
            if f is not None:
                f.reset()


def guided_field(cond_field, uncond_eval, spec: GuidanceSpec) -> OdeField:
    return GuidedField(cond_field, uncond_eval, spec)


def make_t_grid(steps: int) -> np.ndarray:
    if int(steps) != steps or steps < 1:
        raise ContractError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    return 1.0 - np.arange(steps + 1) / steps


@dataclass
class SamplerConfig:
    method: Method = Method.EULER
    steps: int = 100

    def __post_init__(self):
        self.method = Method(self.method)
        make_t_grid(self.steps)

    @property
    def t_grid(self) -> np.ndarray:
        return make_t_grid(self.steps)

    @property
    def nfe(self) -> int:
        return nfe_for(self.method, self.steps)


def nfe_for(method: Method, steps: int) -> int:
    return steps if Method(method) is Method.EULER else 2 * steps - 1


def steps_for_nfe(method: Method, nfe: int) -> int:
    """Largest step count whose NFE fits in ``nfe`` (Heun spends 2N - 1)."""
    if nfe < 1:
        raise ContractError("NFE must be at least 1")
    return nfe if Method(method) is Method.EULER else max(1, (nfe + 1) // 2)


def _check_state(x, step):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite sampler state after step {step}")


def euler_sample(field, x_init, cond, config: SamplerConfig):
    x = np.array(x_init, dtype=np.float64)
    grid = config.t_grid
    for i in range(config.steps):
        t, t_next = grid[i], grid[i + 1]
        x = x + (t_next - t) * field(x, t, cond)
        _check_state(x, i)
    return x


def heun_sample(field, x_init, cond, config: SamplerConfig):
    """Heun predictor-corrector; the last step (ending at t=0) is plain Euler."""
    x = np.array(x_init, dtype=np.float64)
    grid = config.t_grid
    for i in range(config.steps):
        t, t_next = grid[i], grid[i + 1]
        dt = t_next - t
        d = field(x, t, cond)
        x_pred = x + dt * d
        if i == config.steps - 1:
            x = x_pred
        else:
            d_next = field(x_pred, t_next, cond)
            x = x + dt * 0.5 * (d + d_next)
        _check_state(x, i)
    return x


def sample(field, x_init, cond, config: SamplerConfig):
    if config.method is Method.EULER:
        return euler_sample(field, x_init, cond, config)
    return heun_sample(field, x_init, cond, config)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    method: str
    steps: int
    nfe: int
    w_cfg: float
    w_ag: float
    metrics: dict[str, float] = field(default_factory=dict)
    error: str | None = None


Generator = Callable[[OdeField, SamplerConfig, "object"], np.ndarray]


def sweep(make_field: Callable[[GuidanceSpec], OdeField], metric_fns: dict[str, Callable],
          nfe_list: Sequence[int], cfg_list: Sequence[float], methods: Sequence[Method],
          eval_set, rng, draw: Callable, w_ag: float = 1.0, bad_field=None) -> list[SweepRow]:
    """One row per (method, nfe, w_cfg) in that nesting order.

    ``draw(field, config, row_rng)`` generates a sample set; each row gets
    the child stream ``rng.derive(row_index)`` so rows are reproducible on
    their own. ``metric_fns`` map a name to ``fn(samples, eval_set)``. A row
    that raises keeps its place with ``error`` set.
    """
    rows = []
    index = 0
    for method in methods:
        method = Method(method)
        for nfe in nfe_list:
            for w_cfg in cfg_list:
                row_rng = rng.derive(index)
                index += 1
                try:
                    steps = steps_for_nfe(method, nfe)
                    row = SweepRow(method.value, steps, nfe_for(method, steps), float(w_cfg), float(w_ag))
                    spec = GuidanceSpec(w_cfg=w_cfg, w_ag=w_ag, bad_field=bad_field)
                    samples = draw(make_field(spec), SamplerConfig(method, steps), row_rng)
                    row.metrics = {name: float(fn(samples, eval_set)) for name, fn in metric_fns.items()}
                except FlowdeskError as exc:
                    row = SweepRow(method.value, 0, int(nfe), float(w_cfg), float(w_ag),
                                   {name: float("nan") for name in metric_fns},
                                   error=f"{exc.code}: {exc}")
                rows.append(row)
    return rows


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def sweep_to_csv(rows: Sequence[SweepRow], metric_names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "steps", "nfe", "w_cfg", "w_ag", *metric_names])
    for r in rows:
        cells = ["ERROR" if r.error else _fmt(r.metrics[m]) for m in metric_names]
        writer.writerow([r.method, r.steps, r.nfe, _fmt(r.w_cfg), _fmt(r.w_ag), *cells])
    return buf.getvalue()
