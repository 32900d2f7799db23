"""Fast built-in invariant checks behind ``flowdesk selftest``.

Each check prints one ``PASS``/``FAIL`` line. Training-based checks live in
the test suite; everything here runs in a few seconds.
"""

from __future__ import annotations

import sys
import traceback

import numpy as np

from . import captions, diffusion as D, fields, metrics, samplers, tensor as T, vae_losses as V
from .diffusion import PredictionKind as P
from .rng import Rng


def _grad_primitives(rng):
    x = T.Tensor(rng.normal((3, 4)) + 2.0, requires_grad=True)
    w = T.Tensor(rng.normal((4, 2)), requires_grad=True)

    def f(x, w):
        h = T.tanh(x @ w) + T.log(T.sqrt(x * x + 1.0)).sum() * 0.1
        return T.mean(T.gelu_tanh(h) * T.softmax(h, axis=-1))

    return T.grad_check(f, [x, w], tol=1e-5).passed


def _grad_mlp(rng):
    mlp = fields.MlpField(2, 2, (8, 8), 4, 4, rng)
    for p in mlp.params():
        p.data[...] = rng.normal(p.shape) * 0.5
    x = rng.normal((3, 2))
    t = rng.uniform(3)
    return T.grad_check(lambda *_: T.mean(T.square(mlp(x, t, [0, 1, -1]))), mlp.params(), tol=1e-4).passed


def _round_trip(rng):
    x0, eps = rng.normal((1000, 3)), rng.normal((1000, 3))
    t = 0.1 + 0.8 * rng.uniform(1000)
    x_t, v = D.diffuse(x0, eps, t), D.v_target(x0, eps, t)
    back = D.convert_prediction(D.convert_prediction(v, P.V, P.EPS, x_t, t), P.EPS, P.V, x_t, t)
    return (np.max(np.abs(D.convert_prediction(v, P.V, P.X0, x_t, t) - x0)) < 1e-10
            and np.max(np.abs(back - v)) < 1e-10)


def _solver_order(rng):
    def err(method, n):
        x = samplers.sample(lambda x, t, c: x, np.array([1.0]), None, samplers.SamplerConfig(method, n))
        return abs(x[0] - np.exp(-1.0))

    slopes = []
    for method in samplers.Method:
        e = [err(method, n) for n in (20, 40, 80)]
        slopes.append(-np.polyfit(np.log([20, 40, 80]), np.log(e), 1)[0])
    return abs(slopes[0] - 1) < 0.2 and abs(slopes[1] - 2) < 0.2 and samplers.nfe_for("heun", 50) == 99


def _guidance(rng):
    spec = samplers.GuidanceSpec(w_cfg=3.0)
    f = samplers.guided_field(lambda x, t, c: np.full_like(x, 2.0), lambda x, t, c: np.ones_like(x), spec)
    ident = samplers.guided_field(lambda x, t, c: x * 1.5, lambda x, t, c: -x, samplers.GuidanceSpec())
    x = rng.normal(4)
    return np.all(f(np.zeros(1), 0.5) == 4.0) and np.array_equal(ident(x, 0.3), x * 1.5)


def _metric_oracles(rng):
    a = metrics.GaussianStats(np.zeros(1), np.eye(1))
    b = metrics.GaussianStats(np.ones(1), np.eye(1))
    pts = rng.normal((200, 3))
    return (abs(metrics.frechet_distance(a, b) - 1.0) < 1e-6
            and metrics.frechet_distance_sets(pts, pts) < 1e-8
            and abs(metrics.inception_score(np.eye(5)) - 5.0) < 1e-6)


def _vae(rng):
    x = V.chirp(4096, 100.0, 6000.0, 16000)
    res = V.DEFAULT_RESOLUTIONS[0]
    post = V.LatentPosterior(np.array([1.0]), np.array([0.0]))
    return (V.mrstft_loss(x, x) == 0.0 and abs(V.spectral_convergence(x, 0.5 * x, res) - 0.5) < 1e-6
            and V.gaussian_kl_loss(post) == 0.5)


def _dit_init(rng):
    model = fields.DiT(fields.DiTConfig(), rng)
    out = model(rng.normal((4, 1)), 0.3, rng.normal((3, 8)))
    q, k = rng.normal((5, 6)), rng.normal((5, 6))
    pos = np.arange(5.0)
    qa, ka = fields.rope_apply(T.Tensor(q), T.Tensor(k), pos)
    qb, kb = fields.rope_apply(T.Tensor(q), T.Tensor(k), pos + 7.0)
    shift_ok = np.max(np.abs((qa @ ka.T).data - (qb @ kb.T).data)) < 1e-10
    return np.all(out.data == 0.0) and shift_ok


def _captions(rng):
    ok = captions.keyword_filter("The audio is noisy and distant") == (False, "noisy")
    sel = captions.best_caption(np.eye(3), np.array([0.3, 0.5, 0.44]) / np.linalg.norm([0.3, 0.5, 0.44]))
    return ok and sel.index == 1 and captions.FilterConfig().threshold == 0.45


def _logit_normal(rng):
    t = D.sample_t(D.TimestepSampler.LOGIT_NORMAL, rng, 100_000)
    return abs(np.median(t) - 0.5) < 0.01 and abs(np.mean((t >= 0.25) & (t <= 0.75)) - 0.728) < 0.01


CHECKS = [
    ("gradients: primitives", _grad_primitives),
    ("gradients: MLP field", _grad_mlp),
    ("parameterization round trip", _round_trip),
    ("solver order and Heun NFE", _solver_order),
    ("guidance identities", _guidance),
    ("metric oracles", _metric_oracles),
    ("autoencoder losses", _vae),
    ("DiT zero output and RoPE shift invariance", _dit_init),
    ("caption selection and keywords", _captions),
    ("logit-normal timesteps", _logit_normal),
]


def run_selftest(seed: int = 0, out=sys.stdout) -> bool:
    root = Rng(seed)
    all_ok = True
    for i, (name, check) in enumerate(CHECKS):
        try:
            ok = bool(check(root.derive(i)))
            detail = ""
        except Exception as exc:  # a crashing check is a failing check
            ok = False
            detail = f" ({type(exc).__name__}: {exc})"
            traceback.print_exc(file=sys.stderr)
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}{detail}", file=out)
    return all_ok
