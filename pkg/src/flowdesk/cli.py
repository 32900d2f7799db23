"""Command-line entry point: ``flowdesk <subcommand> [options]``.

Errors are reported as one line, ``error[CODE]: message``, with a nonzero
exit status.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import captions, metrics, vae_losses
from .errors import ConfigError, FlowdeskError, SchemaError
from .rng import Rng
from .samplers import GuidanceSpec, Method, sample, sweep, sweep_to_csv
from .toy import DATASETS, gen_toy_dataset
from .train import (config_keys, load_config, load_model, model_fields, sample_points,
                    samples_to_csv, train)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(FlowdeskError):
    code = "E_USAGE"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _write(out, text: str) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8", newline="\n")


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    overrides = {k: v for k, v in vars(args).items() if k in config_keys() and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    log = None if args.quiet else (lambda step, v: print(f"step {step:6d}  loss {v:.6f}", file=sys.stderr))
    trained, report = train(cfg, log=log, eval_samples=args.eval_samples)
    out = Path(args.out or "model.ckpt.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    trained.save(out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    # wall time goes to stderr so the report file stays byte-deterministic
    _write(report_path, _json(report.to_dict(include_wall_time=False)))
    print(f"wall time {report.wall_time:.2f} s", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# sample / sweep


def cmd_sample(args) -> int:
    trained = load_model(args.checkpoint)
    pts, labels = sample_points(trained, args.n, method=args.method, nfe=args.nfe, w_cfg=args.w_cfg,
                                seed=args.seed or 0, label=args.label,
                                cfg_interval=(0.0, 1.0 - args.cfg_skip))
    _write(args.out, samples_to_csv(pts, labels))
    return 0


def cmd_sweep(args) -> int:
    trained = load_model(args.checkpoint)
    seed = args.seed or 0
    ref = gen_toy_dataset(trained.config.data.name, args.n, seed + 1).points
    labels = None if trained.n_classes == 0 else np.arange(args.n) % trained.n_classes

    def draw(field, config, row_rng):
        return sample(field, row_rng.normal((args.n, 2)), labels, config)

    def make_field(spec: GuidanceSpec):
        if labels is None:
            spec = GuidanceSpec(w_ag=spec.w_ag, bad_field=spec.bad_field)
        return model_fields(trained, spec)

    metric_fns = {
        "fd": lambda s, e: metrics.frechet_distance_sets(e, s),
        "w2": lambda s, e: metrics.wasserstein2(e, s),
    }
    methods = [Method(m) for m in args.methods.split(",")]
    rows = sweep(make_field, metric_fns, args.nfe, args.cfg, methods, ref, Rng(seed), draw)
    _write(args.out, sweep_to_csv(rows, list(metric_fns)))
    return 0


# ---------------------------------------------------------------------------
# metrics


def read_points(path) -> np.ndarray:
    """Vectors from JSON-lines (``{"id", "vec"}``) or a sample CSV (x, y columns)."""
    path = Path(path)
    if not path.exists():
        raise SchemaError("file not found", path)
    if path.suffix.lower() != ".csv":
        return metrics.read_vectors(path)[1]
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["x", "y"]:
            raise SchemaError("CSV header must start with x,y", path, 1)
        rows = []
        for lineno, row in enumerate(reader, 2):
            try:
                rows.append([float(row[0]), float(row[1])])
            except (ValueError, IndexError):
                raise SchemaError("expected numeric x,y", path, lineno) from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


NOT_COMPUTED = "not computed"


def cmd_metrics(args) -> int:
    if args.ref is None and args.ref_dataset is None:
        raise ConfigError("metrics needs --ref or --ref-dataset")
    gen = read_points(args.gen)
    if args.ref is not None:
        ref = read_points(args.ref)
    else:
        ref = gen_toy_dataset(args.ref_dataset, args.ref_n, (args.seed or 0) + 1).points
    report = {
        "fd": metrics.frechet_distance_sets(ref, gen),
        "w2": metrics.wasserstein2(ref, gen, rng=Rng(args.seed or 0)),
        "n_ref": int(len(ref)),
        "n_gen": int(len(gen)),
    }
    if args.ref_posteriors and args.gen_posteriors:
        p_ref = metrics.read_vectors(args.ref_posteriors)[1]
        p_gen = metrics.read_vectors(args.gen_posteriors)[1]
        report["paired_kl"] = metrics.paired_kl(p_ref, p_gen)
        report["inception_score"] = metrics.inception_score(p_gen)
    elif args.gen_posteriors:
        report["paired_kl"] = NOT_COMPUTED
        report["inception_score"] = metrics.inception_score(metrics.read_vectors(args.gen_posteriors)[1])
    else:
        report["paired_kl"] = NOT_COMPUTED
        report["inception_score"] = NOT_COMPUTED
    if args.text_emb and args.audio_emb:
        report["embedding_score"] = metrics.embedding_score(metrics.read_vectors(args.text_emb)[1],
                                                            metrics.read_vectors(args.audio_emb)[1])
    else:
        report["embedding_score"] = NOT_COMPUTED
    _write(args.out, _json(report))
    return 0


# ---------------------------------------------------------------------------
# filter-captions


def filter_config(path, threshold=None) -> captions.FilterConfig:
    values = {}
    if path is not None:
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = dict(doc.get("filter", doc))
    allowed = {"threshold", "candidates_per_segment", "keyword_blocklist", "segment_length",
               "subsample_keep_every"}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown filter keys: {', '.join(sorted(unknown))}")
    if threshold is not None:
        values["threshold"] = threshold
    try:
        return captions.FilterConfig(**values)
    except (TypeError, FlowdeskError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_filter(args) -> int:
    cfg = filter_config(args.config, args.threshold)
    records = captions.read_records(args.records, cfg.segment_length)
    cands = captions.read_candidates(args.candidates)
    embedder = captions.toy_embedder if args.embed_missing else None
    accepted, summary = captions.build_dataset(records, cands, cfg, embedder)
    out = Path(args.out or "captions_out")
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "accepted.jsonl", captions.accepted_to_jsonl(accepted))
    _write(out / "summary.json", _json(summary.to_dict()))
    _write(out / "histogram.csv", captions.histogram_to_csv(summary))
    print(f"accepted {summary.accepted} of {summary.total}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# vae-loss


def _test_signal(kind, n, sample_rate, rng):
    if kind == "sine":
        return vae_losses.sine(n, 440.0, sample_rate)
    if kind == "chirp":
        return vae_losses.chirp(n, 100.0, 0.4 * sample_rate, sample_rate)
    if kind == "noise":
        return vae_losses.noise(n, rng, 0.3)
    raise ConfigError(f"unknown test signal {kind!r}")


def cmd_vae_loss(args) -> int:
    rng = Rng(args.seed or 0)
    if args.ref is not None:
        if args.est is None:
            raise ConfigError("--ref needs --est")
        ref = vae_losses.read_raw(args.ref, args.channels)
        est = vae_losses.read_raw(args.est, args.channels)
    else:
        left = _test_signal(args.signal, args.length, args.sample_rate, rng.derive(0))
        right = _test_signal("noise", args.length, args.sample_rate, rng.derive(1)) * 0.2 + 0.5 * left
        ref = np.stack([left, right])[: args.channels]
        est = args.scale * ref + args.perturb * rng.derive(2).normal(ref.shape)
    report = {"channels": int(ref.shape[0]), "samples": int(ref.shape[1])}
    if ref.shape[0] == 2:
        x = vae_losses.StereoSignal(ref[0], ref[1], args.sample_rate)
        x_hat = vae_losses.StereoSignal(est[0], est[1], args.sample_rate)
        report["stereo_mrstft"] = vae_losses.stereo_mrstft_loss(x, x_hat)
        mono_ref, mono_est = x.sum, x_hat.sum
    else:
        mono_ref, mono_est = ref[0], est[0]
    report["mrstft"] = vae_losses.mrstft_loss(mono_ref, mono_est)
    report["spectral_convergence"] = {
        f"{r.fft_size}/{r.hop}/{r.window_length}": vae_losses.spectral_convergence(mono_ref, mono_est, r)
        for r in vae_losses.DEFAULT_RESOLUTIONS
    }
    _write(args.out, _json(report))
    return 0


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(seed=args.seed or 0) else 1


# ---------------------------------------------------------------------------


def _common(p, out_help="output path (default: stdout)"):
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--seed", type=_seed, default=None, help="unsigned 64-bit seed")
    p.add_argument("--out", default=None, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowdesk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a 2-D flow model")
    _common(p, "checkpoint path (default: model.ckpt.json)")
    p.add_argument("--report", default=None, help="run report JSON (default: next to checkpoint)")
    p.add_argument("--eval-samples", type=int, default=1000)
    p.add_argument("--quiet", action="store_true")
    for key in config_keys():
        if key != "seed":
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--method", choices=[m.value for m in Method], default=None)
    p.add_argument("--nfe", type=int, default=None)
    p.add_argument("--w-cfg", type=float, default=None)
    p.add_argument("--cfg-skip", type=float, default=0.0,
                   help="fraction of the trajectory (from the noise end) run without CFG")
    p.add_argument("--label", type=int, default=None, help="class for every sample")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep", help="NFE x guidance grid with FD and W2 columns")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", type=_ints, default=[5, 10, 20, 50, 100])
    p.add_argument("--cfg", type=_floats, default=[1.0])
    p.add_argument("--methods", default="euler")
    p.add_argument("--n", type=int, default=2000)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("metrics", help="FD, W2 and optional posterior/embedding metrics")
    _common(p)
    p.add_argument("--gen", required=True, help="generated vectors (JSONL or sample CSV)")
    p.add_argument("--ref", default=None, help="reference vectors (JSONL or sample CSV)")
    p.add_argument("--ref-dataset", choices=DATASETS, default=None)
    p.add_argument("--ref-n", type=int, default=10000)
    p.add_argument("--ref-posteriors", default=None)
    p.add_argument("--gen-posteriors", default=None)
    p.add_argument("--text-emb", default=None)
    p.add_argument("--audio-emb", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("filter-captions", help="select and filter synthetic captions")
    _common(p, "output directory (default: captions_out)")
    p.add_argument("--records", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--embed-missing", action="store_true",
                   help="embed candidates without vectors using the hashed-trigram embedder")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("vae-loss", help="autoencoder loss suite on test signals or raw files")
    _common(p)
    p.add_argument("--signal", choices=("sine", "chirp", "noise"), default="chirp")
    p.add_argument("--length", type=int, default=16384)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--channels", type=int, choices=(1, 2), default=2)
    p.add_argument("--scale", type=float, default=0.5, help="estimate = scale * reference + perturbation")
    p.add_argument("--perturb", type=float, default=0.0)
    p.add_argument("--ref", default=None, help="raw f64 little-endian reference")
    p.add_argument("--est", default=None, help="raw f64 little-endian estimate")
    p.set_defaults(func=cmd_vae_loss)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    _common(p)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FlowdeskError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{exc.code}]: {msg}", file=sys.stderr)
    except OSError as exc:
        print(f"error[E_IO]: {exc}".replace("\n", " "), file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
