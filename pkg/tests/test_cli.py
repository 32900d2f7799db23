import json
import re

import numpy as np
import pytest

from flowdesk import captions, metrics
from flowdesk.cli import main
from flowdesk.vae_losses import write_raw

ERROR_LINE = re.compile(r"^error\[E_[A-Z_]+\]: \S.*$")

TINY = ["--optim.steps", "3", "--data.n", "200", "--model.hidden", "8,8", "--optim.batch", "16",
        "--eval-samples", "10", "--quiet"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(code, err, prefix):
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]) and lines[0].startswith(prefix)


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "--out", str(d / "m.json"), "--data.name", "cond_checkerboard", *TINY]) == 0
    return d / "m.json"


class TestTrain:
    def test_outputs_are_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, _, err = run(capsys, "train", "--out", tmp_path / f"{name}.json", "--seed", 7, *TINY)
            assert code == 0 and "wall time" in err
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.report.json").read_bytes() == (tmp_path / "b.report.json").read_bytes()
        report = json.loads((tmp_path / "a.report.json").read_text())
        assert len(report["loss_curve"]) == 1

    def test_config_file_and_flag(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[optim]\nsteps = 60\n")
        code, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.json", *TINY[2:])
        steps = lambda: json.loads((tmp_path / "m.json").read_text())["__meta__"]["config"]["optim"]["steps"]
        assert code == 0 and steps() == 60
        run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.json", *TINY)
        assert steps() == 3

    def test_config_error(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--out", tmp_path / "m.json", "--objective.kind", "ddpm")
        assert_error(code, err, "error[E_CONFIG]")


class TestSample:
    def test_csv_and_determinism(self, checkpoint, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "sample", "--checkpoint", checkpoint, "--n", 12, "--nfe", 4,
                       "--seed", 3, "--out", tmp_path / f"{name}.csv")[0] == 0
        a = (tmp_path / "a.csv").read_text()
        assert a == (tmp_path / "b.csv").read_text()
        lines = a.splitlines()
        assert lines[0] == "x,y,label" and len(lines) == 13

    def test_empty(self, checkpoint, capsys):
        code, out, _ = run(capsys, "sample", "--checkpoint", checkpoint, "--n", 0)
        assert code == 0 and out == "x,y,label\n"

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "sample", "--checkpoint", tmp_path / "nope.json")
        assert_error(code, err, "error[E_SCHEMA]")

    def test_bad_nfe(self, checkpoint, capsys):
        code, _, err = run(capsys, "sample", "--checkpoint", checkpoint, "--nfe", 0)
        assert_error(code, err, "error[E_CONTRACT]")


class TestSweep:
    def test_single_row(self, checkpoint, capsys):
        code, out, _ = run(capsys, "sweep", "--checkpoint", checkpoint, "--nfe", "5", "--n", 50)
        lines = out.splitlines()
        assert code == 0 and lines[0] == "method,steps,nfe,w_cfg,w_ag,fd,w2" and len(lines) == 2

    def test_grid(self, checkpoint, capsys):
        code, out, _ = run(capsys, "sweep", "--checkpoint", checkpoint, "--nfe", "3,6", "--cfg", "1,3",
                           "--methods", "euler,heun", "--n", 40)
        rows = out.splitlines()[1:]
        assert code == 0 and len(rows) == 8
        assert all(float(r.split(",")[5]) >= 0 for r in rows)

    def test_usage_error(self, checkpoint, capsys):
        code, _, err = run(capsys, "sweep", "--checkpoint", checkpoint, "--nfe", "five")
        assert_error(code, err, "error[E_USAGE]")


class TestMetrics:
    def test_identical_sets(self, tmp_path, capsys, rng):
        v = rng.normal((50, 3))
        metrics.write_vectors(tmp_path / "a.jsonl", range(50), v)
        code, out, _ = run(capsys, "metrics", "--gen", tmp_path / "a.jsonl", "--ref", tmp_path / "a.jsonl")
        report = json.loads(out)
        assert code == 0 and report["fd"] <= 1e-8
        assert report["paired_kl"] == report["inception_score"] == report["embedding_score"] == "not computed"

    def test_shifted_gaussians(self, tmp_path, capsys, rng):
        z = rng.normal(4000)
        z = (z - z.mean()) / z.std(ddof=1)
        metrics.write_vectors(tmp_path / "r.jsonl", range(4000), z[:, None])
        metrics.write_vectors(tmp_path / "g.jsonl", range(4000), z[:, None] + 1.0)
        code, out, _ = run(capsys, "metrics", "--gen", tmp_path / "g.jsonl", "--ref", tmp_path / "r.jsonl")
        assert code == 0 and abs(json.loads(out)["fd"] - 1.0) < 1e-6

    def test_posteriors_and_embeddings(self, tmp_path, capsys):
        metrics.write_vectors(tmp_path / "p.jsonl", range(2), np.array([[1.0, 0.0], [0.0, 1.0]]))
        metrics.write_vectors(tmp_path / "q.jsonl", range(2), np.array([[0.5, 0.5], [0.5, 0.5]]))
        metrics.write_vectors(tmp_path / "t.jsonl", range(2), np.array([[1.0, 0.0], [1.0, 0.0]]))
        code, out, _ = run(capsys, "metrics", "--gen", tmp_path / "t.jsonl", "--ref", tmp_path / "t.jsonl",
                           "--ref-posteriors", tmp_path / "p.jsonl", "--gen-posteriors", tmp_path / "q.jsonl",
                           "--text-emb", tmp_path / "t.jsonl", "--audio-emb", tmp_path / "t.jsonl")
        report = json.loads(out)
        assert code == 0
        assert report["paired_kl"] == pytest.approx(np.log(2), abs=1e-9)
        assert report["inception_score"] == pytest.approx(1.0)
        assert report["embedding_score"] == pytest.approx(1.0)

    def test_sample_csv_against_dataset(self, checkpoint, tmp_path, capsys):
        run(capsys, "sample", "--checkpoint", checkpoint, "--n", 30, "--nfe", 3, "--out", tmp_path / "s.csv")
        code, out, _ = run(capsys, "metrics", "--gen", tmp_path / "s.csv", "--ref-dataset", "cond_checkerboard",
                           "--ref-n", 100)
        assert code == 0 and json.loads(out)["n_gen"] == 30

    def test_malformed_line(self, tmp_path, capsys):
        (tmp_path / "bad.jsonl").write_text('{"id": 1, "vec": [1.0]}\n{"id": 2}\n')
        code, _, err = run(capsys, "metrics", "--gen", tmp_path / "bad.jsonl", "--ref", tmp_path / "bad.jsonl")
        assert_error(code, err, "error[E_SCHEMA]")
        assert "bad.jsonl:2" in err


def write_corpus(tmp_path, sims):
    recs, cands = [], []
    for i, s in enumerate(sims):
        recs.append({"id": f"r{i}", "duration": 10.0, "category": "music", "segments": [[1.0, 0.0]]})
        cands.append({"record_id": f"r{i}", "segment": 0,
                      "captions": [{"text": f"clean {i}", "vec": [s, float(np.sqrt(1 - s * s))]}]})
    (tmp_path / "r.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    (tmp_path / "c.jsonl").write_text("".join(json.dumps(c) + "\n" for c in cands))


class TestFilterCaptions:
    def test_planted_counts(self, tmp_path, capsys):
        write_corpus(tmp_path, [0.305, 0.425, 0.555, 0.805])
        code, _, _ = run(capsys, "filter-captions", "--records", tmp_path / "r.jsonl",
                         "--candidates", tmp_path / "c.jsonl", "--out", tmp_path / "out")
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert code == 0 and summary["accepted"] == 2 and summary["rejected_threshold"] == 2
        hist = (tmp_path / "out" / "histogram.csv").read_text().splitlines()
        assert [hist[1 + b].split(",")[1] for b in (30, 42, 55, 80)] == ["1", "1", "1", "1"]
        assert len((tmp_path / "out" / "accepted.jsonl").read_text().splitlines()) == 2

    def test_threshold_flag_beats_file(self, tmp_path, capsys):
        write_corpus(tmp_path, [0.305, 0.425, 0.555, 0.805])
        (tmp_path / "f.toml").write_text("[filter]\nthreshold = 0.9\n")
        args = ["filter-captions", "--records", tmp_path / "r.jsonl", "--candidates", tmp_path / "c.jsonl",
                "--config", tmp_path / "f.toml", "--out", tmp_path / "out"]
        run(capsys, *args)
        assert json.loads((tmp_path / "out" / "summary.json").read_text())["accepted"] == 0
        run(capsys, *args, "--threshold", "0.3")
        assert json.loads((tmp_path / "out" / "summary.json").read_text())["accepted"] == 4

    def test_empty_records(self, tmp_path, capsys):
        (tmp_path / "r.jsonl").write_text("")
        (tmp_path / "c.jsonl").write_text("")
        code, _, _ = run(capsys, "filter-captions", "--records", tmp_path / "r.jsonl",
                         "--candidates", tmp_path / "c.jsonl", "--out", tmp_path / "out")
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert code == 0 and summary["total"] == 0 and sum(summary["histogram"]) == 0
        assert (tmp_path / "out" / "accepted.jsonl").read_text() == ""

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "filter-captions", "--records", tmp_path / "none.jsonl",
                           "--candidates", tmp_path / "none.jsonl")
        assert_error(code, err, "error[E_IO]")

    def test_embed_missing(self, tmp_path, capsys):
        audio = captions.toy_embedder("a dog barks")
        (tmp_path / "r.jsonl").write_text(json.dumps({"id": "a", "duration": 10, "category": "other",
                                                      "segments": [audio.tolist()]}) + "\n")
        (tmp_path / "c.jsonl").write_text(json.dumps({"record_id": "a", "segment": 0,
                                                      "captions": [{"text": "a dog barks"}]}) + "\n")
        args = ["filter-captions", "--records", tmp_path / "r.jsonl", "--candidates", tmp_path / "c.jsonl",
                "--out", tmp_path / "out"]
        code, _, err = run(capsys, *args)
        assert_error(code, err, "error[E_PROVIDER]")
        assert run(capsys, *args, "--embed-missing")[0] == 0


class TestVaeLoss:
    def test_half_scale_chirp(self, capsys):
        code, out, _ = run(capsys, "vae-loss", "--signal", "chirp", "--length", 8192)
        report = json.loads(out)
        assert code == 0 and report["channels"] == 2
        assert all(v == pytest.approx(0.5) for v in report["spectral_convergence"].values())

    def test_raw_files(self, tmp_path, capsys, rng):
        x = rng.normal(4096)
        write_raw(tmp_path / "a.raw", [x])
        code, out, _ = run(capsys, "vae-loss", "--ref", tmp_path / "a.raw", "--est", tmp_path / "a.raw",
                           "--channels", 1)
        assert code == 0 and json.loads(out)["mrstft"] == 0.0

    def test_silent_reference(self, tmp_path, capsys):
        write_raw(tmp_path / "z.raw", [np.zeros(4096)])
        code, _, err = run(capsys, "vae-loss", "--ref", tmp_path / "z.raw", "--est", tmp_path / "z.raw",
                           "--channels", 1)
        assert_error(code, err, "error[E_DEGENERATE_REF]")


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0 and out.count("PASS") == 10 and "FAIL" not in out


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "explode")
    assert_error(code, err, "error[E_USAGE]")
