import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from scmmsb.cli import ConfigError, main, resolve_settings
from scmmsb.sgld import PosteriorSummary

FAST = ["--iterations", "30", "--burn-in", "10"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert run("generate", "--variant", 1, "--seed", 7, "--out", out) == 0
    assert run("infer", "--out", out, "--seed", 7, *FAST) == 0
    assert run("detect", "--out", out) == 0
    assert run("report", "--out", out) == 0
    return out


def test_generate_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--variant", 1, "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("network.tsv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_variant_truths(tmp_path):
    assert run("generate", "--variant", 2, "--out", tmp_path / "v2") == 0
    truth = json.loads((tmp_path / "v2" / "truth.json").read_text())
    assert truth["locally_changed_nodes"] == {"5": [13, 14, 15, 16, 17]}
    assert run("generate", "--variant", 3, "--out", tmp_path / "v3") == 0
    truth3 = json.loads((tmp_path / "v3" / "truth.json").read_text())
    assert truth3["num_steps"] == 12 and len(truth3["true_pi"]) == 12
    lines = (tmp_path / "v3" / "network.tsv").read_text().splitlines()
    assert "# num_steps=12" in lines
    assert max(int(l.split()[0]) for l in lines if not l.startswith("#")) == 11


def test_generate_bad_variant(tmp_path):
    assert run("generate", "--variant", 4, "--out", tmp_path) == 2


def test_pipeline_outputs(pipeline):
    post = PosteriorSummary.from_json((pipeline / "posterior.json").read_text())
    assert post.mean_pi.shape == (9, 30, 3)
    trace = read_csv(pipeline / "loglik_trace.csv")
    assert trace[0] == ["iteration", "loglik", "dyads_touched"] and len(trace) == 31
    rep = json.loads((pipeline / "change_report.json").read_text())
    assert list(rep) == sorted(rep)
    dist = read_csv(pipeline / "global_distances.csv")
    assert dist[0] == ["t", "distance", "flagged"] and len(dist) == 9
    local = read_csv(pipeline / "local_scores.csv")
    assert local[0] == ["t", "node", "score", "beta", "flagged"] and len(local) == 1 + 8 * 30


def test_report_tables(pipeline):
    metrics = read_csv(pipeline / "metrics.csv")
    assert metrics[0] == ["t", "perplexity", "aic", "loglik"] and len(metrics) == 10
    assert all(float(r[1]) >= 1 for r in metrics[1:])
    for t in range(9):
        aff = np.array([[float(x) for x in r[1:]] for r in read_csv(pipeline / f"affinity_t{t}.csv")[1:]])
        assert aff.shape == (3, 3)
        np.testing.assert_allclose(aff, aff.T, atol=1e-12)
        assert aff.min() >= 0 and aff.max() <= 1
        mem = read_csv(pipeline / f"membership_t{t}.csv")
        assert mem[0] == ["node", "0", "1", "2"] and len(mem) == 31
        rows = np.array([[float(x) for x in r[1:]] for r in mem[1:]])
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)
    rec = json.loads((pipeline / "recovery.json").read_text())
    assert sorted(rec["permutation"]) == [0, 1, 2] and 0 <= rec["recovery_error"] <= 2
    assert (pipeline / "metrics.csv").read_bytes().count(b"\r\n") == 10


def test_sparse_flag_and_full_minibatch(pipeline, tmp_path):
    src = pipeline / "network.tsv"
    assert run("infer", "--input", src, "--out", tmp_path / "dense", "--sparse", "false", *FAST) == 0
    assert json.loads((tmp_path / "dense" / "posterior.json").read_text())["sparse_mode"] is False
    assert run("infer", "--input", src, "--out", tmp_path / "mb", "--minibatch", "1.0", *FAST) == 0
    touched = {int(r[2]) for r in read_csv(tmp_path / "mb" / "loglik_trace.csv")[1:]}
    assert touched == {9 * 435}


def test_resume_is_bit_exact(pipeline, tmp_path):
    src = pipeline / "network.tsv"
    assert run("infer", "--input", src, "--out", tmp_path / "whole", "--seed", 3, *FAST) == 0
    assert run("infer", "--input", src, "--out", tmp_path / "half", "--seed", 3,
               "--iterations", 12, "--burn-in", 10) == 0
    assert run("infer", "--input", src, "--out", tmp_path / "half",
               "--resume", tmp_path / "half" / "checkpoint.json", "--iterations", 30) == 0
    for f in ("posterior.json", "checkpoint.json", "loglik_trace.csv"):
        assert (tmp_path / "half" / f).read_bytes() == (tmp_path / "whole" / f).read_bytes()


def test_periodic_checkpoints(pipeline, tmp_path):
    assert run("infer", "--input", pipeline / "network.tsv", "--out", tmp_path,
               "--checkpoint-every", 10, *FAST) == 0
    assert json.loads((tmp_path / "checkpoint.json").read_text())["iteration"] == 30


def test_missing_posterior_is_usage_error(tmp_path):
    assert run("detect", "--out", tmp_path) == 2
    assert run("report", "--out", tmp_path) == 2


def test_dimension_mismatch_is_config_error(pipeline, tmp_path):
    src = pipeline / "network.tsv"
    assert run("infer", "--input", src, "--out", tmp_path, "--num-nodes", 20) == 2
    assert run("infer", "--input", src, "--out", tmp_path, "--num-steps", 5) == 2
    assert run("infer", "--input", src, "--out", tmp_path, "--K", 30) == 2
    assert not (tmp_path / "posterior.json").exists()


def test_bad_values_are_config_errors(pipeline, tmp_path):
    src = pipeline / "network.tsv"
    assert run("infer", "--input", src, "--out", tmp_path, "--minibatch", "0") == 2
    assert run("infer", "--input", src, "--out", tmp_path, "--rho", "1.5") == 2
    assert run("infer", "--input", src, "--out", tmp_path, "--sparse", "maybe") == 2
    assert run("detect", "--out", pipeline, "--kappa", "0") == 2


def test_malformed_and_missing_data(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("0 1 2\n0 2 1\n")
    assert run("infer", "--input", bad, "--out", tmp_path, "--num-nodes", 3, "--num-steps", 1) == 3
    assert run("infer", "--input", tmp_path / "nope.tsv", "--out", tmp_path) == 3


def test_single_step_detect(tmp_path):
    net = tmp_path / "one.tsv"
    net.write_text("0 0 1\n0 1 2\n0 3 4\n0 4 5\n")
    assert run("infer", "--input", net, "--out", tmp_path, "--K", 2, *FAST) == 0
    assert run("detect", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "change_report.json").read_text())
    assert rep["global_distances"] == [] and rep["global_change_points"] == []
    assert rep["flagged_nodes"] == {}
    assert len(read_csv(tmp_path / "global_distances.csv")) == 1


def test_kappa_override(pipeline, tmp_path):
    post = pipeline / "posterior.json"
    dists = [float(r[1]) for r in read_csv(pipeline / "global_distances.csv")[1:]]
    med = float(np.median(dists))
    for kappa in (0.5, 3.0, 100.0):
        out = tmp_path / str(kappa)
        assert run("detect", "--posterior", post, "--out", out, "--kappa", kappa) == 0
        rep = json.loads((out / "change_report.json").read_text())
        want = [i + 1 for i, d in enumerate(dists) if d > kappa * med]
        assert rep["global_change_points"] == want
        assert rep["threshold_used"] == pytest.approx(kappa * med)


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nseed = 11\nkappa = 4.5\nminibatch-fraction = 0.3\n")
    s = resolve_settings({}, str(cfg), environ={})
    assert (s["seed"], s["kappa"], s["minibatch_fraction"]) == (11, 4.5, 0.3)
    s = resolve_settings({"kappa": "2"}, str(cfg), environ={"DYNET_SEED": "99"})
    assert (s["seed"], s["kappa"]) == (11, 2.0)
    assert resolve_settings({}, None, environ={"DYNET_SEED": "99"})["seed"] == 99
    assert resolve_settings({"seed": "5"}, None, environ={"DYNET_SEED": "99"})["seed"] == 5
    assert resolve_settings({}, None, environ={})["num_iterations"] == 3000
    cfg.write_text("colour = red\n")
    with pytest.raises(ConfigError):
        resolve_settings({}, str(cfg), environ={})


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DYNET_SEED", "7")
    assert run("generate", "--out", tmp_path / "env") == 0
    monkeypatch.delenv("DYNET_SEED")
    assert run("generate", "--seed", 7, "--out", tmp_path / "flag") == 0
    assert (tmp_path / "env" / "network.tsv").read_bytes() == (tmp_path / "flag" / "network.tsv").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scmmsb", "detect", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "posterior" in proc.stderr
