import json

import numpy as np
import pytest

from spectralsbm import cli, synth
from spectralsbm.summary import read_psm, read_trace

SHORT = ["--iters", "300", "--burnin", "50", "--thin", "5"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--out", out, "--n", 90, "--K", 3, "--d", 2, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def emb_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("emb")
    assert run("embed", "--out", out, "--graph", sim_dir / "edges.txt", "--m", 6) == 0
    return out


def write_k2(path, directed=False):
    path.write_text("a b\n" + ("b a\n" if directed else ""))
    return path


def test_simulate_outputs_and_determinism(sim_dir, tmp_path):
    assert run("simulate", "--out", tmp_path, "--n", 90, "--K", 3, "--d", 2, "--seed", 3) == 0
    for name in ("edges.txt", "truth.csv", "B_tilde.csv"):
        assert (sim_dir / name).read_bytes() == (tmp_path / name).read_bytes()
    assert len(set(synth.read_truth(sim_dir / "truth.csv").values())) == 3
    man = json.loads((sim_dir / "simulate_manifest.json").read_text())
    assert man["config"]["sim.K"] == 3 and man["config"]["sim.seed"] == 3


def test_simulate_rank_above_K_is_usage_error(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, "--n", 50, "--K", 5, "--d", 6) == 2
    assert "exceeds" in capsys.readouterr().err


def test_truncation_exhaustion_is_runtime_error(tmp_path, monkeypatch):
    monkeypatch.setattr(synth, "truncate_B", lambda *a, **k: None)
    rc = run("simulate", "--out", tmp_path, "--n", 50, "--K", 4, "--d", 2,
             "--set", "sim.max_retries=2")
    assert rc == 3


def test_fig2_preset(tmp_path):
    assert run("simulate", "--out", tmp_path, "--preset", "fig2", "--n", 60) == 0
    B = np.loadtxt(tmp_path / "B_tilde.csv", delimiter=",", ndmin=2)
    assert np.allclose(B, synth.fig2_B())
    assert run("simulate", "--out", tmp_path, "--preset", "fig2", "--K", 4) == 2


def test_embed_k2_spectrum(tmp_path):
    g = write_k2(tmp_path / "k2.txt")
    assert run("embed", "--out", tmp_path / "e", "--graph", g, "--type", "ase", "--m", 2) == 0
    spec = np.loadtxt(tmp_path / "e" / "spectrum.csv", delimiter=",", skiprows=1, ndmin=2)
    assert sorted(np.round(spec[:, -1], 12)) == [-1.0, 1.0]


def test_embed_usage_errors(tmp_path):
    d = write_k2(tmp_path / "d.txt", directed=True)
    assert run("embed", "--out", tmp_path / "a", "--graph", d, "--graph-kind", "directed",
               "--type", "lse", "--m", 1) == 2
    u = write_k2(tmp_path / "u.txt")
    assert run("embed", "--out", tmp_path / "b", "--graph", u, "--m", 3) == 2
    assert run("embed", "--out", tmp_path / "c", "--graph", tmp_path / "missing.txt") == 2


def test_svd_on_undirected_warns(tmp_path, caplog):
    u = write_k2(tmp_path / "u.txt")
    with caplog.at_level("WARNING", logger="spectralsbm"):
        assert run("embed", "--out", tmp_path / "s", "--graph", u, "--type", "svd",
                   "--m", 1) == 0
    assert "treating it as directed" in caplog.text
    assert (tmp_path / "s" / "embedding_prime.csv").exists()


def test_embed_manifest_digests(emb_dir, sim_dir):
    man = json.loads((emb_dir / "embed_manifest.json").read_text())
    assert man["outputs"]["embedding"]["sha256"] == cli.sha256(emb_dir / "embedding.csv")
    assert list(man["inputs"].values()) == [cli.sha256(sim_dir / "edges.txt")]


def test_infer_chains_distinct_and_reproducible(emb_dir, tmp_path):
    args = ["infer", "--embedding", emb_dir, "--chains", 4, "--seed", 7, *SHORT]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    first = [(tmp_path / "a" / f"chain{c}_alloc.csv").read_bytes() for c in range(4)]
    again = [(tmp_path / "b" / f"chain{c}_alloc.csv").read_bytes() for c in range(4)]
    assert first == again
    assert len(set(first)) == 4
    man = json.loads((tmp_path / "a" / "infer_manifest.json").read_text())
    assert man["wall_clock_s"] > 0 and man["config"]["run.n_chains"] == 4


def test_infer_constrained_debug_run(emb_dir, tmp_path):
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path, "--debug",
               "--d-prior", "constrained", "--second-level", "on", *SHORT) == 0
    tr = read_trace(tmp_path / "chain0_trace.csv")
    assert np.all(tr.d <= tr.k_nonempty[0])


def test_infer_mode_mismatch(emb_dir, tmp_path):
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path, "--mode", "bipartite",
               *SHORT) == 2
    assert run("infer", "--embedding", tmp_path / "nowhere", "--out", tmp_path, *SHORT) == 2


def test_summarize_with_truth(emb_dir, sim_dir, tmp_path):
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path / "t", "--chains", 2,
               "--seed", 1, *SHORT) == 0
    assert run("summarize", "--traces", tmp_path / "t", "--out", tmp_path / "s",
               "--truth", sim_dir / "truth.csv") == 0
    doc = json.loads((tmp_path / "s" / "summary.json").read_text())
    assert 0 <= doc["ari"] <= 1 and doc["n_chains"] == 2
    for name in ("psm.csv", "map_clusters.csv", "posterior_d.csv", "posterior_K.csv",
                 "posterior_H.csv", "summarize_manifest.json"):
        assert (tmp_path / "s" / name).exists()


def test_summarize_single_sample_psm_binary(emb_dir, tmp_path):
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path / "t", "--iters", 2,
               "--burnin", 1, "--thin", 1) == 0
    assert run("summarize", "--traces", tmp_path / "t", "--out", tmp_path / "s") == 0
    psm = read_psm(tmp_path / "s" / "psm.csv")
    assert set(np.unique(psm)) <= {0.0, 1.0}


def test_config_file_and_precedence(emb_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# short run\nschedule.iters = 40\nschedule.burn_in = 10\n"
                   "schedule.thin = 10\nrun.init_K = 3\n")
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path / "a", "--config", cfg,
               "--set", "run.init_K=4", "--thin", 1) == 0
    man = json.loads((tmp_path / "a" / "infer_manifest.json").read_text())["config"]
    assert man["schedule.iters"] == 40 and man["schedule.thin"] == 1
    assert man["run.init_K"] == 4
    assert len(read_trace(tmp_path / "a" / "chain0_trace.csv").d) == 30


def test_unknown_config_key(emb_dir, tmp_path):
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path, "--set",
               "prior.kappa=2") == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("run.seed 3\n")
    assert run("infer", "--embedding", emb_dir, "--out", tmp_path, "--config", bad) == 2


def test_pipeline_bipartite(tmp_path):
    rc = run("pipeline", "--out", tmp_path, "--kind", "bipartite", "--n", 40, "--n-prime", 30,
             "--K", 3, "--K-prime", 2, "--d", 2, "--m", 4, "--seed", 2, *SHORT)
    assert rc == 0
    doc = json.loads((tmp_path / "summary" / "summary.json").read_text())
    assert len(doc["sides"]) == 2 and "ari" in doc["sides"][1]
    assert (tmp_path / "summary" / "map_clusters_prime.csv").exists()
    assert (tmp_path / "pipeline_manifest.json").exists()
