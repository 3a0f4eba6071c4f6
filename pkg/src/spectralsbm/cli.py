"""Command line front end: simulate, embed, infer, summarize and pipeline."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, parse_assignments, read_config
from .embed import EmbeddingError, ase, elbow, lse, read_embedding, svd_embed, write_embedding
from .graph import GraphError, load_edgelist
from .sampler import SamplerError, THREADS_ENV, run_chains, side_views
from .summary import (read_trace, summarise, write_clusters, write_psm, write_table,
                      write_trace)
from .synth import TruncationError, fig2_B, read_truth, simulate, write_outputs

log = logging.getLogger("spectralsbm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
PRESETS = {"fig2": {"sim.n": 500, "sim.K": 5, "sim.d_target": 2, "sim.kind": "undirected"}}
DEFAULT_M = 50
KIND_MODE = {"undirected": "undirected", "directed": "directed_shared", "bipartite": "bipartite"}


class UsageError(ValueError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(outdir, command, cfg: Config, inputs=(), outputs=None, **extra):
    """Resolved config plus digests of every input and output file."""
    outdir = Path(outdir)
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg.resolved(),
        "inputs": {str(p): sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {k: {"path": Path(p).name, "sha256": sha256(p)}
                    for k, p in sorted((outputs or {}).items())},
    }
    doc.update(extra)
    path = outdir / f"{command}_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

# flag dest -> dotted config key
FLAG_KEYS = {
    "kind": "sim.kind", "n": "sim.n", "n_prime": "sim.n_prime", "K": "sim.K",
    "K_prime": "sim.K_prime", "d": "sim.d_target", "beta_a": "sim.beta_a",
    "beta_b": "sim.beta_b", "cocluster": "sim.cocluster", "preset": "sim.preset",
    "graph_kind": "graph.kind", "type": "embed.type", "m": "embed.m",
    "isolated": "embed.isolated",
    "mode": "run.mode", "chains": "run.n_chains", "init_K": "run.init_K",
    "init_K_prime": "run.init_K_prime", "marginalize_d": "run.marginalize_d",
    "k_max": "run.k_max", "debug": "run.debug",
    "d_prior": "prior.d_prior", "second_level": "prior.second_level", "m_cap": "prior.m_cap",
    "iters": "schedule.iters", "burnin": "schedule.burn_in", "thin": "schedule.thin",
    "summary_K": "summary.K", "pear": "summary.pear",
}


def _on_off(text):
    low = text.lower()
    if low not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return low == "on"


def _common(p):
    p.add_argument("--config", help="flat 'key = value' settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override any dotted setting, e.g. prior.kappa0=2")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (sim.seed and run.seed)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _sim_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help="fixed-mean benchmark")
    p.add_argument("--kind", choices=("undirected", "directed", "bipartite"))
    p.add_argument("--n", type=int, help="number of (source) nodes")
    p.add_argument("--n-prime", dest="n_prime", type=int, help="destination nodes (bipartite)")
    p.add_argument("--K", type=int, help="communities")
    p.add_argument("--K-prime", dest="K_prime", type=int, help="destination communities")
    p.add_argument("--d", type=int, help="rank of the block matrix")
    p.add_argument("--beta-a", dest="beta_a", type=float, help="Beta shape a")
    p.add_argument("--beta-b", dest="beta_b", type=float, help="Beta shape b")
    p.add_argument("--cocluster", action="store_const", const=True,
                   help="directed graphs: separate destination communities")


def _embed_flags(p, with_graph=True):
    if with_graph:
        p.add_argument("--graph", required=True, help="edge list file")
        p.add_argument("--graph-kind", dest="graph_kind",
                       choices=("undirected", "directed", "bipartite"))
    p.add_argument("--type", choices=("ase", "lse", "svd"), help="embedding type")
    p.add_argument("--m", type=int, help="number of embedding columns (default min(50, n))")
    p.add_argument("--isolated", choices=("error", "drop"), help="zero-degree nodes under lse")


def _infer_flags(p):
    p.add_argument("--mode", choices=("undirected", "directed_shared", "directed_cocluster",
                                      "bipartite"))
    p.add_argument("--d-prior", dest="d_prior", choices=("constrained", "unconstrained"))
    p.add_argument("--second-level", dest="second_level", type=_on_off, metavar="on|off")
    p.add_argument("--iters", type=int, help="total sweeps including burn-in (default 500000)")
    p.add_argument("--burnin", type=int, help="discarded sweeps (default 25000)")
    p.add_argument("--thin", type=int, help="keep every thin-th sweep after burn-in")
    p.add_argument("--chains", type=int, help=f"independent chains (parallelism capped by "
                                               f"{THREADS_ENV})")
    p.add_argument("--init-K", dest="init_K", type=int, help="K-means start")
    p.add_argument("--init-K-prime", dest="init_K_prime", type=int)
    p.add_argument("--m-cap", dest="m_cap", type=int, help="largest d considered")
    p.add_argument("--k-max", dest="k_max", type=int, help="upper bound on K")
    p.add_argument("--marginalize-d", dest="marginalize_d", action="store_const", const=True,
                   help="draw d from its exact conditional every sweep")
    p.add_argument("--debug", action="store_const", const=True,
                   help="check state invariants after every sweep")


def _summary_flags(p):
    p.add_argument("--truth", help="node,z file for the source side")
    p.add_argument("--truth-prime", dest="truth_prime", help="node,z file for the other side")
    p.add_argument("--cut-K", dest="summary_K", type=int, help="cut the dendrogram at K")
    p.add_argument("--pear", action="store_const", const=True,
                   help="choose the cut by posterior expected adjusted Rand")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectralsbm", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a low-rank blockmodel graph")
    _common(p)
    _sim_flags(p)

    p = sub.add_parser("embed", help="spectral embedding of an edge list")
    _common(p)
    _embed_flags(p)

    p = sub.add_parser("infer", help="run the sampler on an embedding")
    _common(p)
    p.add_argument("--embedding", required=True, help="directory written by 'embed'")
    _infer_flags(p)

    p = sub.add_parser("summarize", help="posterior summaries from traces")
    _common(p)
    p.add_argument("--traces", required=True, help="directory written by 'infer'")
    _summary_flags(p)

    p = sub.add_parser("pipeline", help="simulate (or read) a graph, then embed, infer, summarize")
    _common(p)
    p.add_argument("--graph", help="edge list; simulate when absent")
    p.add_argument("--graph-kind", dest="graph_kind",
                   choices=("undirected", "directed", "bipartite"))
    _sim_flags(p)
    _embed_flags(p, with_graph=False)
    _infer_flags(p)
    _summary_flags(p)
    return ap


def load_config(args) -> Config:
    layers = []
    if args.config:
        layers.append(read_config(args.config))
    preset = getattr(args, "preset", None) or (layers[0].get("sim.preset") if layers else None)
    if preset:
        layers.insert(0, PRESETS[preset])
    layers.append(parse_assignments(args.set))
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()
             if getattr(args, dest, None) is not None}
    if args.seed is not None:
        flags["sim.seed"] = flags["run.seed"] = args.seed
    layers.append(flags)
    return Config(*layers)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg: Config):
    out = Path(args.out)
    spec = cfg.sim_spec()
    preset = cfg["sim.preset"]
    B = None
    if preset == "fig2":
        if (spec.kind, spec.K, spec.d_target) != ("undirected", 5, 2):
            raise UsageError("the fig2 preset fixes kind=undirected, K=5, d=2")
        B = fig2_B()
    g, z, zp, Bt, rejections = simulate(spec, B)
    paths = write_outputs(out, spec, g, z, zp, Bt, rejections, preset=preset)
    write_manifest(out, "simulate", cfg, outputs=paths)
    log.info("simulated %d nodes, %d communities (%d rejected B draws)", spec.n, spec.K,
             rejections)
    return paths


def _embed_graph(g, cfg: Config):
    kind = cfg["embed.type"]
    m = cfg["embed.m"] or min(DEFAULT_M, g.n_rows, g.n_cols)
    if kind == "ase":
        if g.kind != "undirected":
            raise UsageError("ase needs an undirected graph; use --type svd")
        return ase(g, m)
    if kind == "lse":
        if g.kind != "undirected":
            raise UsageError("lse needs an undirected graph")
        return lse(g, m, cfg["embed.isolated"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if g.kind == "undirected":
            log.warning("svd embedding of an undirected graph: treating it as directed")
        return svd_embed(g, m)


def cmd_embed(args, cfg: Config, graph_path=None):
    out = Path(args.out)
    graph_path = graph_path or args.graph
    g = load_edgelist(graph_path, cfg["graph.kind"])
    if cfg["embed.m"] is not None and cfg["embed.m"] > min(g.n_rows, g.n_cols):
        raise UsageError(f"m={cfg['embed.m']} exceeds the number of nodes")
    e = _embed_graph(g, cfg)
    paths = write_embedding(e, out)
    write_manifest(out, "embed", cfg, inputs=[graph_path], outputs=paths,
                   source=e.source, scree_elbow=elbow(e.spectrum))
    return paths


def _load_embedding(emb_dir: Path, source="ase"):
    if not (emb_dir / "embedding.csv").exists():
        raise FileNotFoundError(emb_dir / "embedding.csv")
    prime = emb_dir / "embedding_prime.csv"
    return read_embedding(emb_dir / "embedding.csv", emb_dir / "spectrum.csv",
                          prime if prime.exists() else None, source)


def _write_nodes(path, nodes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"])
        for name in nodes:
            w.writerow([name])


def _read_nodes(path):
    with open(path, newline="") as fh:
        return [r[0] for r in list(csv.reader(fh))[1:]]


def cmd_infer(args, cfg: Config, emb_dir=None):
    out = Path(args.out)
    emb_dir = Path(emb_dir or args.embedding)
    emb = _load_embedding(emb_dir)
    run, hp, sched = cfg.run_config(), cfg.hyperparams(), cfg.schedule()
    try:
        views = side_views(emb, run.mode)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    traces = run_chains(emb, hp, run, sched)
    wall = time.perf_counter() - t0
    outputs = {}
    for c, tr in enumerate(traces):
        for key, p in write_trace(tr, out, stem=f"chain{c}").items():
            outputs[f"chain{c}_{key}"] = p
    nodes = emb.nodes or [str(i) for i in range(emb.n)]
    outputs["nodes"] = out / "nodes.csv"
    _write_nodes(outputs["nodes"], nodes)
    if len(views) == 2:
        outputs["nodes_prime"] = out / "nodes_prime.csv"
        _write_nodes(outputs["nodes_prime"], emb.nodes_prime or range(len(emb.X_prime)))
    inputs = [emb_dir / f for f in ("embedding.csv", "embedding_prime.csv", "spectrum.csv")]
    write_manifest(out, "infer", cfg, inputs=inputs, outputs=outputs, wall_clock_s=wall)
    log.info("%d chain(s) finished in %.1f s", len(traces), wall)
    return outputs


def _truth_vector(path, nodes):
    truth = read_truth(path)
    missing = [v for v in nodes if v not in truth]
    if missing:
        raise UsageError(f"{path}: no truth for node {missing[0]!r}")
    return np.array([truth[v] for v in nodes])


def _pooled_acceptance(traces):
    pooled = {}
    for tr in traces:
        for move, rec in tr.meta.get("acceptance", {}).items():
            p = pooled.setdefault(move, {"proposed": 0, "accepted": 0})
            p["proposed"] += rec["proposed"]
            p["accepted"] += rec["accepted"]
    for rec in pooled.values():
        rec["rate"] = rec["accepted"] / rec["proposed"] if rec["proposed"] else None
    return pooled


def cmd_summarize(args, cfg: Config, trace_dir=None):
    out = Path(args.out)
    trace_dir = Path(trace_dir or args.traces)
    files = sorted(trace_dir.glob("chain*_trace.csv"),
                   key=lambda p: int(p.name[5:-len("_trace.csv")]))
    if not files:
        raise FileNotFoundError(f"no chain*_trace.csv files in {trace_dir}")
    traces = [read_trace(f) for f in files]
    out.mkdir(parents=True, exist_ok=True)
    doc = {"n_chains": len(traces), "acceptance": _pooled_acceptance(traces), "sides": []}
    outputs = {}
    truths = [getattr(args, "truth", None), getattr(args, "truth_prime", None)]
    for side in range(traces[0].n_sides):
        suffix = "" if side == 0 else "_prime"
        node_file = trace_dir / f"nodes{suffix}.csv"
        n = traces[0].z[side].shape[1]
        nodes = _read_nodes(node_file) if node_file.exists() else [str(i) for i in range(n)]
        truth = _truth_vector(truths[side], nodes) if truths[side] else None
        res = summarise(traces, side, K=cfg["summary.K"], pear_select=cfg["summary.pear"],
                        truth=truth)
        tab = res["tables"]
        names = {"psm": f"psm{suffix}.csv", "map_clusters": f"map_clusters{suffix}.csv",
                 "posterior_d": "posterior_d.csv", "posterior_K": f"posterior_K{suffix}.csv",
                 "posterior_H": f"posterior_H{suffix}.csv"}
        paths = {k + suffix: out / v for k, v in names.items()}
        write_psm(paths["psm" + suffix], res["psm"])
        write_clusters(paths["map_clusters" + suffix], res["clusters"], nodes)
        write_table(paths["posterior_d" + suffix], tab["d"])
        write_table(paths["posterior_K" + suffix], tab["K"])
        write_table(paths["posterior_H" + suffix], tab["H"])
        outputs.update(paths)
        entry = {"map_d": tab["map_d"], "map_K": tab["map_K"], "map_H": tab["map_H"],
                 "n_samples": tab["n_samples"], "n_clusters": int(len(np.unique(res["clusters"]))),
                 "posterior_d": tab["d"], "posterior_K": tab["K"], "posterior_H": tab["H"]}
        if "ari" in res:
            entry["ari"] = res["ari"]
        doc["sides"].append(entry)
    doc.update({k: doc["sides"][0][k] for k in ("map_d", "map_K", "map_H")})
    if "ari" in doc["sides"][0]:
        doc["ari"] = doc["sides"][0]["ari"]
    outputs["summary"] = out / "summary.json"
    outputs["summary"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "summarize", cfg, inputs=files, outputs=outputs)
    return doc


def cmd_pipeline(args, cfg: Config):
    out = Path(args.out)
    stage = argparse.Namespace(**vars(args))
    if args.graph:
        graph_path = Path(args.graph)
        kind = cfg["graph.kind"]
        truth = args.truth
        truth_prime = args.truth_prime
    else:
        stage.out = out / "simulate"
        paths = cmd_simulate(stage, cfg)
        graph_path = paths["edges"]
        kind = cfg["sim.kind"]
        cfg.values["graph.kind"] = kind
        truth, truth_prime = paths["truth"], paths.get("truth_prime")
    if args.type is None and kind != "undirected":
        cfg.values["embed.type"] = "svd"
    if args.mode is None:
        mode = KIND_MODE[kind]
        if kind == "directed" and cfg["sim.cocluster"] and not args.graph:
            mode = "directed_cocluster"
        cfg.values["run.mode"] = mode
    stage.out = out / "embed"
    cmd_embed(stage, cfg, graph_path)
    stage.out = out / "infer"
    cmd_infer(stage, cfg, out / "embed")
    stage.out = out / "summary"
    stage.truth, stage.truth_prime = truth, truth_prime
    doc = cmd_summarize(stage, cfg, out / "infer")
    write_manifest(out, "pipeline", cfg, inputs=[graph_path])
    return doc


COMMANDS = {"simulate": cmd_simulate, "embed": cmd_embed, "infer": cmd_infer,
            "summarize": cmd_summarize, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, GraphError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TruncationError, EmbeddingError, SamplerError, FloatingPointError,
            ArithmeticError, RuntimeError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
