"""Command-line front end.

Subcommands::

    normalize   counts -> filtered/normalized/transformed expression matrix
    select-k    Gaussian repeated-measures model selection over a range of m
    cluster     npMSL clustering (m given or chosen with select-k first)
    ari         adjusted Rand index between two label files
    viz-data    per-cluster bar data for plotting

Every option can also be given in an INI file passed with ``--config``
(sections ``[general]``, ``[input]``, ``[normalize]``, ``[select]``,
``[cluster]``, ``[viz]``; keys are the option names with underscores).
Command-line values win over the file.

Exit status: 0 success, 2 input/parse error, 3 numeric/convergence
failure, 4 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, evalviz, gaussmix, ingest, npmsl
from .errors import ConfigError, InputError, NpclustError

logger = logging.getLogger("npclust")


def derive_seed(master, step):
    """Seed of a pipeline step, a hash of the master seed and step name."""
    digest = hashlib.sha256(f"{int(master)}:{step}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def parse_range(text):
    """``"1-20"``, ``"1..20"`` or ``"3"`` to an inclusive ``range``."""
    s = str(text).strip().replace("..", "-")
    try:
        if "-" in s:
            lo, hi = (int(p) for p in s.split("-", 1))
        else:
            lo = hi = int(s)
    except ValueError:
        raise ConfigError(f"bad cluster range {text!r}") from None
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad cluster range {text!r}")
    return range(lo, hi + 1)


@dataclass
class RunConfig:
    # general
    seed: int = 0
    threads: int = 1
    out: Optional[str] = None
    # input
    counts: Optional[str] = None
    lengths: Optional[str] = None
    layout: Optional[str] = None
    matrix: Optional[str] = None
    # normalize
    cpm_threshold: Optional[float] = 1.5
    cpm_rule: str = "any"
    fpkm: bool = True
    impute: bool = False
    impute_seed: Optional[int] = None
    log: bool = True
    steps: Optional[str] = None
    # select
    m_range: Optional[str] = None
    restarts: int = 20
    burn_iters: int = 5
    # cluster
    m: Optional[str] = None
    G: int = 512
    max_iters: int = 500
    tol: float = 1e-8
    init: str = "kmeans_like"
    init_labels: Optional[str] = None
    cluster_seed: Optional[int] = None
    select_seed: Optional[int] = None
    blocks: str = "per-condition"
    floor: float = npmsl.DEFAULT_FLOOR
    # viz
    result: Optional[str] = None

    def hash(self):
        d = asdict(self)
        d.pop("out")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTION_KEYS = {
    "general": ("seed", "threads", "out"),
    "input": ("counts", "lengths", "layout", "matrix"),
    "normalize": ("cpm_threshold", "cpm_rule", "fpkm", "impute", "impute_seed", "log", "steps"),
    "select": ("m_range", "restarts", "burn_iters", "select_seed"),
    "cluster": ("m", "G", "max_iters", "tol", "init", "init_labels", "cluster_seed", "blocks", "floor"),
    "viz": ("result",),
}
_ALIASES = {("cluster", "seed"): "cluster_seed", ("select", "seed"): "select_seed",
            ("normalize", "seed"): "impute_seed", ("viz", "matrix"): "matrix"}


def _coerce(name, value):
    types = {f.name: f.type for f in fields(RunConfig)}
    t = str(types[name])
    if value is None:
        return None
    try:
        if "bool" in t:
            return _parse_bool(value)
        if "int" in t:
            return int(value)
        if "float" in t:
            if str(value).strip().lower() in ("none", "off", ""):
                return None
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return str(value)


def load_config_file(path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, val in cp.items(section):
            name = _ALIASES.get((section, key), key)
            if name not in _SECTION_KEYS[section] and (section, key) not in _ALIASES:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[name] = _coerce(name, val)
    return values


def resolve_config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        for k, v in load_config_file(args.config).items():
            setattr(cfg, k, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, _coerce(f.name, v))
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# helpers

def _out_dir(cfg):
    if not cfg.out:
        raise ConfigError("no output directory (use --out or [general] out)")
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out, command, cfg, seeds, bandwidth=None, extra=None):
    d = asdict(cfg)
    d.pop("out")
    manifest = {
        "tool": "npclust",
        "version": __version__,
        "command": command,
        "config_hash": cfg.hash(),
        "config": d,
        "seeds": seeds,
        "bandwidth": bandwidth,
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _layout(cfg, default=None):
    if cfg.layout:
        return ingest.parse_layout(cfg.layout)
    return default


def _read_matrix(cfg):
    if not cfg.matrix:
        raise ConfigError("no expression matrix given (use --matrix or [input] matrix)")
    try:
        return ingest.read_expression(cfg.matrix, layout=_layout(cfg))
    except OSError as exc:
        raise InputError(f"cannot read {cfg.matrix}: {exc}") from None


def _steps(cfg):
    if cfg.steps:
        steps = [s.strip() for s in cfg.steps.replace("->", ",").split(",") if s.strip()]
        aliases = {"log": "log_transform", "impute": "zero_impute", "filter": "cpm_filter"}
        steps = [aliases.get(s, s) for s in steps]
    else:
        steps = []
        if cfg.cpm_threshold is not None:
            steps.append("cpm_filter")
        if cfg.fpkm:
            steps.append("fpkm")
        if cfg.impute:
            steps.append("zero_impute")
        if cfg.log:
            steps.append("log_transform")
    ingest.check_order(steps)
    return steps


# ---------------------------------------------------------------------------
# commands

def cmd_normalize(cfg):
    steps = _steps(cfg)
    if not cfg.counts:
        raise ConfigError("no counts file given (use --counts or [input] counts)")
    out = _out_dir(cfg)
    try:
        return _normalize(cfg, steps, out)
    except OSError as exc:
        raise InputError(f"cannot read input: {exc}") from None
    except InputError as exc:
        exc.args = (f"{cfg.counts}: {exc}",)
        raise


def _normalize(cfg, steps, out):
    counts = ingest.read_counts(cfg.counts, layout=_layout(cfg), lengths_path=cfg.lengths)
    seeds = {}
    m = counts
    if "cpm_filter" in steps:
        m = ingest.cpm_filter(m, cfg.cpm_threshold, cfg.cpm_rule)
    if "fpkm" in steps:
        m = ingest.fpkm(m)
    else:
        m = ingest.ExpressionMatrix(list(m.gene_ids), list(m.samples), m.counts.astype(float),
                                    m.layout, m.provenance)
    if "zero_impute" in steps:
        seed = cfg.impute_seed if cfg.impute_seed is not None else derive_seed(cfg.seed, "zero_impute")
        seeds["zero_impute"] = seed
        m = ingest.zero_impute(m, seed)
    if "log_transform" in steps:
        ingest.write_matrix(out / "prelog.tsv", m)
        m = ingest.log_transform(m)
    ingest.write_matrix(out / "expression.tsv", m)
    _write_manifest(out, "normalize", cfg, seeds,
                    extra={"genes": len(m.gene_ids), "steps": [str(s) for s in m.provenance]})
    print(f"wrote {len(m.gene_ids)} genes x {len(m.samples)} samples to {out / 'expression.tsv'}")
    return 0


def _select_seed(cfg):
    return cfg.select_seed if cfg.select_seed is not None else derive_seed(cfg.seed, "select_k")


def _run_selection(cfg, data, out):
    if not cfg.m_range:
        raise ConfigError("model selection needs m_range (e.g. --m-range 1-20)")
    seed = _select_seed(cfg)
    report = gaussmix.select_m(data, parse_range(cfg.m_range), seed, restarts=cfg.restarts,
                               burn_iters=cfg.burn_iters, threads=cfg.threads)
    gaussmix.write_report(out / "selection.tsv", report, out / "selection_summary.txt")
    return report, seed


def cmd_select_k(cfg):
    data = _read_matrix(cfg)
    out = _out_dir(cfg)
    report, seed = _run_selection(cfg, data, out)
    _write_manifest(out, "select-k", cfg, {"select_k": seed},
                    extra={"chosen_m": report.chosen_m, "votes": report.votes})
    print(report.summary())
    return 0


def cmd_cluster(cfg):
    if cfg.m is None:
        raise ConfigError("number of clusters not set (use --m N or --m auto)")
    auto = str(cfg.m).lower() == "auto"
    if auto and not cfg.m_range:
        raise ConfigError("m=auto needs m_range (e.g. --m-range 1-20)")
    if not auto:
        try:
            m = int(cfg.m)
        except ValueError:
            raise ConfigError(f"m must be an integer or 'auto', got {cfg.m!r}") from None
    if cfg.blocks not in ("per-condition", "singleton"):
        raise ConfigError(f"blocks must be 'per-condition' or 'singleton', got {cfg.blocks!r}")
    if cfg.init == "external_labels" and not cfg.init_labels:
        raise ConfigError("init=external_labels needs init_labels")

    data = _read_matrix(cfg)
    out = _out_dir(cfg)
    seeds = {}
    if auto:
        report, seeds["select_k"] = _run_selection(cfg, data, out)
        m = report.chosen_m
        logger.info("selected m=%d (%s)", m, report.summary())
    if cfg.blocks == "per-condition":
        blocks = npmsl.BlockSpec.from_layout(data.layout)
    else:
        blocks = npmsl.BlockSpec.singleton(len(data.samples))

    labels = None
    if cfg.init == "external_labels":
        labels = evalviz.read_labeling(cfg.init_labels).aligned_to(data.gene_ids)

    seed = cfg.cluster_seed if cfg.cluster_seed is not None else derive_seed(cfg.seed, "cluster")
    seeds["cluster"] = seed
    fc = npmsl.FitConfig(max_iters=cfg.max_iters, tol=cfg.tol, seed=seed, init=cfg.init,
                         G=cfg.G, floor=cfg.floor)
    try:
        result = npmsl.fit(data, m, blocks, fc, labels=labels)
    except NpclustError as exc:
        exc.args = (f"{exc} [cluster m={m}, seed={seed}, init={cfg.init}, matrix={cfg.matrix}]",)
        raise
    npmsl.write_result(result, out, data.gene_ids)
    _write_manifest(out, "cluster", cfg, seeds, bandwidth=result.state.h,
                    extra={"m": m, "status": result.trace.status, "iterations": len(result.trace),
                           "blocks": list(blocks.b)})
    print(f"m={m} iterations={len(result.trace)} status={result.trace.status} "
          f"loglik={result.trace.records[-1].loglik!r}")
    return 0 if result.trace.status == "converged" else 3


def cmd_ari(cfg, path_a, path_b):
    a = evalviz.read_labeling(path_a)
    b = evalviz.read_labeling(path_b)
    res = evalviz.ari_details(a, b)
    print(f"ari={res.ari!r}")
    record = {"ari": res.ari, "n": res.n, "degenerate": res.degenerate,
              "labels_a": str(path_a), "labels_b": str(path_b)}
    if cfg.out:
        out = _out_dir(cfg)
        with open(out / "ari.json", "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _read_pi(path):
    pi = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            if line.strip():
                pi.append(float(line.split("\t")[1]))
    return np.array(pi)


def cmd_viz(cfg):
    if not cfg.result:
        raise ConfigError("viz-data needs the cluster output directory (--result)")
    data = _read_matrix(cfg)
    res = Path(cfg.result)
    try:
        lab = evalviz.read_labeling(res / "labels.tsv")
        pi = _read_pi(res / "pi.tsv")
    except OSError as exc:
        raise InputError(f"cannot read cluster result: {exc}") from None
    labels = lab.aligned_to(data.gene_ids) if set(lab.ids) == set(data.gene_ids) else None
    if labels is None:
        raise InputError("cluster labels and matrix cover different genes")
    table = evalviz.viz_table(data, (labels, pi), data.layout)
    out = _out_dir(cfg)
    evalviz.write_viz(out / "viz.tsv", table, out / "viz.json")
    _write_manifest(out, "viz-data", cfg, {}, extra={"scale": table.scale})
    print(f"wrote {len(table.records)} clusters x {len(table.conditions)} conditions to {out / 'viz.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads for model selection")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="npclust", description="npMSL clustering of expression profiles")
    p.add_argument("--version", action="version", version=f"npclust {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    n = sub.add_parser("normalize", parents=[common], help="filter and normalize counts")
    n.add_argument("--counts")
    n.add_argument("--lengths")
    n.add_argument("--layout", help="e.g. lung:2,kidney:2")
    n.add_argument("--cpm-threshold", dest="cpm_threshold")
    n.add_argument("--cpm-rule", dest="cpm_rule", choices=sorted(ingest.RETENTION_RULES))
    n.add_argument("--fpkm", dest="fpkm", action="store_const", const="true")
    n.add_argument("--no-fpkm", dest="fpkm", action="store_const", const="false")
    n.add_argument("--impute", dest="impute", action="store_const", const="true")
    n.add_argument("--no-impute", dest="impute", action="store_const", const="false")
    n.add_argument("--impute-seed", dest="impute_seed", type=int)
    n.add_argument("--log", dest="log", action="store_const", const="true")
    n.add_argument("--no-log", dest="log", action="store_const", const="false")
    n.add_argument("--steps", help="explicit comma-separated step order")

    def _selection_opts(q):
        q.add_argument("--m-range", dest="m_range", help="e.g. 1-20")
        q.add_argument("--restarts", type=int)
        q.add_argument("--burn-iters", dest="burn_iters", type=int)
        q.add_argument("--select-seed", dest="select_seed", type=int)

    s = sub.add_parser("select-k", parents=[common], help="choose the number of clusters")
    s.add_argument("--matrix")
    s.add_argument("--layout")
    _selection_opts(s)

    c = sub.add_parser("cluster", parents=[common], help="run npMSL")
    c.add_argument("--matrix")
    c.add_argument("--layout")
    c.add_argument("--m", help="number of clusters or 'auto'")
    c.add_argument("--G", dest="G", type=int, help="grid points per block")
    c.add_argument("--max-iters", dest="max_iters", type=int)
    c.add_argument("--tol", type=float)
    c.add_argument("--init", choices=npmsl.INIT_STRATEGIES)
    c.add_argument("--init-labels", dest="init_labels")
    c.add_argument("--cluster-seed", dest="cluster_seed", type=int)
    c.add_argument("--blocks", choices=("per-condition", "singleton"))
    c.add_argument("--floor", type=float)
    _selection_opts(c)

    a = sub.add_parser("ari", parents=[common], help="adjusted Rand index of two label files")
    a.add_argument("labels_a")
    a.add_argument("labels_b")

    v = sub.add_parser("viz-data", parents=[common], help="cluster bar data for plotting")
    v.add_argument("--matrix", help="pre-log expression matrix")
    v.add_argument("--layout")
    v.add_argument("--result", help="cluster output directory")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "normalize":
            return cmd_normalize(cfg)
        if args.command == "select-k":
            return cmd_select_k(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "ari":
            return cmd_ari(cfg, args.labels_a, args.labels_b)
        if args.command == "viz-data":
            return cmd_viz(cfg)
    except NpclustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    return 4


if __name__ == "__main__":
    sys.exit(main())
