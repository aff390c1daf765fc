"""Command-line entry points: generate, train, active, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .active import SUMMARY_METRICS, aggregate_runs, run_algorithm1, train_at_ratio, _contexts
from .config import ExperimentConfig, load_config
from .encoder import save_checkpoint
from .graph import (TwinNetworkDataset, generate_twin_networks, load_anchor_map, load_edge_list,
                    write_anchor_map, write_edge_list)

log = logging.getLogger("anchoral")

DATA_FILES = ("graph_a.edges", "graph_b.edges", "anchors.tsv")
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- manifests -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"anchoral": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out_dir: Path, command: str, argv: list, config: ExperimentConfig | None,
                   seed: int, inputs: dict, outputs: list, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    data = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config_hash": config.digest() if config else None,
        "config": config.to_dict() if config else None,
        "inputs": {str(k): v for k, v in sorted(inputs.items())},
        "outputs": {p: sha256_file(out_dir / p) for p in sorted(outputs)},
        "versions": _versions(),
    }
    if extra:
        data.update(extra)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(directory) -> dict:
    """Load a manifest and recheck every output digest it lists."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise CliError("missing_manifest", f"no {MANIFEST} in {directory}")
    data = json.loads(path.read_text())
    for name, digest in data.get("outputs", {}).items():
        target = directory / name
        if not target.exists():
            raise CliError("missing_file", f"{target} listed in manifest but absent")
        if sha256_file(target) != digest:
            raise CliError("digest_mismatch", f"{target} does not match its manifest digest")
    return data


# -- dataset I/O -------------------------------------------------------------------

def load_dataset(data_dir) -> tuple[TwinNetworkDataset, dict]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CliError("missing_path", f"dataset directory not found: {data_dir}")
    for name in DATA_FILES:
        if not (data_dir / name).exists():
            raise CliError("missing_path", f"dataset file not found: {data_dir / name}")
    if (data_dir / MANIFEST).exists():
        verify_manifest(data_dir)
    ga = load_edge_list(data_dir / "graph_a.edges")
    gb = load_edge_list(data_dir / "graph_b.edges")
    anchors = load_anchor_map(data_dir / "anchors.tsv", ga.node_count, gb.node_count)
    digests = {f"{data_dir / n}": sha256_file(data_dir / n) for n in DATA_FILES}
    return TwinNetworkDataset(ga, gb, anchors, {"source": str(data_dir)}), digests


def write_dataset(ds: TwinNetworkDataset, out_dir) -> list[str]:
    out_dir = Path(out_dir)
    write_edge_list(ds.graph_a, out_dir / "graph_a.edges")
    write_edge_list(ds.graph_b, out_dir / "graph_b.edges")
    write_anchor_map(ds.anchors, out_dir / "anchors.tsv")
    return list(DATA_FILES)


def _make_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("unwritable_path", f"cannot create {out}: {exc.strerror}") from None
    return out


def _config(args) -> ExperimentConfig:
    if args.config and not Path(args.config).exists():
        raise CliError("missing_path", f"config file not found: {args.config}")
    return load_config(args.config, args.set or ())


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- commands ---------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = _make_out(args.out)
    ds = generate_twin_networks(args.n, args.base_edge_prob, args.anchor_fraction,
                                args.perturb_prob, args.seed)
    files = write_dataset(ds, out)
    write_manifest(out, "generate", sys.argv[1:] if args.record_argv else [], None, args.seed, {},
                   files, {"generator": ds.metadata})
    print(f"wrote {len(ds.anchors)} anchors, {ds.graph_a.edge_count} + {ds.graph_b.edge_count} edges to {out}")
    return 0


TRAIN_COLUMNS = ("eta", "repeat", "seed", "n_train", "n_test", "k", "p_at_k", "map_at_k")
TRAIN_SUMMARY_COLUMNS = ("eta", "repeats", "k", "p_at_k_mean", "p_at_k_sd", "map_at_k_mean", "map_at_k_sd")


def cmd_train(args) -> int:
    cfg = _config(args)
    ds, digests = load_dataset(args.data)
    out = _make_out(args.out)
    etas = args.eta
    for eta in etas:
        if not 0.0 < eta < 1.0:
            raise CliError("invalid_eta", f"train ratio must lie in (0, 1), got {eta}")
    contexts = _contexts(ds, cfg)
    rows, summary, outputs = [], [], ["metrics.csv", "metrics_summary.csv"]
    for eta in etas:
        ps, maps = [], []
        for r in range(args.repeats):
            res = train_at_ratio(ds, cfg, eta, cfg.seed + r, contexts)
            rows.append(dict(eta=eta, repeat=r, seed=res.seed, n_train=res.n_train, n_test=res.n_test,
                             k=cfg.metric_k, p_at_k=res.metrics.precision_at_k,
                             map_at_k=res.metrics.map_at_k))
            ps.append(res.metrics.precision_at_k)
            maps.append(res.metrics.map_at_k)
            if r == 0:
                name = f"model_eta{eta:.2f}.ckpt"
                save_checkpoint(out / name, res.params, res.optimizer, cfg.digest())
                outputs.append(name)
        sd = (lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0)
        summary.append(dict(eta=eta, repeats=args.repeats, k=cfg.metric_k,
                            p_at_k_mean=float(np.mean(ps)), p_at_k_sd=sd(ps),
                            map_at_k_mean=float(np.mean(maps)), map_at_k_sd=sd(maps)))
        print(f"eta={eta:.2f} P@{cfg.metric_k}={np.mean(ps):.4f} MAP@{cfg.metric_k}={np.mean(maps):.4f}")
    _write_csv(out / "metrics.csv", TRAIN_COLUMNS, rows)
    _write_csv(out / "metrics_summary.csv", TRAIN_SUMMARY_COLUMNS, summary)
    (out / "config.cfg").write_text(cfg.dumps())
    outputs.append("config.cfg")
    write_manifest(out, "train", sys.argv[1:] if args.record_argv else [], cfg, cfg.seed, digests,
                   outputs, {"etas": etas, "repeats": args.repeats})
    return 0


def _summary_columns() -> list[str]:
    cols = ["iteration"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_sd"]
    return cols


def cmd_active(args) -> int:
    cfg = _config(args)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    ds, digests = load_dataset(args.data)
    out = _make_out(args.out)
    contexts = _contexts(ds, cfg)
    runs, outputs = [], []
    for r in range(args.repeats):
        seed = cfg.seed + r
        sub = out / f"seed_{seed}"
        try:
            runs.append(run_algorithm1(ds, cfg.replace(seed=seed), sub, contexts))
        finally:
            for name in ("trace.csv", "model.ckpt", "predictions.tsv", "config.cfg"):
                if (sub / name).exists():
                    outputs.append(f"seed_{seed}/{name}")
        last = runs[-1].final_test
        print(f"seed={seed} mode={cfg.mode} final P@{cfg.metric_k}={last.precision_at_k:.4f} "
              f"MAP@{cfg.metric_k}={last.map_at_k:.4f}")
    _write_csv(out / "summary.csv", _summary_columns(), aggregate_runs(runs))
    (out / "config.cfg").write_text(cfg.dumps())
    outputs += ["summary.csv", "config.cfg"]
    write_manifest(out, "active", sys.argv[1:] if args.record_argv else [], cfg, cfg.seed, digests,
                   outputs, {"repeats": args.repeats, "mode": cfg.mode})
    return 0


# keys allowed to differ between runs being compared
_REPORT_FREE = {"mode", "seed"}


def cmd_report(args) -> int:
    tables, base = {}, None
    for d in args.runs:
        d = Path(d)
        if not d.is_dir():
            raise CliError("missing_path", f"run directory not found: {d}")
        man = verify_manifest(d)
        if man.get("command") != "active":
            raise CliError("incompatible_runs", f"{d} is not an active-learning run")
        cfg = {k: v for k, v in man["config"].items() if k not in _REPORT_FREE}
        if base is None:
            base = (d, cfg, man["repeats"])
        elif cfg != base[1] or man["repeats"] != base[2]:
            diff = sorted(k for k in cfg if cfg[k] != base[1].get(k))
            raise CliError("incompatible_runs",
                           f"{d} differs from {base[0]} in {', '.join(diff) or 'repeats'}")
        mode = man["config"]["mode"]
        if mode in tables:
            raise CliError("incompatible_runs", f"mode {mode} appears twice")
        with open(d / "summary.csv", newline="") as fh:
            tables[mode] = list(csv.DictReader(fh))
    if not tables:
        raise CliError("missing_path", "no run directories given")
    depth = min(len(t) for t in tables.values())
    metrics = args.metrics or ["test_p_at_k", "test_map_at_k"]
    cols = ["iteration"] + [f"{mode}_{m}_{s}" for mode in tables for m in metrics for s in ("mean", "sd")]
    rows = []
    for i in range(depth):
        row = {"iteration": list(tables.values())[0][i]["iteration"]}
        for mode, t in tables.items():
            for m in metrics:
                for s in ("mean", "sd"):
                    key = f"{m}_{s}"
                    if key not in t[i]:
                        raise CliError("bad_summary", f"column {key} missing for mode {mode}")
                    row[f"{mode}_{key}"] = t[i][key]
        rows.append(row)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        _make_out(out.parent)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows for modes {', '.join(tables)} to {out}")
    return 0


# -- parser ---------------------------------------------------------------------

def _float_list(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anchoral", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--record-argv", action="store_true",
                   help="store the command line in the manifest")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic twin-network dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=300)
    g.add_argument("--base-edge-prob", type=float, default=0.05)
    g.add_argument("--anchor-fraction", type=float, default=0.5)
    g.add_argument("--perturb-prob", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    def common(sp):
        sp.add_argument("--data", required=True, help="directory with graph_a.edges, graph_b.edges, anchors.tsv")
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True)
        sp.add_argument("--repeats", type=int, default=1)

    t = sub.add_parser("train", help="supervised training at one or more anchor ratios")
    common(t)
    t.add_argument("--eta", type=_float_list, default=[0.5], help="comma-separated train ratios")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("active", help="run the active-learning loop")
    common(a)
    a.add_argument("--mode", choices=("dalaup", "saie", "ie", "cs", "eer", "random", "aup_only"))
    a.set_defaults(func=cmd_active)

    r = sub.add_parser("report", help="compare summaries of several active runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--metrics", nargs="*")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "repeats", 1) < 1:
        print("error\tinvalid_argument\trepeats must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error\t{exc.code}\t{exc}", file=sys.stderr)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
