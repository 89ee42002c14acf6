"""Command-line entry point: ``wdlms run|theory|compare|topology``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .combiners import CombinerError
from .config import ConfigError, load_config
from .experiment import compare_combiners, run_experiment
from .outputs import OutputError, emit_outputs
from .topology import TopologyError, dump_topology, generate_topology, load_topology


class _Parser(argparse.ArgumentParser):
    """argparse with machine-readable usage errors."""

    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wdlms", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--trials", type=int, help="override the trial count")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--equalizer", help="comma-separated equalizers, e.g. zf,mmse")

    common(sub.add_parser("run", help="simulate (and predict, if enabled) every combiner"))
    common(sub.add_parser("theory", help="theoretical learning curves only"))
    cmp_ = sub.add_parser("compare", help="rank combiners by steady-state network MSD")
    common(cmp_)
    cmp_.add_argument("--combiners", required=True, help="comma-separated combiner names")

    topo = sub.add_parser("topology", help="generate or inspect a node layout")
    tsub = topo.add_subparsers(dest="action", required=True)
    gen = tsub.add_parser("gen")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--nodes", type=int, default=10)
    gen.add_argument("--range", dest="tx_range", type=float, default=0.5)
    gen.add_argument("--side", type=float, default=1.0)
    gen.add_argument("--out", help="write the topology JSON here instead of stdout")
    show = tsub.add_parser("show")
    show.add_argument("file")
    return p


def _load(args):
    cfg = load_config(args.config)
    eqs = None
    if args.equalizer:
        eqs = [e.strip() for e in args.equalizer.split(",") if e.strip()]
    return cfg.with_overrides(seed=args.seed, trials=args.trials, equalizers=eqs,
                              output_dir=args.out)


def _summary(bundle) -> dict:
    return {
        "steady_state_db": [
            {"combiner": s.combiner, "equalizer": s.equalizer, "source": s.source,
             "network_msd_db": round(s.network_db, 4)}
            for s in bundle.steady],
    }


def _cmd_run(args, theory_only=False) -> dict:
    cfg = _load(args)
    bundle = run_experiment(cfg, simulate_runs=not theory_only,
                            theory=True if theory_only else None)
    files = emit_outputs(bundle, cfg.output_dir)
    out = _summary(bundle)
    out["files"] = {k: str(v) for k, v in files.items()}
    return out


def _cmd_compare(args) -> dict:
    cfg = _load(args)
    names = [n.strip() for n in args.combiners.split(",") if n.strip()]
    rows = compare_combiners(cfg, names)
    return {"ranking": [
        {"combiner": r.combiner, "equalizer": r.equalizer,
         "network_msd_db": round(r.network_db, 4),
         "node_msd_db": [round(float(v), 4) for v in r.node_db]}
        for r in rows]}


def _cmd_topology(args) -> dict | str:
    if args.action == "gen":
        topo = generate_topology(args.seed, args.nodes, args.tx_range, args.side)
        text = dump_topology(topo)
        if args.out:
            Path(args.out).write_text(text + "\n")
            return {"written": args.out, "nodes": topo.node_count}
        return text
    try:
        text = Path(args.file).read_text()
    except OSError as exc:
        raise OutputError(f"cannot read {args.file}: {exc.strerror}") from exc
    topo = load_topology(text)
    return {
        "nodes": topo.node_count,
        "r_o": topo.tx_range,
        "degrees": topo.degrees().tolist(),
        "neighbors": [sorted(n) for n in topo.neighbors],
        "isolated": [k for k, d in enumerate(topo.degrees()) if d == 1],
    }


def _error(kind: str, exc: Exception, field: str | None = None) -> int:
    doc = {"error": kind, "message": str(exc)}
    if field:
        doc["field"] = field
    print(json.dumps(doc), file=sys.stderr)
    return 2 if kind in ("config", "usage") else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            result = _cmd_run(args)
        elif args.command == "theory":
            result = _cmd_run(args, theory_only=True)
        elif args.command == "compare":
            result = _cmd_compare(args)
        else:
            result = _cmd_topology(args)
    except ConfigError as exc:
        return _error("config", exc, exc.field)
    except TopologyError as exc:
        return _error("topology", exc)
    except (OutputError, OSError) as exc:
        return _error("io", exc)
    except (CombinerError, ValueError, ArithmeticError) as exc:
        return _error("runtime", exc)
    if isinstance(result, str):
        print(result)
    else:
        print(json.dumps(result, indent=2, default=lambda o: np.asarray(o).tolist()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
