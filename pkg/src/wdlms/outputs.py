"""
Result files: CSV traces, steady-state tables, metadata and a plot script.

Every file is written to a temporary sibling and renamed into place, so a
crash never leaves a truncated result behind.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .experiment import MsdTrace, ResultBundle, SteadyState, to_db

TRACE_FIELDS = ["combiner", "equalizer", "source", "iteration", "node", "msd_linear", "msd_db"]
STEADY_FIELDS = ["combiner", "equalizer", "source", "node", "msd_linear", "msd_db", "stderr"]
PLOT_SCRIPT = "plot_msd.py"


class OutputError(OSError):
    pass


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OutputError(f"cannot write to {path.parent}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc


def _num(x: float) -> str:
    # repr round-trips exactly; csv would do the same but be explicit
    return repr(float(x))


def trace_csv(traces: list[MsdTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for t in traces:
        net_db = t.network_db
        node_db = t.node_db
        for i in range(t.horizon):
            w.writerow([t.combiner, t.equalizer, t.source, i, 0,
                        _num(t.network[i]), _num(net_db[i])])
            for k in range(t.node.shape[1]):
                w.writerow([t.combiner, t.equalizer, t.source, i, k + 1,
                            _num(t.node[i, k]), _num(node_db[i, k])])
    return buf.getvalue()


def steady_csv(rows: list[SteadyState]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEADY_FIELDS)
    for s in rows:
        w.writerow([s.combiner, s.equalizer, s.source, 0, _num(s.network),
                    _num(s.network_db), _num(s.stderr)])
        for k, v in enumerate(s.node):
            w.writerow([s.combiner, s.equalizer, s.source, k + 1, _num(v),
                        _num(to_db(v)), ""])
    return buf.getvalue()


def read_trace_csv(path: str | Path) -> list[MsdTrace]:
    """Parse ``trace.csv`` back into traces, in file order."""
    groups: dict[tuple, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            key = (row["combiner"], row["equalizer"], row["source"])
            g = groups.setdefault(key, {})
            g.setdefault(int(row["iteration"]), {})[int(row["node"])] = float(row["msd_linear"])
    out = []
    for (comb, eq, src), g in groups.items():
        T = max(g) + 1
        K = max(g[0]) if g else 0
        node = np.array([[g[i][k] for k in range(1, K + 1)] for i in range(T)]).reshape(T, K)
        network = np.array([g[i][0] for i in range(T)])
        out.append(MsdTrace(comb, eq, src, node, network))
    return out


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


_PLOT_TEMPLATE = '''\
"""Render MSD learning curves and steady-state per-node MSD from the CSVs
next to this script. Requires matplotlib."""
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent


def read(name):
    with open(HERE / name, newline="") as fh:
        return list(csv.DictReader(fh))


curves = defaultdict(list)
for row in read("trace.csv"):
    if row["node"] == "0":
        key = (row["combiner"], row["equalizer"], row["source"])
        curves[key].append((int(row["iteration"]), float(row["msd_db"])))

fig, ax = plt.subplots(figsize=(7, 4.5))
for (comb, eq, src), pts in sorted(curves.items()):
    xs, ys = zip(*pts)
    ax.plot(xs, ys, "--" if src == "theory" else "-", lw=1.2, label=f"{comb} / {eq} ({src})")
ax.set_xlabel("iteration")
ax.set_ylabel("network MSD (dB)")
ax.grid(alpha=0.3)
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(HERE / "msd_vs_iteration.png", dpi=150)

bars = defaultdict(dict)
for row in read("steady_state.csv"):
    if row["node"] != "0":
        bars[(row["combiner"], row["equalizer"], row["source"])][int(row["node"])] = float(row["msd_db"])

fig, ax = plt.subplots(figsize=(7, 4.5))
for (comb, eq, src), vals in sorted(bars.items()):
    nodes = sorted(vals)
    ax.plot(nodes, [vals[k] for k in nodes], "o--" if src == "theory" else "s-",
            ms=4, label=f"{comb} / {eq} ({src})")
ax.set_xlabel("node index")
ax.set_ylabel("steady-state MSD (dB)")
ax.grid(alpha=0.3)
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(HERE / "msd_vs_node.png", dpi=150)
'''


def emit_outputs(bundle: ResultBundle, out_dir: str | Path) -> dict[str, Path]:
    """Write ``trace.csv``, ``steady_state.csv``, ``meta.json`` and the plot script."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    files = {
        "trace": out / "trace.csv",
        "steady_state": out / "steady_state.csv",
        "meta": out / "meta.json",
        "plot": out / PLOT_SCRIPT,
    }
    atomic_write(files["trace"], trace_csv(bundle.traces))
    atomic_write(files["steady_state"], steady_csv(bundle.steady))
    atomic_write(files["meta"], json.dumps(_json_safe(bundle.meta), indent=2, sort_keys=True) + "\n")
    atomic_write(files["plot"], _PLOT_TEMPLATE)
    return files
