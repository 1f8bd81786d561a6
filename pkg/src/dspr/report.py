"""Tables (CSV) and static SVG figures assembled from completed run directories."""

from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .errors import ContractError

TABLE_COLUMNS = ["run", "variant", "seed", "MAE", "RMSE", "MCA", "TVR", "TDA"]
REGIME_ORDER = ("High", "Med", "Low", "All")


# -- loading ------------------------------------------------------------------------


def find_runs(runs_dir) -> dict[str, dict]:
    """Run directories (those holding a ``run.json``) below ``runs_dir``, by relative name."""
    root = Path(runs_dir)
    if not root.is_dir():
        raise ContractError(f"runs directory not found: {root}")
    runs = {}
    for f in sorted(root.rglob("run.json")):
        name = f.parent.relative_to(root).as_posix() or f.parent.name
        runs[name] = {"dir": f.parent, "record": json.loads(f.read_text())}
    if not runs:
        raise ContractError(f"no completed runs (run.json) under {root}")
    return runs


def read_delay_profile(path) -> dict:
    """Columns of a delay-profile CSV as arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    keys = ("sample", "t", "channel", "tau", "regime")
    return {k: np.array([float(r[k]) for r in rows]) for k in keys}


def write_delay_profile(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "t", "channel", "tau", "regime"])
        for s, t, c, tau, reg in rows:
            w.writerow([s, t, c, repr(tau), reg])


def write_matrix_csv(path, A, names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["receiver"] + list(names))
        for n, row in zip(names, np.asarray(A)):
            w.writerow([n] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


# -- tables -------------------------------------------------------------------------


def metric_rows(runs: dict) -> list[dict]:
    rows = []
    for name, run in runs.items():
        rec = run["record"]
        m = rec["metrics"].get("test", {})
        rows.append({"run": name, "variant": rec["variant"], "seed": rec["config"].get("seed"),
                     **{k: m.get(k) for k in TABLE_COLUMNS[3:]}})
    return rows


def ablation_rows(runs: dict) -> list[dict]:
    """Median test MAE/RMSE per variant and the change relative to 'full' in percent."""
    by_var: dict[str, list] = {}
    for run in runs.values():
        rec = run["record"]
        if "test" in rec["metrics"]:
            by_var.setdefault(rec["variant"], []).append(rec["metrics"]["test"])
    if "full" not in by_var:
        return []
    med = {v: (float(np.median([m["MAE"] for m in ms])), float(np.median([m["RMSE"] for m in ms])),
               len(ms)) for v, ms in by_var.items()}
    ref_mae, ref_rmse, _ = med["full"]
    rows = []
    for v, (mae, rmse, n) in med.items():
        rows.append({"variant": v, "n_runs": n, "MAE": mae, "RMSE": rmse,
                     "dMAE_pct": (mae - ref_mae) / ref_mae * 100.0,
                     "dRMSE_pct": (rmse - ref_rmse) / ref_rmse * 100.0})
    rows.sort(key=lambda r: (r["variant"] != "full", r["variant"]))
    return rows


def regime_rows(runs: dict) -> list[dict]:
    rows = []
    for name, run in runs.items():
        rec = run["record"]
        for m in rec["metrics"].get("test_regimes", []):
            rows.append({"run": name, "variant": rec["variant"], "regime": m["regime"],
                         "n_samples": m["n_samples"], "MAE": m["MAE"], "RMSE": m["RMSE"],
                         "MCA": m["MCA"], "TVR": m["TVR"], "TDA": m["TDA"]})
    rows.sort(key=lambda r: (r["run"], REGIME_ORDER.index(r["regime"])))
    return rows


# -- SVG ------------------------------------------------------------------------------


def _svg(width, height) -> ET.Element:
    return ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width),
                      height=str(height), viewBox=f"0 0 {width} {height}")


def _text(parent, x, y, s, size=11, anchor="middle", **kw):
    el = ET.SubElement(parent, "text", x=f"{x:.1f}", y=f"{y:.1f}", attrib={
        "font-size": str(size), "text-anchor": anchor, "font-family": "sans-serif", **kw})
    el.text = s
    return el


def _write(root: ET.Element, path) -> None:
    ET.indent(root)
    Path(path).write_text(ET.tostring(root, encoding="unicode") + "\n")


def _color(v: float) -> str:
    """White -> dark blue for v in [0, 1]."""
    v = float(np.clip(v, 0.0, 1.0))
    r, g, b = (int(round(255 + (c - 255) * v)) for c in (8, 48, 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def tau_histogram_svg(path, groups: dict[str, np.ndarray], tau_max: float = 20.0,
                      title: str = "learned delay") -> None:
    """One histogram panel per group (e.g. per regime) over integer-width bins on [1, tau_max]."""
    if not groups:
        raise ContractError("no delay samples to plot")
    edges = np.arange(1.0, tau_max + 1.0 + 1e-9)
    panel_w, panel_h, pad = 420, 140, 40
    W, H = panel_w + 2 * pad, len(groups) * (panel_h + pad) + pad
    root = _svg(W, H)
    _text(root, W / 2, 20, title, size=13)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    for gi, (label, vals) in enumerate(groups.items()):
        vals = np.asarray(vals, dtype=np.float64)
        counts, _ = np.histogram(vals, bins=edges)
        frac = counts / max(1, counts.sum())
        top = pad + gi * (panel_h + pad)
        g = ET.SubElement(root, "g", id=f"panel-{gi}")
        ET.SubElement(g, "rect", x=str(pad), y=str(top), width=str(panel_w), height=str(panel_h),
                      fill="none", stroke="#444")
        bw = panel_w / len(counts)
        peak = max(frac.max(), 1e-12)
        for i, f in enumerate(frac):
            h = panel_h * f / peak
            ET.SubElement(g, "rect", x=f"{pad + i * bw:.2f}", y=f"{top + panel_h - h:.2f}",
                          width=f"{bw * 0.9:.2f}", height=f"{h:.2f}",
                          fill=palette[gi % len(palette)]).set("data-count", str(int(counts[i])))
        for i in range(0, len(edges), max(1, len(edges) // 10)):
            _text(g, pad + i * bw, top + panel_h + 12, f"{edges[i]:g}", size=9)
        mean = float(vals.mean()) if vals.size else float("nan")
        _text(g, pad + 4, top + 14, f"{label}: n={vals.size}, mean={mean:.2f}", anchor="start")
    _write(root, path)


def heatmap_svg(path, A, names, title: str = "mean dynamic adjacency (row = receiver)") -> None:
    """Labelled heatmap; the diagonal is always drawn as 0."""
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(names):
        raise ContractError(f"adjacency {A.shape} does not match {len(names)} names")
    np.fill_diagonal(A, 0.0)
    n = A.shape[0]
    cell, left, top = 48, 70, 50
    W, H = left + n * cell + 20, top + n * cell + 20
    root = _svg(W, H)
    _text(root, W / 2, 18, title, size=13)
    hi = max(A.max(), 1e-12)
    for j, nm in enumerate(names):
        _text(root, left + (j + 0.5) * cell, top - 8, nm)
    for i, nm in enumerate(names):
        _text(root, left - 8, top + (i + 0.5) * cell + 4, nm, anchor="end")
        for j in range(n):
            v = A[i, j]
            x, y = left + j * cell, top + i * cell
            ET.SubElement(root, "rect", x=str(x), y=str(y), width=str(cell), height=str(cell),
                          fill=_color(v / hi), stroke="#ffffff").set("data-value", repr(float(v)))
            _text(root, x + cell / 2, y + cell / 2 + 4, f"{v:.2f}", size=10,
                  fill="#ffffff" if v / hi > 0.55 else "#000000")
    _write(root, path)


# -- assembly ----------------------------------------------------------------------------


def build_report(runs_dir, out_dir) -> dict:
    """Write metric/ablation/regime tables and figures; returns the paths written."""
    runs = find_runs(runs_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    written["metrics"] = out / "metrics_table.csv"
    write_rows(written["metrics"], metric_rows(runs), TABLE_COLUMNS)
    abl = ablation_rows(runs)
    if abl:
        written["ablation"] = out / "ablation_table.csv"
        write_rows(written["ablation"], abl,
                   ["variant", "n_runs", "MAE", "RMSE", "dMAE_pct", "dRMSE_pct"])
    reg = regime_rows(runs)
    if reg:
        written["regimes"] = out / "regime_table.csv"
        write_rows(written["regimes"], reg,
                   ["run", "variant", "regime", "n_samples", "MAE", "RMSE", "MCA", "TVR", "TDA"])
    for name, run in runs.items():
        rec, d = run["record"], run["dir"]
        slug = name.replace("/", "_")
        prof = d / "delay_profile.csv"
        if prof.exists():
            p = read_delay_profile(prof)
            target = rec["model_config"].get("target", int(p["channel"].max()))
            sel = (p["channel"] == target) & (p["t"] == p["t"].max())
            groups = {f"regime {int(r)}" if r >= 0 else "all": p["tau"][sel & (p["regime"] == r)]
                      for r in np.unique(p["regime"][sel])}
            written[f"tau_{slug}"] = out / f"tau_hist_{slug}.svg"
            tau_histogram_svg(written[f"tau_{slug}"], groups,
                              tau_max=rec["model_config"].get("tau_max", 20),
                              title=f"learned target delay at the forecast origin ({name})")
        adj = d / "adjacency.csv"
        if adj.exists():
            names, A = read_matrix_csv(adj)
            written[f"adj_{slug}"] = out / f"adjacency_{slug}.svg"
            heatmap_svg(written[f"adj_{slug}"], A, names)
    return written
