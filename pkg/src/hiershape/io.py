"""File formats: point sets, manifests, fit results, and report/plot artifacts.

Floats are written with ``repr`` so every write/read round trip is exact.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from xml.sax.saxutils import escape

import jsonschema
import numpy as np

from .data import GroupedDataset
from .errors import ParseError
from .inference import FitResult
from .model import KernelConfig, PopulationParams

FORMAT_VERSION = 1
PREPROCESSING = ("procrustes", "cyclic", "none")
_HEADER = re.compile(r"#\s*T\s*=\s*(\d+)\s+D\s*=\s*(\d+)\s*$")


# --- point sets -------------------------------------------------------------

def write_pointset(path, points) -> None:
    """One point per row, ``D`` comma-separated columns, ``# T=.. D=..`` header."""
    points = np.asarray(points, dtype=float)
    t, d = points.shape
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# T={t} D={d}\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_pointset(path) -> np.ndarray:
    """Parse a point-set file; malformed content raises :class:`ParseError` with the line number."""
    path = str(path)
    declared = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER.match(line)
                if m and declared is None:
                    declared = (int(m.group(1)), int(m.group(2)))
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise ParseError(f"cannot parse coordinates {line!r}", path, lineno) from None
            if not all(np.isfinite(row)):
                raise ParseError("non-finite coordinate", path, lineno)
            if rows and len(row) != len(rows[0][1]):
                raise ParseError(f"expected {len(rows[0][1])} columns, found {len(row)}", path, lineno)
            if declared and len(row) != declared[1]:
                raise ParseError(f"header declares D={declared[1]}, found {len(row)} columns", path, lineno)
            rows.append((lineno, row))
    if not rows:
        raise ParseError("no points found", path)
    if declared and len(rows) != declared[0]:
        raise ParseError(f"header declares T={declared[0]}, found {len(rows)} points", path, rows[-1][0])
    return np.array([r for _, r in rows])


# --- manifests --------------------------------------------------------------

def write_manifest(path, data: GroupedDataset, name: str = "dataset",
                   preprocessing: str = "procrustes", prefix: str = "") -> list[Path]:
    """Write every point set next to the manifest and the manifest itself.

    Files are named ``{prefix}{group}_{i:03d}.csv``; paths in the manifest are
    relative to its directory. Returns the point-set paths.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    written, groups = [], []
    for gname, grp in zip(data.names, data.groups):
        files = []
        for i, x in enumerate(grp):
            fname = f"{prefix}{gname}_{i:03d}.csv"
            write_pointset(root / fname, x)
            written.append(root / fname)
            files.append(fname)
        groups.append({"name": gname, "files": files})
    doc = {"name": name, "n_points": data.n_points, "dim": data.dim,
           "preprocessing": preprocessing, "groups": groups}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return written


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["groups", "n_points"],
    "properties": {
        "name": {"type": "string"},
        "n_points": {"type": "integer", "minimum": 3},
        "dim": {"type": "integer", "minimum": 2},
        "preprocessing": {"enum": list(PREPROCESSING)},
        "groups": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "files"],
                "properties": {
                    "name": {"type": "string"},
                    "files": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                },
            },
        },
    },
}


def read_manifest(path) -> tuple[GroupedDataset, dict]:
    """Load the dataset a manifest describes. Returns ``(data, manifest dict)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from None
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ParseError(f"invalid manifest: {exc.message}", str(path)) from None
    doc.setdefault("dim", 2)
    doc.setdefault("preprocessing", "procrustes")
    doc.setdefault("name", path.stem)
    groups = [[read_pointset(path.parent / f) for f in g["files"]] for g in doc["groups"]]
    for g, grp in zip(doc["groups"], groups):
        for f, x in zip(g["files"], grp):
            if x.shape[1] != doc["dim"]:
                raise ParseError(f"{f}: D={x.shape[1]} but manifest says D={doc['dim']}", str(path))
    data = GroupedDataset([g["name"] for g in doc["groups"]], groups, doc["n_points"], doc["dim"])
    return data, doc


# --- fit results --------------------------------------------------------------

def _lower(c) -> list[float]:
    c = np.asarray(c)
    return c[np.tril_indices(c.shape[0])].tolist()


def _from_lower(values, n) -> np.ndarray:
    out = np.zeros((n, n))
    out[np.tril_indices(n)] = values
    return out + np.tril(out, -1).T


def _params_doc(p: PopulationParams) -> dict:
    return {"mean": p.mean.tolist(), "covariance": _lower(p.covariance),
            "group_covariances": [_lower(c) for c in p.group_covariances], "epsilon": p.epsilon}


def _params_from(doc, n) -> PopulationParams:
    return PopulationParams(np.array(doc["mean"], dtype=float), _from_lower(doc["covariance"], n),
                            [_from_lower(c, n) for c in doc["group_covariances"]], doc["epsilon"])


_NUM_LIST = {"type": "array", "items": {"type": "number"}}
_SHAPE = {"type": "array", "items": _NUM_LIST}
_PARAMS = {
    "type": "object",
    "required": ["mean", "covariance", "group_covariances", "epsilon"],
    "properties": {
        "mean": _SHAPE,
        "covariance": _NUM_LIST,
        "group_covariances": {"type": "array", "items": _NUM_LIST},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
    },
}

FIT_SCHEMA = {
    "type": "object",
    "required": ["format_version", "group_names", "n_points", "dim", "kernel_sigma", "betas",
                 "params", "initial_params", "posterior_means", "spectra", "diagnostics"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "group_names": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "n_points": {"type": "integer", "minimum": 3},
        "dim": {"type": "integer", "minimum": 2},
        "kernel_sigma": {"type": "number", "exclusiveMinimum": 0},
        "betas": _NUM_LIST,
        "params": _PARAMS,
        "initial_params": _PARAMS,
        "posterior_means": {
            "type": "object",
            "required": ["group_means", "individuals"],
            "properties": {
                "group_means": {"type": "array", "items": _SHAPE},
                "individuals": {"type": "array", "items": {"type": "array", "items": _SHAPE}},
            },
        },
        "spectra": {"type": "object"},
        "diagnostics": {
            "type": "object",
            "required": ["q_trace", "change_trace", "acceptance", "converged", "n_iter"],
            "properties": {
                "q_trace": _NUM_LIST,
                "change_trace": _NUM_LIST,
                "acceptance": {"type": "object", "additionalProperties": {"type": "number"}},
                "converged": {"type": "boolean"},
                "n_iter": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def fit_to_dict(result: FitResult) -> dict:
    spectra = {stage: {k: v.tolist() for k, v in mats.items()}
               for stage, mats in result.spectra().items()}
    return {
        "format_version": FORMAT_VERSION,
        "group_names": list(result.group_names),
        "n_points": result.n_points,
        "dim": result.dim,
        "kernel_sigma": result.kernel.sigma,
        "betas": [float(b) for b in result.betas],
        "params": _params_doc(result.params),
        "initial_params": _params_doc(result.initial_params),
        "posterior_means": {
            "group_means": np.asarray(result.group_means).tolist(),
            "individuals": [np.asarray(u).tolist() for u in result.individuals],
        },
        "spectra": spectra,
        "diagnostics": {
            "q_trace": [float(q) for q in result.q_trace],
            "change_trace": [float(c) for c in result.change_trace],
            "acceptance": {k: float(v) for k, v in result.acceptance.items()},
            "converged": bool(result.converged),
            "n_iter": int(result.n_iter),
        },
    }


def validate_fit_dict(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``doc`` is a well-formed fit document."""
    jsonschema.validate(doc, FIT_SCHEMA)


def write_fit(path, result: FitResult) -> None:
    doc = fit_to_dict(result)
    validate_fit_dict(doc)
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def fit_from_dict(doc: dict) -> FitResult:
    """Rebuild a :class:`FitResult` (without the retained sweeps)."""
    n = doc["n_points"] * doc["dim"]
    post = doc["posterior_means"]
    diag = doc["diagnostics"]
    return FitResult(
        params=_params_from(doc["params"], n),
        initial_params=_params_from(doc["initial_params"], n),
        group_names=list(doc["group_names"]),
        group_means=np.array(post["group_means"], dtype=float),
        individuals=[np.array(u, dtype=float) for u in post["individuals"]],
        kernel=KernelConfig(doc["kernel_sigma"]),
        betas=list(doc["betas"]),
        q_trace=list(diag["q_trace"]),
        change_trace=list(diag["change_trace"]),
        acceptance=dict(diag["acceptance"]),
        converged=diag["converged"],
        n_iter=diag["n_iter"],
        samples=None,
    )


def read_fit(path) -> FitResult:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from None
    try:
        validate_fit_dict(doc)
    except jsonschema.ValidationError as exc:
        raise ParseError(f"invalid fit file: {exc.message}", str(path)) from None
    return fit_from_dict(doc)


# --- tabular artifacts ------------------------------------------------------------

def write_spectra(path, result: FitResult, k: int = 5) -> None:
    """Rows ``stage, matrix, rank, eigenvalue`` for every covariance before and after EM."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "matrix", "rank", "eigenvalue"])
        for stage, mats in result.spectra(k).items():
            for name, vals in mats.items():
                for r, v in enumerate(vals, start=1):
                    w.writerow([stage, name, r, repr(float(v))])


def write_histogram(path, test) -> None:
    """One row per evaluated labelling: ``statistic, is_observed``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "is_observed"])
        for s, obs in zip(test.statistics, test.is_observed):
            w.writerow([repr(float(s)), int(bool(obs))])


def permutation_result_to_dict(test, pair_names) -> dict:
    return {
        "groups": list(pair_names),
        "observed": test.observed,
        "p_value": test.p_value,
        "n_permutations": test.n_permutations,
        "exhaustive": test.exhaustive,
        "statistics": [float(s) for s in test.statistics],
        "is_observed": [bool(b) for b in test.is_observed],
    }


def write_classification_report(path, names, results, truth=None) -> float | None:
    """CSV of per-query predictions; with ``truth`` an accuracy comment line is appended.

    Returns the accuracy, or ``None`` without labels.
    """
    group_names = results[0].group_names if results else []
    accuracy = None
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "predicted", "true"] + [f"log_score_{g}" for g in group_names])
        for i, (name, res) in enumerate(zip(names, results)):
            label = "" if truth is None else truth[i]
            w.writerow([name, res.predicted_name, label] + [repr(float(s)) for s in res.log_scores])
        if truth is not None and results:
            hits = sum(r.predicted_name == t for r, t in zip(results, truth))
            accuracy = hits / len(results)
            fh.write(f"# accuracy={accuracy:.4f} ({hits}/{len(results)})\n")
    return accuracy


# --- SVG -----------------------------------------------------------------------

OVERLAY_COLORS = ("blue", "red", "green", "orange", "purple", "brown")


def write_mean_overlay_svg(path, result: FitResult, size: int = 480) -> None:
    """Population mean in black and group means in colour, as closed polylines with markers."""
    curves = [("population", "black", result.params.mean)]
    curves += [(n, OVERLAY_COLORS[g % len(OVERLAY_COLORS)], m)
               for g, (n, m) in enumerate(zip(result.group_names, result.group_means))]
    pts = np.concatenate([c[:, :2] for _, _, c in curves])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    margin = 20
    scale = (size - 2 * margin) / max(float(np.max(hi - lo)), 1e-12)

    def xy(p):
        # flip y so the image is upright
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    for name, color, c in curves:
        coords = [xy(p) for p in c[:, :2]]
        poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
        parts.append(f'<g><title>{escape(name)}</title>'
                     f'<polygon points="{poly}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="{color}"/>' for x, y in coords]
        parts.append("</g>")
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
