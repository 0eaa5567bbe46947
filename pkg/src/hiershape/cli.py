"""Command-line entry point: ``hiershape {simulate,fit,test,classify,show-config}``.

Exit status is 0 on success, 1 when inputs fail validation and 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .analysis import classify, permutation_test
from .config import DEFAULTS, em_config, resolve
from .data import GroupedDataset
from .errors import ShapeError
from .geometry import procrustes_align
from .inference import fit
from .simdata import BoxBumpSpec, simulate

log = logging.getLogger("hiershape")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def preprocess(data: GroupedDataset, mode: str) -> GroupedDataset:
    """Apply the manifest's alignment step to every point set jointly.

    Sets whose point count differs from the model's are rescaled to the
    model's per-point size, since kernel distances depend on absolute scale.
    """
    if mode == "none":
        return data
    flat = [x for grp in data.groups for x in grp]
    aligned = procrustes_align(flat, cyclic=(mode == "cyclic"))
    aligned = [x * np.sqrt(len(x) / data.n_points) for x in aligned]
    groups, k = [], 0
    for grp in data.groups:
        groups.append(aligned[k:k + len(grp)])
        k += len(grp)
    return GroupedDataset(list(data.names), groups, data.n_points, data.dim)


# --- verbs ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = BoxBumpSpec(n_points=args.n_points, shapes_per_group=args.shapes_per_group,
                       noise_sd=args.noise_sd, seed=args.seed)
    clean, corrupted = simulate(spec)
    out = Path(args.out)
    # the generator never rotates shapes, so no pose alignment is requested
    io.write_manifest(out / "clean.json", clean, "box-bump-clean", "none", prefix="clean_")
    io.write_manifest(out / "manifest.json", corrupted, "box-bump", "none", prefix="obs_")
    print(f"wrote {sum(clean.sizes)} shapes per dataset to {out}")
    return EXIT_OK


def _settings(args) -> dict:
    flags = {k: getattr(args, k, None) for k in DEFAULTS}
    return resolve(flags, getattr(args, "config", None))


def cmd_fit(args) -> int:
    settings = _settings(args)
    data, manifest = io.read_manifest(args.manifest)
    mode = args.preprocessing or manifest["preprocessing"]
    data = preprocess(data, mode)
    cfg = em_config(settings, args.trace_dir)
    result = fit(data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_fit(out / "fit.json", result)
    io.write_spectra(out / "spectra.csv", result)
    io.write_mean_overlay_svg(out / "means.svg", result)
    status = "converged" if result.converged else "stopped at max_iter"
    print(f"{status} after {result.n_iter} EM iterations; results in {out}")
    return EXIT_OK


def _group_index(names, key):
    if key in names:
        return names.index(key)
    try:
        return int(key)
    except ValueError:
        raise ValueError(f"unknown group {key!r}; available: {', '.join(names)}") from None


def cmd_test(args) -> int:
    settings = _settings(args)
    result = io.read_fit(args.fit)
    pair = tuple(_group_index(result.group_names, g) for g in args.groups)
    data = None
    if args.source == "data":
        if args.manifest is None:
            raise ValueError("--source data needs --manifest")
        data, _ = io.read_manifest(args.manifest)
    test = permutation_test(result, pair, max_perms=int(settings["max_perms"]),
                            seed=int(settings["seed"]), source=args.source, data=data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [result.group_names[g] for g in pair]
    (out / "test.json").write_text(json.dumps(io.permutation_result_to_dict(test, names), indent=2) + "\n",
                                   encoding="utf-8")
    io.write_histogram(out / "histogram.csv", test)
    kind = "exhaustive" if test.exhaustive else "random"
    print(f"T2={test.observed:.6g} p={test.p_value:.4f} ({test.n_permutations} {kind} labellings)")
    return EXIT_OK


def cmd_classify(args) -> int:
    settings = _settings(args)
    result = io.read_fit(args.fit)
    queries, names, truth = [], [], None
    for f in args.queries:
        queries.append(io.read_pointset(f))
        names.append(str(f))
    if args.manifest is not None:
        data, _ = io.read_manifest(args.manifest)
        truth = [None] * len(queries)
        for gname, grp in zip(data.names, data.groups):
            for i, x in enumerate(grp):
                queries.append(x)
                names.append(f"{gname}/{i}")
                truth.append(gname)
        if args.queries:
            truth = None if any(t is None for t in truth) else truth
    if not queries:
        raise ValueError("no query shapes given")
    results = [classify(z, result, int(settings["classify_samples"]), int(settings["seed"]))
               for z in queries]
    acc = io.write_classification_report(args.out, names, results, truth)
    for n, r in zip(names, results):
        print(f"{n}: {r.predicted_name}")
    if acc is not None:
        print(f"accuracy={acc:.4f}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(json.dumps(_settings(args), indent=2))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _add_setting_flags(p, keys):
    for key in keys:
        default = DEFAULTS[key]
        kind = type(default) if default is not None else float
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=key, type=kind, default=None,
                           help=f"default {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiershape", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log EM progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", help="write box-bump ground truth and corrupted data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-points", type=int, default=BoxBumpSpec.n_points)
    p.add_argument("--shapes-per-group", type=int, default=BoxBumpSpec.shapes_per_group)
    p.add_argument("--noise-sd", type=float, default=BoxBumpSpec.noise_sd)
    p.set_defaults(func=cmd_simulate)

    model_keys = ["sigma", "beta", "epsilon", "step_size", "n_leapfrog", "hmc_iter", "max_phase",
                  "max_iter", "n_samples", "burn_in", "tol", "cyclic_init", "init_covariance", "seed"]
    p = sub.add_parser("fit", help="fit the hierarchical model to a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preprocessing", choices=io.PREPROCESSING,
                   help="override the manifest's alignment step")
    p.add_argument("--trace-dir", help="write one CSV of retained sweeps per EM iteration")
    _add_setting_flags(p, model_keys)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="permutation test of two fitted groups")
    p.add_argument("fit")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--groups", nargs=2, default=["0", "1"], metavar=("A", "B"))
    p.add_argument("--source", choices=("posterior", "data"), default="posterior")
    p.add_argument("--manifest", help="original data, for --source data")
    _add_setting_flags(p, ["max_perms", "seed"])
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("classify", help="assign new shapes to fitted groups")
    p.add_argument("fit")
    p.add_argument("queries", nargs="*", help="point-set files")
    p.add_argument("--manifest", help="labelled queries; adds an accuracy line to the report")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--config")
    _add_setting_flags(p, ["classify_samples", "seed"])
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("show-config", help="print the resolved settings")
    p.add_argument("--config")
    _add_setting_flags(p, list(DEFAULTS))
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ValueError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
