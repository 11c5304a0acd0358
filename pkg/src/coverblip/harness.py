"""Experiment pipeline: phantoms, simulated measurements, metrics, runner.

Experiments are described by a JSON config (schema below) and produce a
run directory with per-run traces, parameter-map grids, a summary table
and plot data.  Wall-clock timings go to a separate timings.csv so the
summary files are byte-identical across reruns with the same seed.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .covertree import build as build_tree
from .dictionary import (
    ParameterGrid,
    fingerprint_trajectories,
    generate_fingerprints,
    svd_compress,
)
from .forward_model import (
    MrfImage,
    make_cartesian_operator,
    make_epi_pattern,
    make_gaussian_operator,
)
from .solver import SolverConfig, solve, solve_compressed

__all__ = [
    "Metrics",
    "Phantom",
    "build_phantom",
    "compute_metrics",
    "run_experiment",
    "simulate_measurements",
]

# Fig-style tissue triples (T1 ms, T2 ms, B0 Hz) and flat proton densities
TISSUES = {
    1: ("csf", (5012.0, 512.0, -20.0), 1.00),
    2: ("grey_matter", (1545.0, 83.0, -40.0), 0.86),
    3: ("white_matter", (811.0, 77.0, -30.0), 0.77),
    4: ("adipose", (530.0, 77.0, 50.0), 0.90),
    5: ("skin_muscle", (1425.0, 41.0, 250.0), 0.80),
}


@dataclass
class Phantom:
    segment_map: np.ndarray          # h x w integer labels, 0 = background
    segment_params: dict             # label -> (T1, T2, B0)
    pd_map: np.ndarray               # h x w proton densities
    gt_image: MrfImage
    gt_indices: np.ndarray | None    # atom id per voxel when on-grid


@dataclass
class Metrics:
    nmse: float
    t1_acc: float
    t2_acc: float
    b0_acc: float
    mask: np.ndarray


def _snap_params(triple, dictionary):
    """Nearest dictionary grid triple in per-column relative distance."""
    table = dictionary.lookup_table
    scale = np.maximum(np.abs(table).max(axis=0), 1.0)
    d2 = (((table - np.asarray(triple)) / scale) ** 2).sum(axis=1)
    j = int(np.argmin(d2))
    return j, tuple(table[j])


def build_phantom(h, w, layout, dictionary, snap=True,
                  custom_path=None) -> Phantom:
    """Deterministic segmented phantom with its on-cone ground truth."""
    seg = np.zeros((h, w), dtype=np.int64)
    if layout == "brainweb_like":
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.sqrt(((xx - (w - 1) / 2) / (0.48 * w)) ** 2
                    + ((yy - (h - 1) / 2) / (0.48 * h)) ** 2)
        seg[r <= 1.00] = 5
        seg[r <= 0.90] = 4
        seg[r <= 0.80] = 3
        seg[r <= 0.50] = 2
        seg[r <= 0.25] = 1
        params = {k: v[1] for k, v in TISSUES.items()}
        pds = {k: v[2] for k, v in TISSUES.items()}
    elif layout == "blocks":
        b = max(1, min(h, w) // 8)
        seg[b:h // 2, b:w - b] = 1
        seg[h // 2:h - b, b:w - b] = 2
        params = {1: TISSUES[2][1], 2: TISSUES[3][1]}
        pds = {1: TISSUES[2][2], 2: TISSUES[3][2]}
    elif layout == "custom_file":
        with open(custom_path) as fh:
            spec = json.load(fh)
        seg = np.asarray(spec["segment_map"], dtype=np.int64)
        if seg.shape != (h, w):
            raise ValueError("custom segment map shape mismatch")
        params = {int(k): tuple(v["params"])
                  for k, v in spec["segments"].items()}
        pds = {int(k): float(v["pd"]) for k, v in spec["segments"].items()}
    else:
        raise ValueError(f"unknown layout {layout!r}")

    atom_ids = {}
    if snap:
        for label in params:
            j, snapped = _snap_params(params[label], dictionary)
            params[label] = snapped
            atom_ids[label] = j

    n = h * w
    pd_map = np.zeros((h, w))
    gt = np.zeros((n, dictionary.L), dtype=complex)
    gt_indices = np.zeros(n, dtype=np.int64) if snap else None
    flat_seg = seg.ravel()
    for label, triple in params.items():
        voxels = np.flatnonzero(flat_seg == label)
        if len(voxels) == 0:
            continue
        pd_map.ravel()[voxels] = pds[label]
        if snap:
            atom = dictionary.atoms[atom_ids[label]]
            gt_indices[voxels] = atom_ids[label]
        else:
            raw = fingerprint_trajectories(np.array([triple]),
                                           dictionary.tr_ms,
                                           dictionary.L)[0]
            atom = raw / np.linalg.norm(raw)
        gt[voxels] = pds[label] * atom
    return Phantom(segment_map=seg, segment_params=params, pd_map=pd_map,
                   gt_image=MrfImage(gt, (h, w)), gt_indices=gt_indices)


def simulate_measurements(X0, A, snr_db, seed=0) -> np.ndarray:
    """Y = A(X0) + complex white Gaussian noise at the requested SNR."""
    Y = A.apply(X0.data if hasattr(X0, "data") else X0)
    if np.isinf(snr_db):
        return Y
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape)
    xi *= np.linalg.norm(Y) / np.linalg.norm(xi) * 10 ** (-snr_db / 20.0)
    return Y + xi


def compute_metrics(est_maps, est_image, phantom,
                    gamma_threshold=0.05) -> Metrics:
    """NMSE plus masked parameter accuracies.

    The mask contours the estimated proton-density map (gamma above
    `gamma_threshold` times its maximum), intersected with voxels that
    carry ground-truth signal so every masked voxel has defined truth.
    """
    gt = phantom.gt_image.data
    est = est_image.data if hasattr(est_image, "data") else est_image
    nmse = float(np.linalg.norm(est - gt) / np.linalg.norm(gt))
    gamma = est_maps.pd
    mask = gamma > gamma_threshold * gamma.max()
    mask &= phantom.pd_map.ravel() > 0
    if not np.any(mask):
        raise ValueError("empty metric mask")
    flat_seg = phantom.segment_map.ravel()
    t1_gt = np.zeros(len(flat_seg))
    t2_gt = np.zeros(len(flat_seg))
    b0_gt = np.zeros(len(flat_seg))
    for label, (t1, t2, b0) in phantom.segment_params.items():
        sel = flat_seg == label
        t1_gt[sel], t2_gt[sel], b0_gt[sel] = t1, t2, b0
    t1_acc = 1.0 - float(np.mean(
        np.abs(est_maps.t1[mask] - t1_gt[mask]) / t1_gt[mask]))
    t2_acc = 1.0 - float(np.mean(
        np.abs(est_maps.t2[mask] - t2_gt[mask]) / t2_gt[mask]))
    b0_den = np.maximum(np.abs(b0_gt[mask]), 1.0)
    b0_acc = 1.0 - float(np.mean(
        np.abs(est_maps.b0[mask] - b0_gt[mask]) / b0_den))
    return Metrics(nmse=nmse, t1_acc=t1_acc, t2_acc=t2_acc, b0_acc=b0_acc,
                   mask=mask)


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "seed", "phantom", "dictionary", "operator",
                 "algorithms"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "noise_snr_db": {"type": ["number", "null"]},
        "phantom": {
            "type": "object",
            "required": ["h", "w", "layout"],
            "additionalProperties": False,
            "properties": {
                "h": {"type": "integer", "minimum": 2},
                "w": {"type": "integer", "minimum": 2},
                "layout": {"enum": ["brainweb_like", "blocks",
                                    "custom_file"]},
                "snap": {"type": "boolean"},
                "custom_path": {"type": "string"},
            },
        },
        "dictionary": {
            "type": "object",
            "required": ["t1", "t2", "b0", "tr_ms", "L"],
            "additionalProperties": False,
            "properties": {
                "t1": {"type": "array"},
                "t2": {"type": "array"},
                "b0": {"type": "array"},
                "tr_ms": {"type": "number", "exclusiveMinimum": 0},
                "L": {"type": "integer", "minimum": 2},
            },
        },
        "operator": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["epi", "gaussian"]},
                "lines_per_frame": {"type": "integer", "minimum": 1},
                "m": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "algorithms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["mode"],
                "additionalProperties": False,
                "properties": {
                    "mode": {"enum": ["tm", "blip_exact", "coverblip"]},
                    "epsilon": {"type": "number", "minimum": 0},
                    "compressed": {"type": ["integer", "null"]},
                },
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iters": {"type": "integer", "minimum": 1},
                "rel_tol": {"type": "number", "exclusiveMinimum": 0},
                "mu_init": {"type": "number", "exclusiveMinimum": 0},
                "zeta": {"type": "number", "exclusiveMinimum": 1},
            },
        },
    },
}


def _run_id(alg):
    rid = alg["mode"]
    if alg["mode"] == "coverblip":
        rid += f"_eps{alg.get('epsilon', 0.0):g}"
    if alg.get("compressed"):
        rid += f"_s{alg['compressed']}"
    return rid


def _float(x):
    return "" if x is None else repr(float(x))


def run_experiment(config_file, output_root=None) -> Path:
    """Run every configured algorithm and write the report files.

    Returns the run directory.  Honors COVERBLIP_OUTPUT_ROOT for the
    output location and COVERBLIP_WORKERS for run-level parallelism.
    """
    with open(config_file) as fh:
        config = json.load(fh)
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValueError(f"config error at {path}: {e.message}") from None

    root = output_root or os.environ.get("COVERBLIP_OUTPUT_ROOT", "runs")
    out = Path(root) / config["name"]
    out.mkdir(parents=True, exist_ok=True)

    pconf = config["phantom"]
    dconf = config["dictionary"]
    grid = ParameterGrid(
        t1_values=[tuple(v) if isinstance(v, list) else v
                   for v in dconf["t1"]],
        t2_values=[tuple(v) if isinstance(v, list) else v
                   for v in dconf["t2"]],
        b0_values=[tuple(v) if isinstance(v, list) else v
                   for v in dconf["b0"]])
    dictionary = generate_fingerprints(grid, dconf["tr_ms"], dconf["L"])
    phantom = build_phantom(pconf["h"], pconf["w"], pconf["layout"],
                            dictionary, snap=pconf.get("snap", True),
                            custom_path=pconf.get("custom_path"))

    oconf = config["operator"]
    h, w, L = pconf["h"], pconf["w"], dconf["L"]
    if oconf["kind"] == "epi":
        pattern = make_epi_pattern((h, w), oconf["lines_per_frame"], L)
        A = make_cartesian_operator(pattern)
    else:
        A = make_gaussian_operator(h * w, oconf["m"], L,
                                   seed=oconf.get("seed", config["seed"]))

    snr = config.get("noise_snr_db")
    Y = simulate_measurements(phantom.gt_image, A,
                              np.inf if snr is None else snr,
                              seed=config["seed"])

    sconf = config.get("solver", {})
    trees = {}

    def tree_for(s):
        if s not in trees:
            atoms = (dictionary.atoms if s is None
                     else svd_compress(dictionary, s).atoms_compressed)
            trees[s] = build_tree(atoms)
        return trees[s]

    def one_run(alg):
        s = alg.get("compressed")
        cfg = SolverConfig(mode=alg["mode"],
                           epsilon=alg.get("epsilon", 0.0),
                           compressed=s, seed=config["seed"], **sconf)
        if s is None:
            tree = tree_for(None) if alg["mode"] == "coverblip" else None
            X, maps, gammas, trace = solve(Y, A, dictionary, tree, cfg,
                                           gt=phantom.gt_image)
        else:
            cdict = svd_compress(dictionary, s)
            tree = tree_for(s) if alg["mode"] == "coverblip" else None
            X, maps, gammas, trace = solve_compressed(Y, A, cdict, tree,
                                                      cfg,
                                                      gt=phantom.gt_image)
        metrics = compute_metrics(maps, X, phantom)
        return _run_id(alg), maps, metrics, trace

    workers = int(os.environ.get("COVERBLIP_WORKERS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_run, config["algorithms"]))
    else:
        results = [one_run(a) for a in config["algorithms"]]

    rows = []
    for rid, maps, metrics, trace in results:
        trace.to_csv(out / f"trace_{rid}.csv")
        mdir = out / f"maps_{rid}"
        mdir.mkdir(exist_ok=True)
        for name, arr in (("t1", maps.t1), ("t2", maps.t2),
                          ("b0", maps.b0), ("pd", maps.pd)):
            np.savetxt(mdir / f"{name}.csv", arr.reshape(h, w),
                       delimiter=",")
        rows.append({"run": rid, "nmse": metrics.nmse,
                     "t1_acc": metrics.t1_acc, "t2_acc": metrics.t2_acc,
                     "b0_acc": metrics.b0_acc,
                     "search_cost": trace.total_cost,
                     "iterations": trace.iterations,
                     "seconds": trace.total_time})

    with open(out / "summary.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["run", "nmse", "t1_acc", "t2_acc", "b0_acc",
                     "search_cost", "iterations"])
        for r in rows:
            cw.writerow([r["run"], _float(r["nmse"]), _float(r["t1_acc"]),
                         _float(r["t2_acc"]), _float(r["b0_acc"]),
                         r["search_cost"], r["iterations"]])
    with open(out / "summary.json", "w") as fh:
        json.dump({"config": config,
                   "runs": [{k: v for k, v in r.items() if k != "seconds"}
                            for r in rows]}, fh, indent=2)
    with open(out / "timings.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["run", "seconds"])
        for r in rows:
            cw.writerow([r["run"], repr(r["seconds"])])
    with open(out / "plotdata_cost_vs_nmse.csv", "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["run", "search_cost", "nmse"])
        for r in rows:
            cw.writerow([r["run"], r["search_cost"], _float(r["nmse"])])
    return out
