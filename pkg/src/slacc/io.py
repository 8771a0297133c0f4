"""File formats: subject manifests, covariate tables, matrix files, model files.

Numeric CSV output uses 17 significant digits so every float round-trips
exactly; the model file is JSON whose numeric payload is likewise lossless
(save -> load -> save is byte-identical).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datatypes import (ConnectivityDataset, DataValidationError, FitConfig,
                        AdmmConfig, ParameterSet, n_pairs, unvectorize_rows)
from .harmonization import DesignSpec, decompose_coefficients, pooled_scales

MODEL_FORMAT = "slacc-model"
MODEL_VERSION = 1


def fmt(value):
    """Render a cell: floats at full round-trip precision, others as str."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(path, header, rows):
    """Write rows (sequences or dicts keyed by header) with formatted cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(col) for col in header]
            writer.writerow([fmt(v) for v in row])


def write_matrix_csv(path, Y):
    """Full symmetric matrix as comma-separated values, no header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for row in np.asarray(Y, dtype=float):
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_matrix_csv(path):
    try:
        Y = np.loadtxt(path, delimiter=",", ndmin=2)
    except Exception as err:
        raise DataValidationError(f"cannot parse matrix file {path}: {err}") from err
    return Y


@dataclass(frozen=True)
class Manifest:
    subject_ids: tuple
    matrix_paths: tuple
    sites: tuple


def read_manifest(path):
    """Manifest CSV with mandatory header subject_id, matrix_path, site."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "matrix_path", "site"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataValidationError(
                f"manifest {path} must carry a header with columns {sorted(required)}")
        ids, paths, sites = [], [], []
        for row in reader:
            ids.append(row["subject_id"])
            paths.append(row["matrix_path"])
            sites.append(row["site"])
    if len(set(ids)) != len(ids):
        dup = sorted({s for s in ids if ids.count(s) > 1})
        raise DataValidationError(f"duplicate subject_id(s) in manifest: {dup}")
    if not ids:
        raise DataValidationError(f"manifest {path} lists no subjects")
    return Manifest(tuple(ids), tuple(paths), tuple(sites))


def read_covariates(path):
    """Covariates CSV: subject_id column plus numeric biological columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "subject_id" not in reader.fieldnames:
            raise DataValidationError(f"covariates file {path} needs a subject_id column")
        names = [c for c in reader.fieldnames if c != "subject_id"]
        table = {}
        for row in reader:
            try:
                table[row["subject_id"]] = [float(row[c]) for c in names]
            except ValueError as err:
                raise DataValidationError(
                    f"non-numeric covariate for subject {row['subject_id']}: {err}") from err
    return names, table


def load_dataset(manifest_path, covariates_path=None, diagonal_mode="include",
                 symmetrize=True, vectorized_path=None, vectorized_meta=None,
                 site_order=None):
    """Assemble a dataset from files.

    Per-subject matrix files are read from the manifest's matrix_path column
    (relative paths resolve against the manifest's directory) unless
    ``vectorized_path`` names a single n x p CSV whose sidecar declares V and
    the diagonal mode. Site one-hot columns are appended internally after the
    biological covariates, so the design split is always known.

    Returns (dataset, subject_ids, design, site_labels).
    """
    manifest = read_manifest(manifest_path)
    base = Path(manifest_path).parent

    if vectorized_path is not None:
        meta_path = Path(vectorized_meta) if vectorized_meta else Path(str(vectorized_path) + ".meta.json")
        try:
            meta = json.loads(Path(meta_path).read_text())
        except FileNotFoundError as err:
            raise DataValidationError(f"vectorized input needs a sidecar at {meta_path}") from err
        V = int(meta["V"])
        diagonal_mode = meta.get("diagonal_mode", diagonal_mode)
        vecs = np.loadtxt(vectorized_path, delimiter=",", ndmin=2)
        if vecs.shape != (len(manifest.subject_ids), n_pairs(V, diagonal_mode)):
            raise DataValidationError(
                f"vectorized data shape {vecs.shape} does not match manifest "
                f"({len(manifest.subject_ids)} subjects, p={n_pairs(V, diagonal_mode)})")
        mats = unvectorize_rows(vecs, V, diagonal_mode)
    else:
        mats = []
        V = None
        for sid, rel in zip(manifest.subject_ids, manifest.matrix_paths):
            mpath = Path(rel)
            if not mpath.is_absolute():
                mpath = base / mpath
            if not mpath.exists():
                raise DataValidationError(f"matrix file for subject {sid} not found: {mpath}")
            Y = read_matrix_csv(mpath)
            if Y.shape[0] != Y.shape[1]:
                raise DataValidationError(f"matrix for subject {sid} is not square: {Y.shape}")
            if V is None:
                V = Y.shape[0]
            elif Y.shape[0] != V:
                raise DataValidationError(f"matrix for subject {sid} has V={Y.shape[0]}, expected {V}")
            mats.append(Y)
        mats = np.stack(mats)

    if covariates_path is not None:
        names, table = read_covariates(covariates_path)
        missing = [sid for sid in manifest.subject_ids if sid not in table]
        if missing:
            raise DataValidationError(f"covariate row missing for subject(s): {missing}")
        bio = np.array([table[sid] for sid in manifest.subject_ids], dtype=float)
    else:
        names, bio = [], np.zeros((len(manifest.subject_ids), 0))

    labels = list(site_order) if site_order is not None else list(dict.fromkeys(manifest.sites))
    lookup = {lab: i for i, lab in enumerate(labels)}
    unseen = sorted({s for s in manifest.sites if s not in lookup})
    if unseen:
        raise DataValidationError(f"site(s) not seen during fitting: {unseen}")
    hot = np.zeros((len(manifest.subject_ids), len(labels)))
    hot[np.arange(len(manifest.subject_ids)), [lookup[s] for s in manifest.sites]] = 1.0

    X = np.hstack([bio, hot])
    design = DesignSpec(biological_columns=tuple(range(bio.shape[1])),
                        site_columns=tuple(range(bio.shape[1], bio.shape[1] + len(labels))))
    dataset = ConnectivityDataset(mats, list(manifest.sites), X,
                                  diagonal_mode=diagonal_mode, symmetrize=symmetrize,
                                  site_order=labels)
    return dataset, manifest.subject_ids, design, tuple(labels), tuple(names)


def config_to_dict(config):
    return {
        "max_em_iter": config.max_em_iter, "em_tol": config.em_tol,
        "tau": config.tau, "lambda_max": config.lambda_max,
        "anneal_iters": config.anneal_iters, "warmup_iters": config.warmup_iters,
        "seed": config.seed, "variance_floor": config.variance_floor,
        "admm": {"rho": config.admm.rho, "eta": config.admm.eta,
                 "max_iter": config.admm.max_iter,
                 "primal_tol": config.admm.primal_tol,
                 "dual_tol": config.admm.dual_tol},
    }


def config_from_dict(payload):
    payload = dict(payload)
    admm = payload.pop("admm", {}) or {}
    known = {"max_em_iter", "em_tol", "tau", "lambda_max", "anneal_iters",
             "warmup_iters", "seed", "variance_floor"}
    extra = set(payload) - known
    if extra:
        raise DataValidationError(f"unknown config field(s): {sorted(extra)}")
    return FitConfig(admm=AdmmConfig(**admm), **payload)


def model_payload(result, design, site_labels, site_sizes, diagonal_mode,
                  covariate_names, subject_count):
    theta = result.theta
    alpha, theta_z, gamma = decompose_coefficients(theta.B, design, site_sizes)
    sigma_h, phi_h = pooled_scales(theta.sigma2, theta.phi2, site_sizes)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "V": theta.V, "L": theta.L, "q": theta.q, "M": theta.n_sites,
        "n_subjects": int(subject_count),
        "diagonal_mode": diagonal_mode,
        "site_labels": list(site_labels),
        "site_sizes": [int(c) for c in site_sizes],
        "U": theta.U.tolist(), "B": theta.B.tolist(),
        "sigma2": theta.sigma2.tolist(), "phi2": theta.phi2.tolist(),
        "design": {
            "biological_columns": list(design.biological_columns),
            "site_columns": list(design.site_columns),
            "intercept_column": design.intercept_column,
            "covariate_names": list(covariate_names),
        },
        "pooled": {"sigma_h": sigma_h.tolist(), "phi_h": phi_h},
        "batch_free": {"alpha": alpha.tolist(), "theta_z": theta_z.tolist(),
                       "gamma": gamma.tolist()},
        "fit": {
            "config": config_to_dict(result.config),
            "resolved": result.resolved,
            "converged": bool(result.converged),
            "iterations": int(result.iterations),
            "nll": float(result.nll),
            "loglik_total": float(result.loglik_total),
            "dropped_columns": int(result.dropped_columns),
        },
    }


def save_model(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


@dataclass(frozen=True)
class LoadedModel:
    theta: ParameterSet
    design: DesignSpec
    site_labels: tuple
    site_sizes: np.ndarray
    diagonal_mode: str
    covariate_names: tuple
    payload: dict


def load_model(path):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise DataValidationError(f"model file {path} is not valid JSON: {err}") from err
    if payload.get("format") != MODEL_FORMAT:
        raise DataValidationError(f"{path} is not a model file (format={payload.get('format')!r})")
    theta = ParameterSet(U=np.array(payload["U"], dtype=float),
                         B=np.array(payload["B"], dtype=float),
                         sigma2=np.array(payload["sigma2"], dtype=float),
                         phi2=np.array(payload["phi2"], dtype=float))
    d = payload["design"]
    design = DesignSpec(biological_columns=tuple(d["biological_columns"]),
                        site_columns=tuple(d["site_columns"]),
                        intercept_column=d.get("intercept_column"))
    return LoadedModel(theta=theta, design=design,
                       site_labels=tuple(payload["site_labels"]),
                       site_sizes=np.array(payload["site_sizes"], dtype=int),
                       diagonal_mode=payload["diagonal_mode"],
                       covariate_names=tuple(d.get("covariate_names", [])),
                       payload=payload)


def write_trace_csv(path, trace):
    header = ["iteration", "phase", "lambda", "nll", "delta_u", "nnz",
              "admm_iterations", "admm_converged", "admm_fell_back"]
    rows = [[r.iteration, r.phase, r.lam, r.nll, r.delta_u, r.nnz,
             r.admm_iterations, r.admm_converged, r.admm_fell_back] for r in trace]
    write_csv(path, header, rows)


def write_loadings_csv(path, U):
    header = ["region"] + [f"factor{l + 1}" for l in range(U.shape[1])]
    rows = [[v + 1] + list(U[v]) for v in range(U.shape[0])]
    write_csv(path, header, rows)
