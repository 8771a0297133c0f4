"""Command-line entry point: fit, select, harmonize, simulate, evaluate.

Exit codes: 0 success, 2 input/validation failure, 3 numerical failure.
Human-readable progress goes to stdout; failures also emit one JSON object
on stderr. SLACC_LOG in {quiet, info, debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datatypes import DataValidationError, FitConfig, NumericalFitError, validate
from .em import fit
from .harmonization import harmonize_external
from .model_selection import curve_rows, select_L
from .simulation import run_simulation1, run_simulation2, site_f_statistics
from . import io as slacc_io

logger = logging.getLogger("slacc")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _configure_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SLACC_LOG", "info"), logging.INFO)
    logging.basicConfig(stream=sys.stdout, level=level, format="%(message)s")


def _fail(code, message, detail=None):
    payload = {"error": {"code": code, "message": message}}
    if detail:
        payload["error"]["detail"] = detail
    print(json.dumps(payload), file=sys.stderr)
    return code


def _load_config(args):
    if getattr(args, "config", None):
        payload = json.loads(Path(args.config).read_text())
        config = slacc_io.config_from_dict(payload)
    else:
        config = FitConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    return config


def _load_input(args, diagonal_mode, site_order=None):
    return slacc_io.load_dataset(
        args.manifest, covariates_path=args.covariates,
        diagonal_mode=diagonal_mode, symmetrize=True,
        vectorized_path=getattr(args, "vectorized", None),
        vectorized_meta=getattr(args, "vectorized_meta", None),
        site_order=site_order)


def cmd_fit(args):
    logger.info("diagonal mode: %s", args.diagonal_mode)
    dataset, subject_ids, design, labels, cov_names = _load_input(args, args.diagonal_mode)
    report = validate(dataset, args.L)
    if not report.ok and not args.force:
        raise DataValidationError(str(report))
    config = _load_config(args)
    logger.info("fitting %d subjects (V=%d, p=%d, %d sites) with L=%d",
                dataset.n, dataset.V, dataset.p, dataset.n_sites, args.L)
    result = fit(dataset, args.L, config=config, force=args.force)
    out = Path(args.out)
    payload = slacc_io.model_payload(result, design, labels, dataset.site_sizes,
                                     dataset.diagonal_mode, cov_names, dataset.n)
    slacc_io.save_model(out, payload)
    slacc_io.write_trace_csv(out.with_suffix(out.suffix + ".trace.csv"), result.trace)
    slacc_io.write_loadings_csv(out.with_suffix(out.suffix + ".U.csv"), result.theta.U)
    logger.info("converged=%s iterations=%d nll=%.8g nnz(U)=%d",
                result.converged, result.iterations, result.nll,
                int(np.count_nonzero(result.theta.U)))
    logger.info("model written to %s", out)
    return EXIT_OK


def cmd_select(args):
    if not 0.0 <= args.gamma <= 1.0:
        raise DataValidationError(f"gamma must lie in [0, 1], got {args.gamma}")
    if args.Lmin > args.Lmax:
        raise DataValidationError(f"empty grid: Lmin={args.Lmin} > Lmax={args.Lmax}")
    logger.info("diagonal mode: %s", args.diagonal_mode)
    dataset, subject_ids, design, labels, cov_names = _load_input(args, args.diagonal_mode)
    config = _load_config(args)
    grid = list(range(args.Lmin, args.Lmax + 1))
    logger.info("selecting L over grid %s (gamma=%g)", grid, args.gamma)
    sel = select_L(dataset, grid, gamma=args.gamma, config=config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    slacc_io.write_csv(outdir / "curve.csv", ["L", "nll", "df", "ebic", "converged"],
                       curve_rows(sel))
    payload = slacc_io.model_payload(sel.best_fit, design, labels, dataset.site_sizes,
                                     dataset.diagonal_mode, cov_names, dataset.n)
    slacc_io.save_model(outdir / "model.json", payload)
    logger.info("selected L=%d; curve and model written to %s", sel.L_best, outdir)
    return EXIT_OK


def cmd_harmonize(args):
    model = slacc_io.load_model(args.model)
    dataset, subject_ids, _, _, _ = _load_input(args, model.diagonal_mode,
                                                site_order=model.site_labels)
    if dataset.V != model.theta.V:
        raise DataValidationError(f"data has V={dataset.V}, model expects V={model.theta.V}")
    out = harmonize_external(model.theta, model.design, dataset,
                             train_site_labels=model.site_labels,
                             train_site_sizes=model.site_sizes)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    site_of = {sid: dataset.site_labels[code] for sid, code in zip(subject_ids, dataset.sites)}
    if getattr(args, "vectorized", None):
        rows, cols = np.triu_indices(dataset.V, k=0 if model.diagonal_mode == "include" else 1)
        vecs = out.Y_h[:, rows, cols]
        with open(outdir / "harmonized.csv", "w", newline="") as fh:
            for row in vecs:
                fh.write(",".join(format(v, ".17g") for v in row) + "\n")
        meta = {"V": dataset.V, "diagonal_mode": model.diagonal_mode,
                "ordering": "row-major-upper-triangle"}
        (outdir / "harmonized.csv.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        manifest_rows = [[sid, "harmonized.csv", site_of[sid]] for sid in subject_ids]
    else:
        manifest_rows = []
        for j, sid in enumerate(subject_ids):
            slacc_io.write_matrix_csv(outdir / f"{sid}.csv", out.Y_h[j])
            manifest_rows.append([sid, f"{sid}.csv", site_of[sid]])
    slacc_io.write_csv(outdir / "harmonized_manifest.csv",
                       ["subject_id", "matrix_path", "site"], manifest_rows)
    header = ["subject_id", "site"] + [f"factor{l + 1}" for l in range(out.a_h.shape[1])]
    score_rows = [[sid, site_of[sid]] + list(out.a_h[j]) for j, sid in enumerate(subject_ids)]
    slacc_io.write_csv(outdir / "harmonized_scores.csv", header, score_rows)
    logger.info("harmonized %d subjects into %s", dataset.n, outdir)
    return EXIT_OK


def cmd_simulate(args):
    n_grid = [int(v) for v in args.n_grid.split(",") if v]
    if not n_grid:
        raise DataValidationError("--n-grid must list at least one sample size")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    logger.info("diagonal mode: include (synthetic matrices carry their diagonal)")
    if args.study == "estimation":
        logger.info("estimation study: scenario=%d n_grid=%s reps=%d seed=%d",
                    args.scenario, n_grid, args.reps, args.seed)
        tidy, summary = run_simulation1(scenario=args.scenario, n_grid=n_grid,
                                        n_reps=args.reps, seed=args.seed,
                                        threads=args.threads)
        slacc_io.write_csv(outdir / "tidy.csv",
                           ["method", "scenario", "n", "replicate", "metric", "value"], tidy)
        if summary:
            header = list(summary[0].keys())
            slacc_io.write_csv(outdir / "summary.csv", header, summary)
    else:
        grid = list(range(args.Lmin, args.Lmax + 1))
        logger.info("selection study: scenario=%d n=%s reps=%d grid=%s",
                    args.scenario, n_grid, args.reps, grid)
        rows, curves = run_simulation2(scenario=args.scenario, n=n_grid[0],
                                       n_reps=args.reps, grid=grid, gamma=args.gamma,
                                       seed=args.seed, threads=args.threads)
        slacc_io.write_csv(outdir / "tidy.csv",
                           ["scenario", "n", "replicate", "chosen_L", "error"], rows)
        slacc_io.write_csv(outdir / "curves.csv",
                           ["scenario", "n", "replicate", "L", "nll", "df", "ebic", "converged"],
                           curves)
        chosen = [r["chosen_L"] for r in rows if r["chosen_L"] is not None]
        counts = {L: chosen.count(L) for L in sorted(set(chosen))}
        slacc_io.write_csv(outdir / "summary.csv", ["chosen_L", "count"],
                           [[L, c] for L, c in counts.items()])
    logger.info("simulation outputs written to %s", outdir)
    return EXIT_OK


def _read_scores_csv(path, sites_path=None):
    import csv as _csv

    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or "subject_id" not in reader.fieldnames:
            raise DataValidationError(f"scores file {path} needs a subject_id column")
        cols = [c for c in reader.fieldnames if c not in ("subject_id", "site")]
        ids, sites, values = [], [], []
        has_site = "site" in reader.fieldnames
        for row in reader:
            ids.append(row["subject_id"])
            if has_site:
                sites.append(row["site"])
            values.append([float(row[c]) for c in cols])
    values = np.asarray(values, dtype=float)
    if sites_path is not None:
        with open(sites_path, newline="") as fh:
            reader = _csv.DictReader(fh)
            need = {"subject_id", "site"}
            if reader.fieldnames is None or not need.issubset(reader.fieldnames):
                raise DataValidationError(f"sites file {sites_path} needs columns {sorted(need)}")
            table = {row["subject_id"]: row["site"] for row in reader}
        missing = [sid for sid in ids if sid not in table]
        if missing:
            raise DataValidationError(f"site missing for subject(s): {missing}")
        sites = [table[sid] for sid in ids]
    if not sites:
        raise DataValidationError("no site labels: supply a site column or --sites")
    return ids, np.array(sites), cols, values


def cmd_evaluate(args):
    if args.scores is None and args.manifest is None:
        raise DataValidationError("provide --scores or --manifest")
    if args.scores is not None:
        ids, sites, names, values = _read_scores_csv(args.scores, args.sites)
    else:
        dataset, ids, _, _, _ = _load_input(args, args.diagonal_mode)
        rows, cols = np.triu_indices(dataset.V, k=0 if args.diagonal_mode == "include" else 1)
        names = [f"edge_{r + 1}_{c + 1}" for r, c in zip(rows, cols)]
        sites = np.array([dataset.site_labels[c] for c in dataset.sites])
        values = dataset.vectors
    f_mean, f_var = site_f_statistics(values, sites)
    header = ["feature", "f_mean", "f_variance", "f_mean_post", "f_variance_post"]
    if args.post is not None:
        ids_p, sites_p, names_p, values_p = _read_scores_csv(args.post, args.sites)
        if len(names_p) != len(names):
            raise DataValidationError("pre and post score files have different columns")
        f_mean_p, f_var_p = site_f_statistics(values_p, sites_p)
        rows_out = [[names[k], f_mean[k], f_var[k], f_mean_p[k], f_var_p[k]]
                    for k in range(len(names))]
    else:
        rows_out = [[names[k], f_mean[k], f_var[k], None, None] for k in range(len(names))]
    slacc_io.write_csv(args.out, header, rows_out)
    logger.info("F statistics for %d feature(s) written to %s", len(names), args.out)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slacc",
        description="Sparse latent covariate-driven factorization and "
                    "harmonization of symmetric connectivity matrices.")
    parser.add_argument("--version", action="version", version=f"slacc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_input_flags(p, default_mode):
        p.add_argument("--manifest", required=True, help="CSV: subject_id, matrix_path, site")
        p.add_argument("--covariates", help="CSV: subject_id plus numeric columns")
        p.add_argument("--vectorized", help="single n x p CSV of upper-triangle rows")
        p.add_argument("--vectorized-meta", help="sidecar JSON for --vectorized")
        p.add_argument("--diagonal-mode", choices=["include", "exclude"], default=default_mode)

    p = sub.add_parser("fit", help="fit the model with a fixed factor count")
    add_input_flags(p, "exclude")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--config", help="flat JSON of fit settings")
    p.add_argument("--out", required=True, help="model file path (JSON)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", help="fit despite validation violations")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose the factor count on an EBIC grid")
    add_input_flags(p, "exclude")
    p.add_argument("--Lmin", type=int, required=True)
    p.add_argument("--Lmax", type=int, required=True)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("harmonize", help="apply a fitted model to remove site effects")
    p.add_argument("--model", required=True)
    add_input_flags(p, "exclude")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("simulate", help="run the synthetic-data studies")
    p.add_argument("--study", choices=["estimation", "selection"], default="estimation")
    p.add_argument("--scenario", type=int, choices=[1, 2], default=1)
    p.add_argument("--n-grid", default="100,300,500")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--Lmin", type=int, default=2)
    p.add_argument("--Lmax", type=int, default=10)
    p.add_argument("--threads", type=int, default=0, help="0 = all cores")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="site-effect F statistics for scores or edges")
    p.add_argument("--scores", help="CSV: subject_id, optional site, score columns")
    p.add_argument("--post", help="optional post-harmonization scores CSV")
    p.add_argument("--sites", help="CSV: subject_id, site (when scores lack a site column)")
    p.add_argument("--manifest", help="evaluate edge-level F from matrices instead")
    p.add_argument("--covariates")
    p.add_argument("--vectorized")
    p.add_argument("--vectorized-meta")
    p.add_argument("--diagonal-mode", choices=["include", "exclude"], default="exclude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataValidationError as err:
        return _fail(EXIT_INPUT, str(err))
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as err:
        return _fail(EXIT_INPUT, str(err))
    except NumericalFitError as err:
        detail = None
        if err.trace:
            detail = {"iterations": len(err.trace)}
        return _fail(EXIT_NUMERICAL, str(err), detail)
    except np.linalg.LinAlgError as err:
        return _fail(EXIT_NUMERICAL, str(err))


if __name__ == "__main__":
    sys.exit(main())
