"""Command-line interface.

Subcommands map onto the library's stages: ``simulate`` writes a
dataset, ``fit`` estimates the joint model, ``gformula`` and ``iptw``
turn fits and weights into regimen-value tables, ``mcb`` builds
best-regimen confidence sets from a saved table, and ``study`` runs the
full replication pipeline.  All results are JSON with a schema tag, the
seed in effect, and a hash of the study configuration.  A failure exits
nonzero with the failing stage named on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .errors import SmartjmError
from .estimation import FitOptions, fit_joint_model
from .gformula import RegimenValueTable, propagate_uncertainty, regimen_values
from .harness import StudyConfig, run_study
from .iptw import iptw_values, iptw_with_bootstrap
from .mcb import mcb_best_set
from .model import DesignConfig
from .simgen import reference_truth
from .estimation import ParamLayout

__all__ = ["main", "build_parser"]


class _StageFailure(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _estimand_key(spec) -> str:
    kind, horizon = spec
    return f"{kind}@{horizon:g}"


def _parse_estimand_key(key: str):
    kind, _, raw = key.partition("@")
    if kind not in ("rmst", "survival") or not raw:
        raise _StageFailure("input", f"bad estimand key {key!r}")
    return (kind, float(raw))


def _parse_horizons(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise _StageFailure("config", f"bad horizons {raw!r}") from None


def _estimands_for(horizons: tuple[float, ...]):
    return tuple(("rmst", h) for h in horizons) + tuple(
        ("survival", h) for h in horizons
    )


def _table_payload(table: RegimenValueTable) -> dict:
    payload: dict = {
        "dtrs": list(table.dtr_labels),
        "estimands": [_estimand_key(s) for s in table.estimands],
        "values": {
            _estimand_key(s): [float(v) for v in table.values[s]]
            for s in table.estimands
        },
    }
    if table.cov is not None:
        payload["se"] = {
            _estimand_key(s): [float(v) for v in table.se(s)]
            for s in table.estimands
        }
        payload["cov"] = {
            _estimand_key(s): np.asarray(table.cov[s]).tolist()
            for s in table.estimands
        }
        payload["n_draws"] = table.n_draws
        payload["n_redrawn"] = table.n_redrawn
    return payload


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_study(args) -> StudyConfig:
    study = (
        dataio.load_study_config(args.config)
        if getattr(args, "config", None)
        else StudyConfig()
    )
    overrides = {}
    mapping = {
        "n": "n_subjects",
        "replications": "n_replications",
        "seed": "seed",
        "threads": "threads",
        "zeta": "zeta",
    }
    for arg_name, field in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[field] = value
    schedule = getattr(args, "schedule", None)
    if schedule in ("dense", "sparse"):
        overrides["schedule"] = schedule
    horizons = getattr(args, "horizons", None)
    if horizons is not None:
        overrides["horizons"] = _parse_horizons(horizons)
    if overrides:
        study = dataclasses.replace(study, **overrides)
    return study


def _read_data(args, stage: str):
    try:
        data = dataio.read_dataset(args.subjects, args.longitudinal)
    except (OSError, SmartjmError) as exc:
        raise _StageFailure(stage, str(exc)) from exc
    if not data:
        raise _StageFailure(stage, "dataset holds no subjects")
    return data


def _fit_payload(fit) -> dict:
    layout = fit.layout
    nat = layout.to_natural(fit.theta_hat)
    rows = []
    for j, name in enumerate(layout.names):
        rows.append(
            {
                "name": name,
                "estimate": float(nat[j]),
                "se": None if fit.se is None else float(fit.se[j]),
            }
        )
    return {
        "converged": fit.converged,
        "loglik": fit.loglik,
        "n_iter": fit.n_iter,
        "rel_projected_gradient": fit.rel_projected_gradient,
        "n_subjects": fit.n_subjects,
        "k_nodes": fit.k_nodes,
        "parameters": rows,
        "warnings": list(fit.warnings),
    }


# -- subcommands -----------------------------------------------------------


def _cmd_simulate(args) -> None:
    study = _load_study(args)
    cfg = DesignConfig()
    schedule = args.schedule if args.schedule is not None else study.schedule
    if schedule == "dense":
        pass
    elif schedule == "sparse":
        from .model import SPARSE_SCHEDULE

        cfg = cfg.with_schedule(SPARSE_SCHEDULE)
    else:
        try:
            points = tuple(float(tok) for tok in schedule.split(","))
        except ValueError:
            raise _StageFailure(
                "config", f"schedule must be dense, sparse, or comma-separated times; got {schedule!r}"
            ) from None
        cfg = cfg.with_schedule(points)

    truth = reference_truth()
    from .simgen import simulate_trial

    data = simulate_trial(study.seed, study.n_subjects, truth, cfg)
    layout = ParamLayout(cfg)
    truth_nat = layout.to_natural(truth.theta)
    provenance = {
        "schema": "smartjm/dataset@1",
        "seed": study.seed,
        "config_hash": dataio.study_config_hash(study),
        "n_subjects": study.n_subjects,
        "schedule": list(cfg.measurement_schedule),
        "censor_rate": truth.censor_rate,
        "p_x01": truth.p_x01,
        "truth": {name: float(truth_nat[j]) for j, name in enumerate(layout.names)},
    }
    paths = dataio.write_dataset(args.out, data, provenance)
    print(f"wrote {paths['subjects']} and {paths['longitudinal']}")


def _cmd_fit(args) -> None:
    study = _load_study(args)
    data = _read_data(args, "input")
    cfg = DesignConfig()
    try:
        fit = fit_joint_model(data, cfg, FitOptions(k_nodes=study.k_fit))
    except SmartjmError as exc:
        raise _StageFailure("fit", str(exc)) from exc
    payload = {
        "schema": "smartjm/fit@1",
        "seed": None,
        "config_hash": dataio.study_config_hash(study),
        **_fit_payload(fit),
    }
    _write_json(args.out, payload)
    print(f"wrote {args.out} (converged={fit.converged})")


def _cmd_gformula(args) -> None:
    study = _load_study(args)
    data = _read_data(args, "input")
    cfg = DesignConfig()
    estimands = _estimands_for(study.horizons)
    try:
        fit = fit_joint_model(data, cfg, FitOptions(k_nodes=study.k_fit))
    except SmartjmError as exc:
        raise _StageFailure("fit", str(exc)) from exc
    baselines = np.array([s.x0 for s in data])
    try:
        if study.n_jm_draws > 0 and fit.vcov_working is not None:
            table = propagate_uncertainty(
                fit,
                baselines,
                estimands,
                cfg,
                rng=np.random.default_rng(study.seed),
                n_draws=study.n_jm_draws,
                k_nodes=study.k_marginal,
                grid_size=study.rmst_grid,
            )
        else:
            table = regimen_values(
                fit.theta_hat,
                baselines,
                estimands,
                cfg,
                k_nodes=study.k_marginal,
                grid_size=study.rmst_grid,
            )
    except SmartjmError as exc:
        raise _StageFailure("gformula", str(exc)) from exc
    payload = {
        "schema": "smartjm/gformula@1",
        "seed": study.seed,
        "config_hash": dataio.study_config_hash(study),
        "fit": _fit_payload(fit),
        "table": _table_payload(table),
    }
    _write_json(args.out, payload)
    print(f"wrote {args.out}")


def _cmd_iptw(args) -> None:
    study = _load_study(args)
    data = _read_data(args, "input")
    cfg = DesignConfig()
    estimands = _estimands_for(study.horizons)
    try:
        if study.n_boot > 0:
            table = iptw_with_bootstrap(
                data,
                estimands,
                cfg,
                rng=np.random.default_rng(study.seed),
                n_boot=study.n_boot,
            )
        else:
            table = iptw_values(data, estimands, cfg)
    except SmartjmError as exc:
        raise _StageFailure("iptw", str(exc)) from exc
    payload = {
        "schema": "smartjm/iptw@1",
        "seed": study.seed,
        "config_hash": dataio.study_config_hash(study),
        "table": _table_payload(table),
    }
    _write_json(args.out, payload)
    print(f"wrote {args.out}")


def _cmd_mcb(args) -> None:
    study = _load_study(args)
    try:
        payload = json.loads(Path(args.table).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _StageFailure("input", f"{args.table}: {exc}") from exc
    table = payload.get("table", payload)
    if "cov" not in table:
        raise _StageFailure(
            "mcb", "the table carries no covariances; rerun with draws/bootstrap"
        )
    labels = tuple(table["dtrs"])
    rng = np.random.default_rng(study.seed)
    sets = {}
    for key in table["estimands"]:
        values = np.asarray(table["values"][key], dtype=float)
        cov = np.asarray(table["cov"][key], dtype=float)
        try:
            res = mcb_best_set(
                labels, values, cov, zeta=study.zeta, rng=rng, n_mc=study.n_mc
            )
        except SmartjmError as exc:
            raise _StageFailure("mcb", f"{key}: {exc}") from exc
        sets[key] = {
            "best": labels[res.best_index],
            "in_set": [lab for lab, keep in zip(labels, res.in_set) if keep],
            "margins": [float(v) for v in res.margins],
            "cutoffs": [float(v) for v in res.cutoffs],
        }
    out_payload = {
        "schema": "smartjm/mcb@1",
        "seed": study.seed,
        "config_hash": dataio.study_config_hash(study),
        "zeta": study.zeta,
        "n_mc": study.n_mc,
        "dtrs": list(labels),
        "sets": sets,
    }
    _write_json(args.out, out_payload)
    print(f"wrote {args.out}")


def _metrics_payload(result) -> dict:
    m = result.metrics
    return {
        "convergence_pct": m.convergence_pct,
        "n_replications": m.n_replications,
        "parameters": [dataclasses.asdict(p) for p in m.parameters],
        "values": [
            {**dataclasses.asdict(v), "estimand": _estimand_key(v.estimand)}
            for v in m.values
        ],
        "selection": [
            {**dataclasses.asdict(s), "estimand": _estimand_key(s.estimand)}
            for s in m.selection
        ],
        "contrasts": [
            {
                **dataclasses.asdict(c),
                "estimand": _estimand_key(c.estimand),
                "pair": list(c.pair),
            }
            for c in m.contrasts
        ],
        "efficiency": [
            {**dataclasses.asdict(e), "estimand": _estimand_key(e.estimand)}
            for e in m.efficiency
        ],
    }


def _cmd_study(args) -> None:
    study = _load_study(args)
    truth = reference_truth()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(record) -> None:
        flag = "ok" if record.converged else "NOT CONVERGED"
        print(
            f"replication {record.rep_index}: {flag} ({record.n_iter} iterations)",
            file=sys.stderr,
            flush=True,
        )

    try:
        result = run_study(truth, study, progress=progress if args.verbose else None)
    except SmartjmError as exc:
        raise _StageFailure("study", str(exc)) from exc

    payload = {
        "schema": "smartjm/study@1",
        "seed": study.seed,
        "config_hash": dataio.study_config_hash(study),
        "config": {
            **dataclasses.asdict(study),
            "horizons": list(study.horizons),
        },
        "truth": {
            "parameters": {
                name: float(v)
                for name, v in zip(result.parameter_names, result.truth_parameters)
            },
            "values": _table_payload(result.truth_values),
        },
        "metrics": _metrics_payload(result),
        "curves": {
            "grid": [float(t) for t in result.curve_grid],
            "truth": {
                lab: [float(v) for v in result.truth_curves[j]]
                for j, lab in enumerate(result.truth_values.dtr_labels)
            },
            "mean_fitted": {
                lab: [float(v) for v in result.mean_curves[j]]
                for j, lab in enumerate(result.truth_values.dtr_labels)
            },
        },
    }
    out_path = out_dir / "study_results.json"
    _write_json(out_path, payload)
    print(f"wrote {out_path} ({result.metrics.convergence_pct:.0f}% converged)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smartjm",
        description="Two-stage trial joint modeling: simulate, fit, compare regimens.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="study configuration JSON")
        if seed:
            p.add_argument("--seed", type=int, help="master seed override")

    p_sim = sub.add_parser("simulate", help="generate a synthetic trial dataset")
    add_common(p_sim)
    p_sim.add_argument("--n", type=int, help="number of subjects")
    p_sim.add_argument(
        "--schedule",
        help="dense, sparse, or comma-separated measurement times",
    )
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=_cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit the joint model to a dataset")
    add_common(p_fit, seed=False)
    p_fit.add_argument("--subjects", required=True)
    p_fit.add_argument("--longitudinal", required=True)
    p_fit.add_argument("--out", required=True, help="output JSON path")
    p_fit.set_defaults(func=_cmd_fit)

    p_gf = sub.add_parser(
        "gformula", help="fit, then standardize to regimen values"
    )
    add_common(p_gf)
    p_gf.add_argument("--subjects", required=True)
    p_gf.add_argument("--longitudinal", required=True)
    p_gf.add_argument("--horizons", help="comma-separated horizons")
    p_gf.add_argument("--out", required=True)
    p_gf.set_defaults(func=_cmd_gformula)

    p_ip = sub.add_parser("iptw", help="weighted Kaplan-Meier regimen values")
    add_common(p_ip)
    p_ip.add_argument("--subjects", required=True)
    p_ip.add_argument("--longitudinal", required=True)
    p_ip.add_argument("--horizons", help="comma-separated horizons")
    p_ip.add_argument("--out", required=True)
    p_ip.set_defaults(func=_cmd_iptw)

    p_mcb = sub.add_parser("mcb", help="best-regimen confidence sets from a table")
    add_common(p_mcb)
    p_mcb.add_argument("--table", required=True, help="gformula or iptw output JSON")
    p_mcb.add_argument("--zeta", type=float, help="set level")
    p_mcb.add_argument("--out", required=True)
    p_mcb.set_defaults(func=_cmd_mcb)

    p_st = sub.add_parser("study", help="full replication study with metrics")
    add_common(p_st)
    p_st.add_argument("--n", type=int, help="subjects per replication")
    p_st.add_argument("--replications", type=int)
    p_st.add_argument("--threads", type=int)
    p_st.add_argument("--schedule", choices=["dense", "sparse"])
    p_st.add_argument("--zeta", type=float)
    p_st.add_argument("--horizons", help="comma-separated horizons")
    p_st.add_argument("--verbose", action="store_true")
    p_st.add_argument("--out", required=True, help="output directory")
    p_st.set_defaults(func=_cmd_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except _StageFailure as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except SmartjmError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
