"""File formats: subject tables, measurement tables, configs, results.

Data travel as two delimited text files with headers: one row per
subject (baseline, treatments, response, follow-up) and one row per
biomarker measurement.  Floats are written with ``repr`` so a
write/read/write cycle is byte-identical.  Parse failures name the file
and line.  Study configuration is a flat JSON object mirroring the
StudyConfig field names; results carry a schema tag, the seed, and a
hash of the configuration that produced them.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, DataError
from .harness import StudyConfig
from .model import SubjectRecord

__all__ = [
    "write_dataset",
    "read_dataset",
    "load_study_config",
    "save_study_config",
    "study_config_hash",
    "SUBJECTS_FILENAME",
    "LONGITUDINAL_FILENAME",
    "PROVENANCE_FILENAME",
]

SUBJECTS_FILENAME = "subjects.csv"
LONGITUDINAL_FILENAME = "longitudinal.csv"
PROVENANCE_FILENAME = "provenance.json"

_TRUE = {"1", "true", "True"}
_FALSE = {"0", "false", "False"}


def _fmt(x: float) -> str:
    return repr(float(x))


def _subject_header(n_cov: int) -> list[str]:
    return (
        ["id"]
        + [f"x{j + 1:02d}" for j in range(n_cov)]
        + ["v1", "responder", "v2", "obs_time", "event"]
    )


def write_dataset(
    out_dir: str | Path,
    data: Sequence[SubjectRecord],
    provenance: dict | None = None,
) -> dict[str, Path]:
    """Write subject and measurement files (and optional provenance)."""
    if not data:
        raise DataError("refusing to write an empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_cov = len(data[0].x0)

    subjects_path = out / SUBJECTS_FILENAME
    with subjects_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_subject_header(n_cov))
        for rec in data:
            writer.writerow(
                [rec.subject_id]
                + [_fmt(v) for v in rec.x0]
                + [
                    rec.v1,
                    "" if rec.responder is None else ("1" if rec.responder else "0"),
                    "" if rec.v2 is None else rec.v2,
                    _fmt(rec.obs_time),
                    "1" if rec.event else "0",
                ]
            )

    longitudinal_path = out / LONGITUDINAL_FILENAME
    with longitudinal_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "value"])
        for rec in data:
            for t, v in zip(rec.times, rec.values):
                writer.writerow([rec.subject_id, _fmt(t), _fmt(v)])

    paths = {"subjects": subjects_path, "longitudinal": longitudinal_path}
    if provenance is not None:
        provenance_path = out / PROVENANCE_FILENAME
        provenance_path.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
        paths["provenance"] = provenance_path
    return paths


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"{where}: not a number: {raw!r}") from None


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{where}: not an integer id: {raw!r}") from None


def _parse_bool(raw: str, where: str) -> bool:
    if raw in _TRUE:
        return True
    if raw in _FALSE:
        return False
    raise DataError(f"{where}: expected 0 or 1, got {raw!r}")


def read_dataset(
    subjects_path: str | Path, longitudinal_path: str | Path
) -> list[SubjectRecord]:
    """Read the two-file format back into subject records.

    Measurement rows may be missing (a subject can have any subset of
    its schedule); rows are matched to subjects by id and sorted by
    time.  Errors carry the offending file and line number.
    """
    subjects_path = Path(subjects_path)
    longitudinal_path = Path(longitudinal_path)

    rows: dict[int, dict] = {}
    order: list[int] = []
    with subjects_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{subjects_path}:1: empty subjects file")
        cov_cols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        expected = _subject_header(len(cov_cols))
        if header != expected:
            raise DataError(
                f"{subjects_path}:1: expected header "
                f"id,x01..x0k,v1,responder,v2,obs_time,event; got {','.join(header)}"
            )
        n_cov = len(cov_cols)
        for lineno, row in enumerate(reader, start=2):
            where = f"{subjects_path}:{lineno}"
            if len(row) != len(expected):
                raise DataError(f"{where}: expected {len(expected)} fields, got {len(row)}")
            sid = _parse_int(row[0], where)
            if sid in rows:
                raise DataError(f"{where}: duplicate subject id {sid}")
            x0 = tuple(_parse_float(v, where) for v in row[1 : 1 + n_cov])
            v1 = row[1 + n_cov]
            responder_raw = row[2 + n_cov]
            v2_raw = row[3 + n_cov]
            rows[sid] = {
                "x0": x0,
                "v1": v1,
                "responder": None
                if responder_raw == ""
                else _parse_bool(responder_raw, where),
                "v2": None if v2_raw == "" else v2_raw,
                "obs_time": _parse_float(row[4 + n_cov], where),
                "event": _parse_bool(row[5 + n_cov], where),
                "times": [],
                "values": [],
            }
            order.append(sid)

    with longitudinal_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "time", "value"]:
            raise DataError(f"{longitudinal_path}:1: expected header id,time,value")
        for lineno, row in enumerate(reader, start=2):
            where = f"{longitudinal_path}:{lineno}"
            if len(row) != 3:
                raise DataError(f"{where}: expected 3 fields, got {len(row)}")
            sid = _parse_int(row[0], where)
            if sid not in rows:
                raise DataError(f"{where}: unknown subject id {sid}")
            t = _parse_float(row[1], where)
            v = _parse_float(row[2], where)
            entry = rows[sid]
            if t < 0.0 or t > entry["obs_time"] + 1e-9:
                raise DataError(
                    f"{where}: time {t} outside [0, obs_time={entry['obs_time']}]"
                )
            entry["times"].append(t)
            entry["values"].append(v)

    records = []
    for sid in order:
        entry = rows[sid]
        pairs = sorted(zip(entry["times"], entry["values"]), key=lambda p: p[0])
        records.append(
            SubjectRecord(
                subject_id=sid,
                x0=entry["x0"],
                times=tuple(t for t, _ in pairs),
                values=tuple(v for _, v in pairs),
                v1=entry["v1"],
                responder=entry["responder"],
                v2=entry["v2"],
                obs_time=entry["obs_time"],
                event=entry["event"],
            )
        )
    return records


# -- study configuration --------------------------------------------------


def save_study_config(path: str | Path, study: StudyConfig) -> None:
    payload = dataclasses.asdict(study)
    payload["horizons"] = list(study.horizons)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_study_config(path: str | Path) -> StudyConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(StudyConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    if "horizons" in payload:
        payload["horizons"] = tuple(float(h) for h in payload["horizons"])
    try:
        return StudyConfig(**payload)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def study_config_hash(study: StudyConfig) -> str:
    payload = dataclasses.asdict(study)
    payload["horizons"] = list(study.horizons)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
