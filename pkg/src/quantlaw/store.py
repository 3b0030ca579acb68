"""JSON-Lines trial logs, contour tables and CSV export.

A log is a sequence of runs. Each run is a header line followed by one line
per trial::

    {"kind": "run", "schema_version": 1, "run_id": ..., "model_digest": ...,
     "tokens_digest": ..., "n_params": ..., "baseline_loss": ..., "spec": {...},
     "source": ...}
    {"kind": "trial", "run_id": ..., "model_digest": ..., "method": ...,
     "granularity": ..., "qr_target": ..., "qr_achieved": ..., "qb": ...,
     "trial_index": ..., "seed": ..., "plan_digest": ..., "loss": ...,
     "delta": ..., "source": ..., "status": "ok" | "failed"}

Fields a reader does not know are kept in ``extra`` and written back.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConflictError, ParseError, SchemaError
from .laws import ExperimentPoint, FitResult
from .search import Estimates, SearchSpec, TrialRecord, TrialSet, estimate

SCHEMA_VERSION = 1
CSV_HEADER = ("n_params", "q_r", "q_b", "delta_opt", "delta_mu", "n_trials")

_HEADER_KEYS = {"kind", "schema_version", "run_id", "model_digest", "tokens_digest",
                "n_params", "baseline_loss", "spec", "source"}
_TRIAL_KEYS = {"kind", "run_id", "model_digest", "method", "granularity", "qr_target",
               "qr_achieved", "qb", "trial_index", "seed", "plan_digest", "loss", "delta",
               "source", "status", "error"}


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, ensure_ascii=False)


def run_lines(ts: TrialSet) -> list[str]:
    header = {
        **ts.extra,
        "kind": "run",
        "schema_version": SCHEMA_VERSION,
        "run_id": ts.run_id,
        "model_digest": ts.model_id,
        "tokens_digest": ts.tokens_digest,
        "n_params": ts.n_effective,
        "baseline_loss": ts.baseline_loss,
        "spec": ts.spec.to_dict(),
        "source": ts.source,
    }
    lines = [_dumps(header)]
    for r in ts.records:
        row = {
            **r.extra,
            "kind": "trial",
            "run_id": ts.run_id,
            "model_digest": ts.model_id,
            "method": str(ts.spec.method),
            "granularity": ts.spec.granularity,
            "qr_target": ts.spec.qr_target,
            "qr_achieved": r.qr_achieved,
            "qb": ts.spec.qb,
            "trial_index": r.trial_index,
            "seed": r.seed,
            "plan_digest": r.plan_digest,
            "loss": r.loss,
            "delta": r.delta,
            "source": ts.source,
            "status": "ok" if r.ok else "failed",
        }
        if r.error is not None:
            row["error"] = r.error
        lines.append(_dumps(row))
    return lines


def append_run(path, ts: TrialSet) -> None:
    """Append one run; earlier bytes of the file are never touched."""
    text = "".join(line + "\n" for line in run_lines(ts))
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(text)


def read_runs(path) -> list[TrialSet]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        raw = f.read()
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        # Last line has no terminator: a writer was interrupted mid-line.
        try:
            json.loads(lines[-1])
        except json.JSONDecodeError:
            raise ParseError("truncated final line", len(lines)) from None

    runs: list[TrialSet] = []
    current: TrialSet | None = None
    last_index = -1
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        kind = obj.get("kind")
        if kind == "run":
            version = obj.get("schema_version")
            if version != SCHEMA_VERSION:
                raise SchemaError(f"line {lineno}: unsupported schema version {version!r}")
            try:
                current = TrialSet(
                    model_id=obj["model_digest"],
                    n_effective=obj["n_params"],
                    spec=SearchSpec.from_dict(obj["spec"]),
                    baseline_loss=obj["baseline_loss"],
                    records=[],
                    run_id=obj["run_id"],
                    tokens_digest=obj.get("tokens_digest", ""),
                    source=obj.get("source", "search"),
                    extra={k: v for k, v in obj.items() if k not in _HEADER_KEYS},
                )
            except (KeyError, TypeError) as exc:
                raise ParseError(f"incomplete run header: {exc}", lineno) from None
            runs.append(current)
            last_index = -1
        elif kind == "trial":
            if current is None:
                raise ParseError("trial record before any run header", lineno)
            if obj.get("run_id") != current.run_id:
                raise ParseError("trial record does not belong to the preceding run", lineno)
            try:
                rec = TrialRecord(
                    trial_index=obj["trial_index"],
                    seed=obj["seed"],
                    qr_achieved=obj["qr_achieved"],
                    plan_digest=obj["plan_digest"],
                    loss=obj["loss"],
                    delta=obj["delta"],
                    ok=obj.get("status", "ok") == "ok",
                    error=obj.get("error"),
                    extra={k: v for k, v in obj.items() if k not in _TRIAL_KEYS},
                )
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", lineno) from None
            if rec.trial_index <= last_index:
                raise ParseError("trial_index not strictly increasing", lineno)
            last_index = rec.trial_index
            current.records.append(rec)
        else:
            raise ParseError(f"unknown record kind {kind!r}", lineno)
    return runs


# ---------------------------------------------------------------------------
# Contours


@dataclass(frozen=True)
class ContourRow:
    n_params: float
    q_r: float
    q_b: int
    delta_opt: float
    delta_mu: float
    n_trials: int

    @property
    def key(self) -> tuple[float, float, int]:
        return (self.n_params, self.q_r, self.q_b)


ContourTable = list[ContourRow]


def run_key(ts: TrialSet) -> tuple[float, float, int]:
    """``(N in billions, q_r target, q_b)``."""
    return (ts.n_effective / 1e9, ts.spec.qr_target, ts.spec.qb)


def build_contour(runs: Iterable[TrialSet]) -> ContourTable:
    groups: dict[tuple, list[TrialSet]] = {}
    for ts in runs:
        groups.setdefault(run_key(ts), []).append(ts)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        ref = members[0]
        for other in members[1:]:
            if (other.model_id, other.tokens_digest) != (ref.model_id, ref.tokens_digest):
                raise ConflictError(f"runs at {key} were measured against different baselines")
            if (str(other.spec.method), other.spec.granularity) != (str(ref.spec.method), ref.spec.granularity):
                raise ConflictError(f"runs at {key} use different quantization settings")
        deltas = [r.delta for ts in members for r in ts.successful]
        est: Estimates = estimate(deltas)
        rows.append(ContourRow(key[0], key[1], key[2], est.delta_opt, est.delta_mu, est.n))
    return rows


def contour_points(table: Sequence[ContourRow], target: str = "opt") -> list[tuple[ExperimentPoint, float]]:
    attr = "delta_opt" if target == "opt" else "delta_mu"
    return [(ExperimentPoint(r.n_params, r.q_r, r.q_b), getattr(r, attr)) for r in table]


def _fmt(v: float) -> str:
    return format(v, ".9g")


def export_csv(table: Sequence[ContourRow], path) -> None:
    rows = sorted(table, key=lambda r: r.key)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r.n_params), _fmt(r.q_r), str(r.q_b), _fmt(r.delta_opt),
                        _fmt(r.delta_mu), str(r.n_trials)])


def write_fit(fit: FitResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(fit.to_json())


def read_fit(path) -> FitResult:
    with open(os.fspath(path), "r", encoding="utf-8") as f:
        return FitResult.from_json(f.read())
