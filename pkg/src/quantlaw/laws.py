"""Loss and degeneration laws: evaluation, fitting and inversion.

Degeneration laws::

    weak:    delta = C * exp(A * q_r) * N**(-gamma_n)
    strong:  delta = C * exp(A * q_r) * N**(-gamma_n) * (q_b + d)**gamma_c

``N`` is in billions of non-embedding parameters. All logarithms are natural.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InvalidInput, NoFittableData, Underdetermined

WEAK = "weak"
STRONG = "strong"
OPT = "opt"
MEAN = "mean"

N_UNITS = "billions_non_embedding"

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
D_MARGIN = 1e-3
D_MAX = 1024.0


@dataclass(frozen=True)
class ExperimentPoint:
    n_params: float
    q_r: float
    q_b: int = 32
    d_tokens: Optional[float] = None

    def __post_init__(self):
        if not self.n_params > 0:
            raise InvalidInput(f"n_params must be > 0, got {self.n_params}")
        if not 0.0 <= self.q_r <= 1.0:
            raise InvalidInput(f"q_r must be in [0, 1], got {self.q_r}")
        if self.q_b < 1:
            raise InvalidInput(f"q_b must be >= 1, got {self.q_b}")


@dataclass(frozen=True)
class ChinchillaParams:
    a: float
    b: float
    alpha: float
    beta: float
    e_irreducible: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInput("alpha and beta must be >= 0")


@dataclass(frozen=True)
class PrecisionLawParams:
    c_t: float
    gamma_post: float
    gamma_d: float
    gamma_n: float
    c_w: float
    c_a: float
    c_kv: float
    p_w: float
    p_a: float
    p_kv: float
    p_post: float

    def __post_init__(self):
        if not self.gamma_post > 0:
            raise InvalidInput("gamma_post must be > 0")
        if min(self.p_w, self.p_a, self.p_kv, self.p_post) <= 0:
            raise InvalidInput("bit-widths must be > 0")


@dataclass(frozen=True)
class LawParams:
    c: float
    a_ratio: float
    gamma_n: float
    d_shift: float = 0.0
    gamma_c: float = 0.0
    law: str = WEAK
    target: str = OPT

    def __post_init__(self):
        if not self.c >= 0:
            raise InvalidInput(f"C must be non-negative, got {self.c}")
        if self.law not in (WEAK, STRONG):
            raise InvalidInput(f"unknown law {self.law!r}")
        if self.target not in (OPT, MEAN):
            raise InvalidInput(f"unknown target {self.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LawParams":
        keys = {"c", "a_ratio", "gamma_n", "d_shift", "gamma_c", "law", "target"}
        return cls(**{k: v for k, v in d.items() if k in keys})


# Published CLM fits, used as reference constants.
CLM_WEAK_LAYERWISE_MXINT4 = LawParams(c=0.2187, a_ratio=2.2312, gamma_n=0.8405)
CLM_STRONG = LawParams(c=0.0028, a_ratio=5.2055, gamma_n=0.7651, d_shift=13.6320,
                       gamma_c=0.4741, law=STRONG)


@dataclass(frozen=True)
class CompensationLine:
    """``ln N = a2 * q_r + c2`` at a fixed degeneration budget."""

    a2: float
    c2: float
    budget_l: float

    def log_n(self, q_r: float) -> float:
        return self.a2 * q_r + self.c2


@dataclass
class FitResult:
    params: LawParams
    r2_log: float
    r2_linear: float
    n_points: int
    n_dropped_nonpositive: int
    residual_summary: dict = field(default_factory=dict)
    units: str = N_UNITS

    def to_json(self) -> str:
        doc = {
            "law": self.params.law,
            "target": self.params.target,
            "units": {"n_params": self.units},
            "params": self.params.to_dict(),
            "r2_log": self.r2_log,
            "r2_linear": self.r2_linear,
            "n_points": self.n_points,
            "n_dropped_nonpositive": self.n_dropped_nonpositive,
            "residual_summary": self.residual_summary,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        doc = json.loads(text)
        try:
            return cls(
                params=LawParams.from_dict(doc["params"]),
                r2_log=doc["r2_log"],
                r2_linear=doc["r2_linear"],
                n_points=doc["n_points"],
                n_dropped_nonpositive=doc["n_dropped_nonpositive"],
                residual_summary=doc.get("residual_summary", {}),
                units=doc.get("units", {}).get("n_params", N_UNITS),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInput(f"malformed fit document: {exc}") from None


# ---------------------------------------------------------------------------
# Evaluators


def eval_chinchilla(p: ChinchillaParams, point: ExperimentPoint) -> float:
    """``A / N**alpha + B / D**beta + E`` with ``N`` taken in the point's units (billions).

    Published coefficients fitted on raw parameter counts must be rescaled by
    the caller (``A * 1e9**-alpha``).
    """
    if point.d_tokens is None:
        raise InvalidInput("Chinchilla evaluation needs d_tokens")
    if not point.d_tokens > 0:
        raise InvalidInput("d_tokens must be > 0")
    return p.a * point.n_params ** (-p.alpha) + p.b * point.d_tokens ** (-p.beta) + p.e_irreducible


def eval_precision_law(p: PrecisionLawParams, point: ExperimentPoint) -> float:
    """Post-training degeneration of the precision scaling law (all-weights PTQ)."""
    if point.d_tokens is None:
        raise InvalidInput("precision law evaluation needs d_tokens")
    product = 1.0
    for c_x, p_x in ((p.c_w, p.p_w), (p.c_a, p.p_a), (p.c_kv, p.p_kv)):
        product *= 1.0 - math.exp(-c_x * (p_x - p.p_post))
    return (p.c_t * math.exp(-p.p_post / p.gamma_post)
            * point.d_tokens ** p.gamma_d / point.n_params ** p.gamma_n * product)


def _granularity_factor(p: LawParams, q_b: float) -> float:
    if p.law == WEAK:
        return 1.0
    shifted = q_b + p.d_shift
    if shifted <= 0:
        raise DomainError(f"q_b + d = {shifted} <= 0")
    return shifted ** p.gamma_c


def eval_law(p: LawParams, point: ExperimentPoint) -> float:
    return (p.c * math.exp(p.a_ratio * point.q_r) * point.n_params ** (-p.gamma_n)
            * _granularity_factor(p, point.q_b))


def combined_loss(ch: ChinchillaParams, p: LawParams, point: ExperimentPoint) -> float:
    return eval_chinchilla(ch, point) + eval_law(p, point)


def absorb_full_ratio(p: LawParams, q_b: int) -> LawParams:
    """Weak law with ``e**A`` and the granularity factor folded into ``C``.

    Evaluating the result at any ``q_r`` equals ``eval_law(p, ...)`` at ``q_r = 1``.
    """
    c = p.c * math.exp(p.a_ratio) * _granularity_factor(p, q_b)
    return LawParams(c=c, a_ratio=0.0, gamma_n=p.gamma_n, law=WEAK, target=p.target)


# ---------------------------------------------------------------------------
# Inversions


def compensation_line(p: LawParams, budget_l: float, q_b: Optional[int] = None) -> CompensationLine:
    """Iso-degeneration line in ``(q_r, ln N)``.

    For a strong law ``q_b`` must be given; its granularity factor joins ``C``.
    """
    if not budget_l > 0:
        raise DomainError("budget must be > 0")
    if p.gamma_n == 0:
        raise DomainError("gamma_n = 0: N cannot compensate")
    c = p.c
    if p.law == STRONG:
        if q_b is None:
            raise DomainError("strong law needs q_b for a compensation line")
        c *= _granularity_factor(p, q_b)
    if not c > 0:
        raise DomainError("C must be > 0")
    return CompensationLine(a2=p.a_ratio / p.gamma_n, c2=(math.log(c) - math.log(budget_l)) / p.gamma_n,
                            budget_l=budget_l)


def max_ratio(p: LawParams, n_params: float, q_b: int, budget_l: float) -> float:
    """Largest ``q_r`` in [0, 1] whose predicted degeneration stays within budget."""
    if not budget_l > 0:
        raise DomainError("budget must be > 0")
    at_one = eval_law(p, ExperimentPoint(n_params, 1.0, q_b))
    if at_one <= budget_l:
        return 1.0
    at_zero = eval_law(p, ExperimentPoint(n_params, 0.0, q_b))
    if at_zero > budget_l or p.a_ratio <= 0:
        return 0.0
    q = (math.log(budget_l) - math.log(at_zero)) / p.a_ratio
    return min(1.0, max(0.0, q))


def min_params(p: LawParams, q_r: float, q_b: int, budget_l: float) -> float:
    """Smallest ``N`` (billions) whose predicted degeneration at ``q_r`` is within budget."""
    if not budget_l > 0:
        raise DomainError("budget must be > 0")
    if not p.gamma_n > 0:
        raise DomainError("gamma_n must be > 0 to invert in N")
    at_one_billion = eval_law(p, ExperimentPoint(1.0, q_r, q_b))
    if at_one_billion == 0:
        return 0.0
    return (at_one_billion / budget_l) ** (1.0 / p.gamma_n)


# ---------------------------------------------------------------------------
# Fitting


def golden_section_min(f, lo: float, hi: float, *, tol: float = 1e-12, max_iter: int = 200):
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))``."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _design(q_r, log_n, q_b, d: Optional[float]):
    cols = [np.ones_like(q_r), q_r, -log_n]
    if d is not None:
        cols.append(np.log(q_b + d))
    return np.column_stack(cols)


def _ols(X: np.ndarray, y: np.ndarray):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    return coef, float(resid @ resid)


def fit_law(points: Sequence[tuple[ExperimentPoint, float]], law: str = WEAK,
            target: str = OPT, *, scan_points: int = 129) -> FitResult:
    """Least-squares fit of ``ln delta`` to the weak or strong law.

    Given ``d`` the model is linear in ``(ln C, A, gamma_n, gamma_c)`` and is
    solved by OLS. For the strong law ``d`` is chosen on
    ``(-min(q_b) + 1e-3, 1024]`` by a log-spaced scan followed by golden-section
    refinement around the best scan point.
    """
    if law not in (WEAK, STRONG):
        raise InvalidInput(f"unknown law {law!r}")
    kept = [(pt, float(dl)) for pt, dl in points if math.isfinite(dl) and dl > 0]
    dropped = len(points) - len(kept)
    if not kept:
        raise NoFittableData("no positive degeneration values to fit")
    min_points = 4 if law == WEAK else 6
    if len(kept) < min_points:
        raise Underdetermined(f"{len(kept)} usable points; {law} law needs at least {min_points}")

    n = np.array([pt.n_params for pt, _ in kept], dtype=np.float64)
    q_r = np.array([pt.q_r for pt, _ in kept], dtype=np.float64)
    q_b = np.array([pt.q_b for pt, _ in kept], dtype=np.float64)
    delta = np.array([dl for _, dl in kept], dtype=np.float64)
    y = np.log(delta)
    log_n = np.log(n)

    axes = {"n_params": n, "q_r": q_r}
    if law == STRONG:
        axes["q_b"] = q_b
    for name, values in axes.items():
        if np.unique(values).size < 2:
            raise Underdetermined(f"axis {name} is constant")

    if law == WEAK:
        d = None
    else:
        d_lo = -q_b.min() + D_MARGIN
        # Scan in t = ln(d - d_lo + D_MARGIN) so small shifts get resolution.
        ts = np.linspace(math.log(D_MARGIN), math.log(D_MAX - d_lo + D_MARGIN), scan_points)
        ds = d_lo - D_MARGIN + np.exp(ts)
        sse = [_ols(_design(q_r, log_n, q_b, float(dd)), y)[1] for dd in ds]
        i = int(np.argmin(sse))
        lo, hi = ds[max(i - 1, 0)], ds[min(i + 1, len(ds) - 1)]
        d, _ = golden_section_min(lambda dd: _ols(_design(q_r, log_n, q_b, dd), y)[1], lo, hi)
        if sse[i] < _ols(_design(q_r, log_n, q_b, d), y)[1]:
            d = float(ds[i])

    X = _design(q_r, log_n, q_b, d)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise Underdetermined("design matrix is rank deficient")
    coef, sse = _ols(X, y)
    params = LawParams(
        c=math.exp(coef[0]),
        a_ratio=float(coef[1]),
        gamma_n=float(coef[2]),
        d_shift=0.0 if d is None else float(d),
        gamma_c=0.0 if d is None else float(coef[3]),
        law=law,
        target=target,
    )
    pred_log = X @ coef
    resid = y - pred_log
    sst = float(np.sum((y - y.mean()) ** 2))
    r2_log = 1.0 - sse / sst if sst > 0 else 1.0
    pred = np.exp(pred_log)
    sst_lin = float(np.sum((delta - delta.mean()) ** 2))
    r2_lin = 1.0 - float(np.sum((delta - pred) ** 2)) / sst_lin if sst_lin > 0 else 1.0
    summary = {
        "rms_log": float(np.sqrt(np.mean(resid**2))),
        "max_abs_log": float(np.max(np.abs(resid))),
        "sse_log": sse,
    }
    return FitResult(params, r2_log, r2_lin, len(kept), dropped, summary)

