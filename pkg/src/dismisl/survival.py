"""Survival statistics: Cox partial likelihood, concordance, Kaplan-Meier,
log-rank, and an L1-penalised linear Cox fit.

Risk scores are log relative hazards: larger means earlier expected death.
Times and event indicators are passed as parallel 1-D arrays.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import OptimizationError, UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def to_rows(self, group=""):
        return [
            (float(t), float(s), int(r), group)
            for t, s, r in zip(self.event_times, self.survival, self.at_risk)
        ]


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float

    def to_dict(self):
        return {"chi2": self.chi_square, "p": self.p_value}


def _check(risk, time, event):
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    if risk.ndim != 1 or risk.size == 0:
        raise ValidationError("risk scores must be a non-empty vector")
    if time.shape != risk.shape or event.shape != risk.shape:
        raise ValidationError(
            f"misaligned inputs: {risk.shape[0]} scores, {time.shape} times, {event.shape} events"
        )
    return risk, time, event


def _risk_set_logsums(risk, time):
    """log sum_{j: t_j >= t_i} exp(risk_j) for every subject i (Breslow)."""
    order = np.argsort(-time, kind="stable")
    t_desc = time[order]
    cum = np.logaddexp.accumulate(risk[order])
    # last position whose time is still >= t (ties share the whole tied block)
    last = np.searchsorted(-t_desc, -t_desc, side="right") - 1
    out = np.empty_like(risk)
    out[order] = cum[last]
    return out


def cox_nll(risk, time, event):
    """Negative log partial likelihood, summed over observed events."""
    risk, time, event = _check(risk, time, event)
    if not event.any():
        return 0.0
    logs = _risk_set_logsums(risk, time)
    return float(np.sum(logs[event] - risk[event]))


def cox_nll_grad(risk, time, event):
    """Gradient of :func:`cox_nll` with respect to each risk score."""
    risk, time, event = _check(risk, time, event)
    grad = np.zeros_like(risk)
    if not event.any():
        return grad
    logs = _risk_set_logsums(risk, time)
    # log of sum_{events e: t_e <= t_i} 1 / S_e, accumulated over ascending time
    ev_t = time[event]
    ev_terms = -logs[event]
    order = np.argsort(ev_t, kind="stable")
    ev_t = ev_t[order]
    acc = np.logaddexp.accumulate(ev_terms[order])
    pos = np.searchsorted(ev_t, time, side="right") - 1
    has = pos >= 0
    grad[has] = np.exp(risk[has] + acc[pos[has]])
    grad -= event
    return grad


def c_index(risk, time, event):
    """Harrell's concordance with half credit for tied risk scores.

    A pair (i, j) is comparable when t_i < t_j and subject i had the event.
    Memory is quadratic in the number of subjects.
    """
    risk, time, event = _check(risk, time, event)
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs")
    diff = risk[:, None] - risk[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n_pairs)


def km_estimate(time, event):
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    if time.size == 0:
        raise ValidationError("Kaplan-Meier needs at least one subject")
    uniq = np.unique(time[event])
    at_risk = np.array([(time >= t).sum() for t in uniq], dtype=np.int64)
    deaths = np.array([(event & (time == t)).sum() for t in uniq], dtype=np.int64)
    surv = np.cumprod(1.0 - deaths / np.maximum(at_risk, 1))
    return KMCurve(uniq, surv, at_risk, deaths)


def erfc(x):
    """Complementary error function, fractional error below 1.2e-7.

    Chebyshev-fitted exponential form (Numerical Recipes ``erfcc``).
    """
    z = abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    poly = -z * z - 1.26551223 + t * (1.00002368 + t * (0.37409196 + t * (0.09678418 + t * (
        -0.18628806 + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (
            -0.82215223 + t * 0.17087277))))))))
    ans = t * math.exp(poly)
    return ans if x >= 0 else 2.0 - ans


def chi2_sf_1df(chi2):
    """Upper tail of a 1-df chi-square: erfc(sqrt(chi2 / 2))."""
    if chi2 <= 0:
        return 1.0
    return min(1.0, max(0.0, erfc(math.sqrt(chi2 / 2.0))))


def logrank_test(time_a, event_a, time_b, event_b):
    time_a = np.asarray(time_a, dtype=np.float64)
    time_b = np.asarray(time_b, dtype=np.float64)
    event_a = np.asarray(event_a).astype(bool)
    event_b = np.asarray(event_b).astype(bool)
    if time_a.size == 0 or time_b.size == 0:
        raise ValidationError("both log-rank groups must be non-empty")
    if not (event_a.any() or event_b.any()):
        raise UndefinedMetricError("log-rank test needs at least one event")

    times = np.unique(np.concatenate([time_a[event_a], time_b[event_b]]))
    o_minus_e = 0.0
    var = 0.0
    for t in times:
        n_a = float((time_a >= t).sum())
        n_b = float((time_b >= t).sum())
        d_a = float((event_a & (time_a == t)).sum())
        d = d_a + float((event_b & (time_b == t)).sum())
        n = n_a + n_b
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1)
    chi2 = o_minus_e ** 2 / var if var > 0 else 0.0
    return LogRankResult(float(chi2), chi2_sf_1df(chi2))


def _soft_threshold(x, thresh):
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def fit_l1_cox(features, time, event, lam, iterations=500, tolerance=1e-7, beta0=None):
    """Proximal gradient descent on cox_nll(X beta) + lam * ||beta||_1.

    Step sizes are found by backtracking on the smooth part, so accepted steps
    never increase the objective unless the arithmetic breaks down.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ValidationError("features must be a finite 2-D matrix")
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    _check(np.zeros(X.shape[0]), time, event)

    def smooth(b):
        return cox_nll(X @ b, time, event)

    def objective(b):
        return smooth(b) + lam * np.abs(b).sum()

    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=np.float64)
    obj = objective(beta)
    step = 1.0
    increases = 0
    for _ in range(iterations):
        f = smooth(beta)
        g = X.T @ cox_nll_grad(X @ beta, time, event)
        while True:
            cand = _soft_threshold(beta - step * g, step * lam)
            diff = cand - beta
            if smooth(cand) <= f + g @ diff + diff @ diff / (2 * step) + 1e-12 or step < 1e-12:
                break
            step *= 0.5
        new_obj = objective(cand)
        if not np.isfinite(new_obj):
            raise OptimizationError("L1 Cox objective became non-finite")
        increases = increases + 1 if new_obj > obj else 0
        if increases >= 10:
            raise OptimizationError("L1 Cox objective increased for 10 consecutive steps")
        converged = abs(obj - new_obj) <= tolerance * max(abs(obj), 1.0)
        beta, obj = cand, new_obj
        step *= 2.0
        if converged:
            break
    return beta
