"""Rényi-DP accounting for subsampled Gaussian mechanisms.

All divergence bounds assume unit L2 sensitivity; callers fold the true
sensitivity into ``sigma``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_ORDERS: tuple[float, ...] = (1.5,) + tuple(float(a) for a in range(2, 65))


class PrivacyError(ValueError):
    """Invalid accounting request."""


class InfeasibleBudgetError(PrivacyError):
    """No noise multiplier can meet the requested budget."""


class BudgetExceededError(PrivacyError):
    """A charge would push the ledger past its target epsilon."""


@dataclass(frozen=True)
class SgmParams:
    q: float
    sigma: float
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise PrivacyError(f"sampling rate must lie in (0, 1], got {self.q}")
        if not self.sigma > 0.0:
            raise PrivacyError(f"sigma must be positive, got {self.sigma}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise PrivacyError(f"steps must be a nonnegative integer, got {self.steps}")


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0.0:
            raise PrivacyError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True, eq=False)
class RdpCurve:
    """Divergence bounds ``gammas[i]`` at Rényi orders ``orders[i]``."""

    orders: tuple[float, ...]
    gammas: np.ndarray

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        gammas = np.asarray(self.gammas, dtype=np.float64).reshape(-1)
        if len(orders) == 0 or len(orders) != len(gammas):
            raise PrivacyError("orders and gammas must be nonempty and of equal length")
        if any(a <= 1.0 for a in orders):
            raise PrivacyError("every Rényi order must exceed 1")
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise PrivacyError("orders must be strictly increasing")
        if np.any(np.isnan(gammas)) or np.any(gammas < 0.0):
            raise PrivacyError("gammas must be nonnegative")
        gammas.setflags(write=False)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "gammas", gammas)

    @classmethod
    def zeros(cls, orders: Sequence[float] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), np.zeros(len(orders)))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if not isinstance(other, RdpCurve):
            return NotImplemented
        if self.orders != other.orders:
            raise PrivacyError("cannot add RDP curves over different order grids")
        return RdpCurve(self.orders, self.gammas + other.gammas)

    def scale(self, times: int) -> "RdpCurve":
        return RdpCurve(self.orders, self.gammas * times)

    def __eq__(self, other):
        if not isinstance(other, RdpCurve):
            return NotImplemented
        return self.orders == other.orders and np.array_equal(self.gammas, other.gammas)

    def __len__(self):
        return len(self.orders)


def _check_order(alpha: float) -> None:
    if not (math.isfinite(alpha) and alpha > 1.0):
        raise PrivacyError(f"Rényi order must be finite and > 1, got {alpha}")


def _log_binom(n: int, k: np.ndarray) -> np.ndarray:
    lg = np.vectorize(math.lgamma, otypes=[float])
    return math.lgamma(n + 1) - lg(k + 1) - lg(n - k + 1)


def _rdp_sgm_int(alpha: int, q: float, sigma: float) -> float:
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    # The binomial weights sum to one, so log A = log1p(sum_k w_k expm1(k(k-1)/2s^2)).
    # Every term of that sum is nonnegative: no cancellation when A is close to 1.
    k = np.arange(2, alpha + 1)
    exponent = k * (k - 1) / (2.0 * sigma**2)
    log_terms = (
        _log_binom(alpha, k)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + _log_expm1(exponent)
    )
    log_excess = float(np.logaddexp.reduce(log_terms))
    log_a = float(np.logaddexp(0.0, log_excess))
    return log_a / (alpha - 1)


def _log_expm1(x: np.ndarray) -> np.ndarray:
    # log(e^x - 1), stable for tiny and huge x
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = x > 30.0
    out[big] = x[big] + np.log1p(-np.exp(-x[big]))
    out[~big] = np.log(np.expm1(x[~big]))
    return out


def rdp_sgm(alpha: float, params: SgmParams) -> float:
    """Rényi divergence bound of one subsampled Gaussian mechanism invocation.

    Evaluates ``D_alpha((1-q) N(0, s^2) + q N(1, s^2) || N(0, s^2))`` via the
    binomial expansion, which is exact for integer orders. A fractional order
    is bounded by the next integer above it (Rényi divergence is nondecreasing
    in the order). ``params.steps`` is ignored here; use :func:`sgm_curve` to
    compose several steps.
    """
    _check_order(alpha)
    int_alpha = int(math.ceil(alpha))
    return _rdp_sgm_int(int_alpha, float(params.q), float(params.sigma))


def rdp_gaussian_query(alpha: float, sigma2: float) -> float:
    """Cost of one unit-sensitivity Gaussian release with noise ``sigma2``."""
    _check_order(alpha)
    if math.isinf(sigma2) and sigma2 > 0:
        return 0.0
    if not sigma2 > 0.0:
        raise PrivacyError(f"sigma2 must be positive, got {sigma2}")
    return alpha / (2.0 * sigma2**2)


def sgm_curve(params: SgmParams, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    gammas = [params.steps * rdp_sgm(a, params) for a in orders]
    return RdpCurve(tuple(orders), np.array(gammas))


def gaussian_query_curve(sigma2: float, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    return RdpCurve(tuple(orders), np.array([rdp_gaussian_query(a, sigma2) for a in orders]))


def compose_rdp(curves: Iterable[RdpCurve], orders: Sequence[float] | None = None) -> RdpCurve:
    """Sum RDP curves pointwise. ``orders`` fixes the grid for an empty input."""
    curves = list(curves)
    if not curves:
        return RdpCurve.zeros(DEFAULT_ORDERS if orders is None else orders)
    grid = curves[0].orders if orders is None else tuple(float(a) for a in orders)
    total = np.zeros(len(grid))
    for c in curves:
        if c.orders != grid:
            raise PrivacyError("all curves must share one order grid")
        total = total + c.gammas
    return RdpCurve(grid, total)


def rdp_to_dp(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an RDP curve to ``(epsilon, best_order)`` at the given delta."""
    if not 0.0 < delta < 1.0:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(curve.orders)
    eps = curve.gammas + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return max(float(eps[i]), 0.0), float(orders[i])


def total_epsilon(
    sigma1: float,
    steps: int,
    q: float,
    sigma2: float,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Epsilon of ``steps`` DP-SGD iterations plus one semantic-distribution query."""
    curves = [gaussian_query_curve(sigma2, orders)]
    if steps > 0:
        curves.append(sgm_curve(SgmParams(q, sigma1, steps), orders))
    return rdp_to_dp(compose_rdp(curves, orders), delta)


def calibrate_sigma1(
    budget: PrivacyBudget,
    steps: int,
    q: float,
    sigma2: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
    bracket: tuple[float, float] = (0.3, 100.0),
    rtol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """Smallest fine-tuning noise multiplier that keeps the run within ``budget``.

    Epsilon decreases monotonically in ``sigma1``, so a bracketed bisection
    converges to the root of ``epsilon(sigma1) = target``. The returned value is
    always the upper end of the final bracket, hence feasible.
    """
    if int(steps) != steps or steps < 1:
        raise PrivacyError(f"steps must be a positive integer, got {steps}")
    SgmParams(q, 1.0)  # validates q
    target = budget.epsilon
    query_only, _ = rdp_to_dp(gaussian_query_curve(sigma2, orders), budget.delta)
    if query_only >= target:
        raise InfeasibleBudgetError(
            f"semantic query alone costs eps={query_only:.4g} >= target {target:.4g}"
        )

    def eps(sigma1: float) -> float:
        return total_epsilon(sigma1, steps, q, sigma2, budget.delta, orders)[0]

    lo, hi = bracket
    n = 0
    while eps(hi) > target:
        hi *= 2.0
        n += 1
        if n > 60:
            raise InfeasibleBudgetError("no sigma1 meets the budget")
    while eps(lo) <= target and lo > 1e-6:
        lo /= 2.0
    tol = rtol * target
    for _ in range(max_iter):
        e_hi = eps(hi)
        if target - e_hi <= tol:
            return hi
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if eps(mid) > target:
            lo = mid
        else:
            hi = mid
    if target - eps(hi) <= tol:
        return hi
    raise PrivacyError("sigma1 calibration did not converge")


@dataclass(frozen=True)
class Charge:
    mechanism: str  # "sgm" or "gaussian_query"
    sigma: float
    q: float = 1.0
    stage: str = ""

    def curve(self, orders: Sequence[float]) -> RdpCurve:
        if self.mechanism == "sgm":
            return sgm_curve(SgmParams(self.q, self.sigma, 1), orders)
        if self.mechanism == "gaussian_query":
            return gaussian_query_curve(self.sigma, orders)
        raise PrivacyError(f"unknown mechanism {self.mechanism!r}")


@dataclass
class BudgetLedger:
    """Append-only record of every RDP charge made against one sensitive dataset.

    When ``target`` is set, a charge that would push the projected epsilon past
    ``target.epsilon`` raises :class:`BudgetExceededError` and is not recorded.
    """

    delta: float = 1e-5
    target: PrivacyBudget | None = None
    orders: tuple[float, ...] = DEFAULT_ORDERS
    charges: list[Charge] = field(default_factory=list)

    def __post_init__(self):
        if self.target is not None:
            self.delta = self.target.delta
        self._total = compose_rdp([], self.orders)
        self._cache: dict[Charge, RdpCurve] = {}
        for c in self.charges:
            self._total = self._total + self._curve(c)

    def _curve(self, charge: Charge) -> RdpCurve:
        key = Charge(charge.mechanism, charge.sigma, charge.q)
        if key not in self._cache:
            self._cache[key] = charge.curve(self.orders)
        return self._cache[key]

    @property
    def curve(self) -> RdpCurve:
        return self._total

    def epsilon(self) -> float:
        if not self.charges:
            return 0.0
        return rdp_to_dp(self._total, self.delta)[0]

    def best_order(self) -> float:
        return rdp_to_dp(self._total, self.delta)[1]

    def projected(self, extra: Sequence[Charge]) -> float:
        total = self._total
        counts: dict[Charge, int] = {}
        for c in extra:
            key = Charge(c.mechanism, c.sigma, c.q)
            counts[key] = counts.get(key, 0) + 1
        for key, n in counts.items():
            total = total + self._curve(key).scale(n)
        return rdp_to_dp(total, self.delta)[0]

    def check(self, extra: Sequence[Charge]) -> None:
        if self.target is None:
            return
        eps = self.projected(extra)
        if eps > self.target.epsilon:
            raise BudgetExceededError(
                f"projected eps={eps:.6g} exceeds target {self.target.epsilon:.6g}"
            )

    def append(self, charge: Charge) -> None:
        curve = self._curve(charge)
        new_total = self._total + curve
        if self.target is not None:
            eps = rdp_to_dp(new_total, self.delta)[0]
            if eps > self.target.epsilon:
                raise BudgetExceededError(
                    f"charge {charge.mechanism} would raise eps to {eps:.6g} "
                    f"> target {self.target.epsilon:.6g}"
                )
        self.charges.append(charge)
        self._total = new_total

    def charge_sgm(self, q: float, sigma: float, stage: str = "finetune") -> None:
        self.append(Charge("sgm", float(sigma), float(q), stage))

    def charge_gaussian_query(self, sigma2: float, stage: str = "query-sd") -> None:
        self.append(Charge("gaussian_query", float(sigma2), 1.0, stage))

    def count(self, mechanism: str | None = None) -> int:
        return sum(1 for c in self.charges if mechanism is None or c.mechanism == mechanism)

    def to_json(self) -> str:
        payload = {
            "delta": self.delta,
            "target_epsilon": None if self.target is None else self.target.epsilon,
            "orders": list(self.orders),
            "charges": [
                {"mechanism": c.mechanism, "sigma": c.sigma, "q": c.q, "stage": c.stage}
                for c in self.charges
            ],
            "epsilon": self.epsilon(),
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BudgetLedger":
        payload = json.loads(text)
        target = None
        if payload.get("target_epsilon") is not None:
            target = PrivacyBudget(payload["target_epsilon"], payload["delta"])
        ledger = cls(delta=payload["delta"], target=None, orders=tuple(payload["orders"]))
        for c in payload["charges"]:
            ledger.append(Charge(c["mechanism"], c["sigma"], c["q"], c.get("stage", "")))
        ledger.target = target
        return ledger
