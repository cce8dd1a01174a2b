"""Clipping, Gaussian noise, and a Renyi-DP accountant for subsampled Gaussians.

Noise placement is either local (each client adds noise after clipping, before
upload) or global (the server adds noise once to the aggregated sum before the
division by the contributor count).  The accountant tracks one composition
step per aggregation event and converts the Renyi ledger to an (epsilon,
delta) guarantee by optimizing over a grid of orders.

Integer orders use the exact binomial expansion of the sampled-Gaussian Renyi
divergence; fractional orders use the erfc-based series for the same quantity.
At q = 1 both collapse to the pure Gaussian value alpha / (2 sigma^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .codec import as_model_vector
from .errors import FlorinetError

# integers 2..64 plus halves 1.5..9.5: brackets typical optima
DEFAULT_ALPHA_GRID: tuple[float, ...] = tuple(
    sorted(set([x / 2 for x in range(3, 20)] + list(range(2, 65))))
)

DP_MODES = ("off", "local", "global")


@dataclass(frozen=True)
class DpConfig:
    """Per-task differential privacy settings."""

    mode: str = "off"
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    delta: float = 1e-5
    population: int | None = None  # estimated client pool; sets sampling rate q

    def __post_init__(self):
        if self.mode not in DP_MODES:
            raise FlorinetError(f"dp.mode must be one of {DP_MODES}", code="invalid_spec")
        if self.mode != "off":
            if not (self.clip_norm > 0):
                raise FlorinetError("dp.clip_norm must be positive", code="invalid_spec")
            if self.noise_multiplier < 0:
                raise FlorinetError("dp.noise_multiplier must be non-negative", code="invalid_spec")
            if not (0 < self.delta < 1):
                raise FlorinetError("dp.delta must be in (0, 1)", code="invalid_spec")
        if self.population is not None and self.population < 1:
            raise FlorinetError("dp.population must be >= 1", code="invalid_spec")

    @property
    def noise_std(self) -> float:
        """Noise standard deviation: multiplier times clipping norm."""
        return self.noise_multiplier * self.clip_norm

    def sampling_rate(self, cohort: int) -> float:
        if self.population is None:
            return 1.0
        return min(1.0, cohort / self.population)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "clip_norm": self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "delta": self.delta,
        }
        if self.population is not None:
            d["population"] = self.population
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DpConfig":
        return cls(
            mode=d.get("mode", "off"),
            clip_norm=float(d.get("clip_norm", 1.0)),
            noise_multiplier=float(d.get("noise_multiplier", 0.0)),
            delta=float(d.get("delta", 1e-5)),
            population=int(d["population"]) if d.get("population") is not None else None,
        )


def clip(v, clip_norm: float) -> np.ndarray:
    """Scale ``v`` down to L2 norm ``clip_norm`` if it exceeds it."""
    if clip_norm <= 0:
        raise FlorinetError("clip_norm must be positive")
    v = as_model_vector(v)
    norm = float(np.linalg.norm(v))
    if norm <= clip_norm:
        return v.copy()
    return v * (clip_norm / norm)


def add_gaussian_noise(v, std: float, rng: np.random.Generator) -> np.ndarray:
    """Add isotropic N(0, std^2) noise; std = 0 is the identity."""
    if std < 0:
        raise FlorinetError("std must be non-negative")
    v = as_model_vector(v)
    if std == 0:
        return v.copy()
    return v + rng.normal(0.0, std, size=v.shape)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Renyi divergence of order ``alpha`` for one sampled-Gaussian step.

    Integer alpha >= 2 evaluates the binomial sum

        (1/(alpha-1)) * ln( sum_k C(alpha,k) (1-q)^(alpha-k) q^k e^{k(k-1)/(2 sigma^2)} )

    via log-sum-exp; fractional alpha > 1 uses the erfc series for the same
    integral.  q = 0 contributes nothing; sigma = 0 is infinitely revealing.
    """
    if not 0 <= q <= 1:
        raise FlorinetError("q must be in [0, 1]")
    if alpha <= 1:
        raise FlorinetError("alpha must exceed 1")
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        return _rdp_int(q, sigma, int(alpha))
    return _rdp_frac(q, sigma, float(alpha))


def _rdp_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(k + 1)
        - special.gammaln(alpha - k + 1)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + k * (k - 1) / (2 * sigma**2)
    )
    return float(special.logsumexp(log_terms)) / (alpha - 1)


def _log_erfc(x: float) -> float:
    return math.log(2.0) + special.log_ndtr(-x * 2**0.5)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if b > a:
        raise FlorinetError("log_sub of negative quantity")
    return a + math.log1p(-math.exp(b - a))


def _rdp_frac(q: float, sigma: float, alpha: float) -> float:
    # Series split at z0, the point where the two mixture densities cross.
    log_a0 = log_a1 = -math.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        if coef == 0:  # integral alpha: the series terminates
            break
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30:
            break
    return _log_add(log_a0, log_a1) / (alpha - 1)


@dataclass
class AccountantState:
    """Per-task RDP ledger: one step per aggregation event."""

    sampling_rate: float
    sigma: float
    delta: float
    steps: int = 0
    alpha_grid: tuple[float, ...] = field(default=DEFAULT_ALPHA_GRID)

    def __post_init__(self):
        if not 0 < self.sampling_rate <= 1:
            raise FlorinetError("sampling_rate must be in (0, 1]")
        if not 0 < self.delta < 1:
            raise FlorinetError("delta must be in (0, 1)")
        if self.steps < 0:
            raise FlorinetError("steps must be non-negative")

    def step(self, n: int = 1) -> None:
        self.steps += n

    def to_dict(self) -> dict:
        return {
            "sampling_rate": self.sampling_rate,
            "sigma": self.sigma,
            "delta": self.delta,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccountantState":
        return cls(
            sampling_rate=float(d["sampling_rate"]),
            sigma=float(d["sigma"]),
            delta=float(d["delta"]),
            steps=int(d["steps"]),
        )


def epsilon(state: AccountantState) -> tuple[float, float]:
    """Best (epsilon, alpha) over the grid for the composed ledger."""
    if not state.alpha_grid:
        raise FlorinetError("empty alpha grid")
    best_eps = math.inf
    best_alpha = state.alpha_grid[0]
    for alpha in state.alpha_grid:
        if state.steps == 0:
            rdp = 0.0
        elif state.sigma == 0:
            return math.inf, alpha
        else:
            rdp = state.steps * rdp_subsampled_gaussian(state.sampling_rate, state.sigma, alpha)
        eps = rdp + math.log(1 / state.delta) / (alpha - 1)
        if eps < best_eps:
            best_eps, best_alpha = eps, alpha
    return best_eps, best_alpha
