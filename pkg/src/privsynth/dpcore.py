"""Gradient clipping, noisy aggregation and Gaussian histogram release."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SanitizeError(ValueError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    clip_norm: float

    def __post_init__(self):
        if not self.clip_norm > 0.0:
            raise SanitizeError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class NoiseSource:
    """Reproducible Gaussian stream keyed by ``(seed, stream)``.

    Backed by the counter-based Philox generator. A source is meant for a
    single consumer; use :meth:`spawn` to hand independent streams to
    different stages.
    """

    seed: int
    stream: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.stream < 0:
            raise SanitizeError("stream id must be nonnegative")
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(self.stream),))
        self.rng = np.random.Generator(np.random.Philox(ss))

    def normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def spawn(self, stream: int) -> "NoiseSource":
        """Independent source derived from this seed; ``stream`` picks the child."""
        return NoiseSource(self.seed, self.stream * 1_000_003 + stream + 1)


def clip_vector(g: np.ndarray, cfg: ClipConfig) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise SanitizeError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(g))
    if norm <= cfg.clip_norm:
        return g.copy()
    out = g * (cfg.clip_norm / norm)
    # rounding can leave the product a few ulps above C
    while _norms(out[None])[0] > cfg.clip_norm:
        out = out * (1.0 - 2.0**-52)
    return out


def clip_rows(grads: np.ndarray, cfg: ClipConfig) -> np.ndarray:
    """Row-wise :func:`clip_vector` on a ``(b, p)`` matrix."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise SanitizeError("gradient contains non-finite entries")
    norms = np.linalg.norm(grads, axis=1)
    over = norms > cfg.clip_norm
    out = grads.copy()
    if np.any(over):
        out[over] *= (cfg.clip_norm / norms[over])[:, None]
        for i in np.flatnonzero(over):
            while _norms(out[i : i + 1])[0] > cfg.clip_norm:
                out[i] *= 1.0 - 2.0**-52
    return out


def _norms(rows: np.ndarray) -> np.ndarray:
    """Row norms, taking the larger of the vector and the axis-wise evaluation.

    The two round differently in the last ulp; clipping must hold under both.
    """
    per_row = np.array([np.linalg.norm(r) for r in rows])
    return np.maximum(per_row, np.linalg.norm(rows, axis=1))


def sanitize_batch(
    per_example: Sequence[np.ndarray] | np.ndarray,
    cfg: ClipConfig,
    sigma1: float,
    noise: NoiseSource | None,
    denominator: float | None = None,
    dim: int | None = None,
) -> np.ndarray:
    """Clip each example, average, then add ``N(0, (sigma1 C / b)^2 I)``.

    ``denominator`` overrides ``b``. Under Poisson sampling pass the expected
    batch size so the sensitivity stays ``C / b`` whatever the realised size;
    an empty realised batch then yields pure noise (``dim`` gives its length).
    """
    if sigma1 < 0:
        raise SanitizeError("sigma1 must be nonnegative")
    if isinstance(per_example, np.ndarray):
        grads = np.atleast_2d(per_example) if per_example.size else per_example.reshape(0, dim or 0)
    else:
        rows = [np.asarray(g, dtype=np.float64).reshape(-1) for g in per_example]
        if rows and len({r.size for r in rows}) != 1:
            raise SanitizeError("per-example gradients differ in length")
        grads = np.stack(rows) if rows else np.zeros((0, dim or 0))
    b = grads.shape[0]
    if b == 0 and denominator is None:
        raise SanitizeError("empty batch")
    denom = float(b if denominator is None else denominator)
    if not denom > 0:
        raise SanitizeError("denominator must be positive")
    p = grads.shape[1] if b else int(dim or 0)
    total = clip_rows(grads, cfg).sum(axis=0) if b else np.zeros(p)
    out = total / denom
    if sigma1 > 0:
        if noise is None:
            raise SanitizeError("a NoiseSource is required when sigma1 > 0")
        out = out + (sigma1 * cfg.clip_norm / denom) * noise.normal(p)
    return out


def perturb_histogram(
    sd: np.ndarray,
    k1: int,
    sigma2: float,
    noise: NoiseSource | None,
    allow_zero: bool = False,
) -> np.ndarray:
    """Add i.i.d. ``N(0, k1 * sigma2^2)`` to every bin of a count vector.

    The noise scale ``sqrt(k1) * sigma2`` matches the histogram's L2
    sensitivity of ``sqrt(k1)``. ``sigma2 = 0`` is accepted only with
    ``allow_zero`` (test mode) and returns an unperturbed copy.
    """
    sd = np.asarray(sd, dtype=np.float64)
    if np.any(sd < 0) or not np.all(np.isfinite(sd)):
        raise SanitizeError("histogram entries must be finite and nonnegative")
    if int(k1) != k1 or k1 < 1:
        raise SanitizeError(f"k1 must be a positive integer, got {k1}")
    if sigma2 == 0 and allow_zero:
        return sd.copy()
    if not sigma2 > 0:
        raise SanitizeError(f"sigma2 must be positive, got {sigma2}")
    if noise is None:
        raise SanitizeError("a NoiseSource is required")
    return sd + np.sqrt(k1) * sigma2 * noise.normal(sd.shape)
