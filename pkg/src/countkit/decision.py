"""Decision functions mapping head outputs to integer counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveLambda
from .model import HeadKind, HeadOutput


@dataclass
class CountEstimate:
    k_hat: int
    head_kind: HeadKind
    raw: object


def decide_classification(probs) -> int:
    """Most probable class; ``np.argmax`` already prefers the lowest index on ties."""
    return int(np.argmax(np.asarray(probs)))


def round_half_away(y: float) -> int:
    return int(math.floor(abs(y) + 0.5)) * (1 if y >= 0 else -1)


def decide_gaussian(y: float) -> int:
    return max(round_half_away(float(y)), 0)


def choi_median(lam: float) -> float:
    """Closed-form Poisson median approximation, before flooring."""
    return lam + 1.0 / 3.0 - 0.02 / lam


def decide_poisson(lam: float) -> int:
    """Posterior median of a Poisson with rate ``lam`` (Choi's approximation)."""
    lam = float(lam)
    if not lam > 0.0:
        raise NonPositiveLambda(f"Poisson rate must be positive, got {lam}")
    return max(int(math.floor(choi_median(lam))), 0)


def decide_poisson_mode(lam: float) -> int:
    """MAP alternative, kept to compare against the median rule."""
    lam = float(lam)
    if not lam > 0.0:
        raise NonPositiveLambda(f"Poisson rate must be positive, got {lam}")
    return int(math.floor(lam))


def poisson_median_exact(lam: float, tol: float = 1e-12) -> int:
    """Smallest m with P(K <= m) >= 1/2 for K ~ Poisson(lam).

    Probabilities come from the recurrence p_{k+1} = p_k * lam / (k + 1),
    seeded at the mode in log space so large rates do not underflow.
    ``tol`` absorbs rounding at exact ties such as lam = ln 2.
    """
    lam = float(lam)
    if not lam > 0.0:
        raise NonPositiveLambda(f"Poisson rate must be positive, got {lam}")
    mode = int(math.floor(lam))
    p_mode = math.exp(-lam + mode * math.log(lam) - math.lgamma(mode + 1.0))
    upper = mode + 20 + int(12 * math.sqrt(lam))
    p = np.empty(upper + 1)
    p[mode] = p_mode
    for k in range(mode, 0, -1):
        p[k - 1] = p[k] * k / lam
    for k in range(mode, upper):
        p[k + 1] = p[k] * lam / (k + 1)
    cdf = np.cumsum(p)
    return int(np.argmax(cdf >= 0.5 - tol))


def decide(output: HeadOutput, k_max: int | None = None, poisson_rule: str = "median") -> CountEstimate:
    if output.kind == HeadKind.CLASSIFICATION:
        k_hat = decide_classification(output.probabilities)
    elif output.kind == HeadKind.GAUSSIAN:
        k_hat = decide_gaussian(output.value)
    elif poisson_rule == "mode":
        k_hat = decide_poisson_mode(output.value)
    else:
        k_hat = decide_poisson(output.value)
    return CountEstimate(k_hat, output.kind, output.value)


def decide_batch(kind: HeadKind, activations: np.ndarray, poisson_rule: str = "median") -> np.ndarray:
    """Vector of decisions for a (B, out) array of activated head outputs."""
    kind = HeadKind(kind)
    if kind == HeadKind.CLASSIFICATION:
        return np.argmax(activations, axis=1).astype(int)
    if kind == HeadKind.GAUSSIAN:
        return np.array([decide_gaussian(v) for v in activations[:, 0]], dtype=int)
    rule = decide_poisson_mode if poisson_rule == "mode" else decide_poisson
    # exp() of a very negative pre-activation can underflow to exactly 0 in float32
    lam = np.maximum(activations[:, 0].astype(np.float64), np.finfo(np.float64).tiny)
    return np.array([rule(v) for v in lam], dtype=int)
