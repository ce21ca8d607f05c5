"""Adaptive loss weighting: per-step exponential reweighting of the six loss
weights from each term's share of the total gradient magnitude.

The update is lambda_i' = beta * softmax-like(lambda_i * exp(g_i)) + (1-beta) * lambda_i,
so the weight total obeys sum' = beta + (1-beta) * sum exactly. State is kept
in float64 regardless of model precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_TERMS = 6


@dataclass
class LossWeightState:
    lambdas: np.ndarray = field(default_factory=lambda: np.ones(N_TERMS))
    beta: float = 0.5
    step: int = 0

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if self.lambdas.shape != (N_TERMS,):
            raise ValueError(f"expected {N_TERMS} weights, got {self.lambdas.shape}")
        if np.any(self.lambdas < 0):
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


def gradient_shares(norms: np.ndarray) -> np.ndarray:
    """Normalize per-loss gradient magnitudes to shares summing to 1.

    All-zero magnitudes (nothing trained this step) map to uniform shares so
    the weight update stays defined.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != (N_TERMS,):
        raise ValueError(f"expected {N_TERMS} norms, got {norms.shape}")
    if np.any(norms < 0):
        raise ValueError("gradient norms must be non-negative")
    total = norms.sum()
    if total == 0.0:
        return np.full(N_TERMS, 1.0 / N_TERMS)
    return norms / total


def update_weights(state: LossWeightState, g: np.ndarray) -> LossWeightState:
    """One reweighting step; shares `g` must sum to 1."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (N_TERMS,):
        raise ValueError(f"expected {N_TERMS} shares, got {g.shape}")
    if abs(g.sum() - 1.0) > 1e-6:
        raise ValueError(f"shares sum to {g.sum()!r}, expected 1")
    lam = state.lambdas
    scaled = lam * np.exp(g)
    mixed = state.beta * (scaled / scaled.sum()) + (1.0 - state.beta) * lam
    return LossWeightState(lambdas=mixed, beta=state.beta, step=state.step + 1)
