"""Geometric-kernel neighborhood weights and the threshold-softening factor.

A masked position surrounded by already-decoded tokens gets weight from each
unmasked neighbor within a window, decaying geometrically with distance. The
weight normalized by its ceiling becomes the softening factor phi in [0, 1]
that later pulls the exit threshold down.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpatialConfig:
    gamma: float  # decay rate per unit distance
    window: int  # neighborhood radius

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class SpatialField:
    """Softening factor per generated position.

    phi[k] belongs to absolute sequence position start + k; start is the
    prompt length so policies can look up phi by the same absolute indices
    they get probability rows for.
    """

    phi: np.ndarray
    start: int = 0

    def __post_init__(self):
        if np.any(self.phi < 0) or np.any(self.phi > 1):
            raise ValueError("softening factors must lie in [0, 1]")

    def phi_at(self, position):
        return float(self.phi[position - self.start])


def w_max(cfg):
    """Largest achievable neighborhood weight: both sides fully unmasked.

    Accumulated term by term in the same order spatial_weights adds them
    (distance 1..window, left then right) so a fully surrounded position
    divides to exactly 1.0.
    """
    acc = 0.0
    g = 1.0
    for _ in range(cfg.window):
        g *= cfg.gamma
        acc += g  # left neighbor at this distance
        acc += g  # right neighbor
    return acc


def w_max_closed_form(cfg):
    """2 * gamma * (1 - gamma^D) / (1 - gamma); cross-check for w_max."""
    return 2.0 * cfg.gamma * (1.0 - cfg.gamma**cfg.window) / (1.0 - cfg.gamma)


def spatial_weights(state, cfg):
    """Per-generated-position sum of gamma^distance over unmasked neighbors.

    Prompt and finalized cells both count as unmasked contributors; positions
    beyond either end of the sequence contribute nothing. Returns a float64
    vector of length gen_len. Implemented as shifted adds (a 1-D convolution
    unrolled over distance), which the tests pin against a naive double loop.
    """
    flags = state.unmasked_flags().astype(np.float64)
    n = flags.shape[0]
    w = np.zeros(n)
    g = 1.0
    for d in range(1, cfg.window + 1):
        g *= cfg.gamma
        if d >= n:
            break
        w[d:] += g * flags[:-d]  # contribution from the left neighbor at distance d
        w[:-d] += g * flags[d:]  # and from the right
    return w[state.prompt_len :]


def softening(weights, cfg, start=0):
    """phi = min(1, w / w_max), elementwise. weights must be nonnegative."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be elementwise >= 0")
    phi = np.minimum(1.0, w / w_max(cfg))
    return SpatialField(phi=phi, start=start)


def field_for_state(state, cfg):
    """Softening field for the current mask state, addressable by absolute position."""
    return softening(spatial_weights(state, cfg), cfg, start=state.prompt_len)
