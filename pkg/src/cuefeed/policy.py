"""When each feedback loss fires and how timesteps are drawn.

Detectors only produce sane signals on reconstructions that already
look like images, which happens at low noise levels. Each feedback loss
therefore gets a closed timestep interval (a gate) outside of which it
is skipped entirely. Training draws timesteps from a piecewise-uniform
distribution that oversamples the low-noise half so gated losses see
enough traffic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

LOSS_NAMES = ("denoise", "reg", "boundary", "id", "gaze", "pose", "interaction")
FEEDBACK_LOSSES = ("reg", "boundary", "id", "gaze", "pose", "interaction")


@dataclass(frozen=True)
class TimestepGate:
    """Closed interval [t_min, t_max] of active timesteps.

    The sentinel (-1, -1) is the empty gate: never active. Useful for
    ablations that remove a loss without touching its weight.
    """

    t_min: int
    t_max: int

    def __post_init__(self):
        if (self.t_min, self.t_max) == (-1, -1):
            return
        if not (0 <= self.t_min <= self.t_max):
            raise ValueError(
                f"gate bounds must satisfy 0 <= t_min <= t_max "
                f"(or (-1, -1) for never), got ({self.t_min}, {self.t_max})"
            )

    def active(self, t: int) -> bool:
        if (self.t_min, self.t_max) == (-1, -1):
            return False
        return self.t_min <= int(t) <= self.t_max


NEVER_GATE = TimestepGate(-1, -1)


def default_gates(num_steps: int = 1000) -> dict[str, TimestepGate]:
    """Per-loss active intervals; losses without detector input run everywhere.

    The gated intervals follow the reliability ordering of the cues: a
    gaze point degrades first as noise grows, body keypoints survive
    longest. Interaction labels keep a wide gate because the detector's
    own validity mask already suppresses them on degenerate inputs.
    """
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    everywhere = TimestepGate(0, num_steps - 1)
    gates = {
        "denoise": everywhere,
        "reg": everywhere,
        "boundary": everywhere,
        "gaze": TimestepGate(0, 200),
        "id": TimestepGate(0, 400),
        "interaction": TimestepGate(0, 500),
        "pose": TimestepGate(0, 700),
    }
    for name, g in gates.items():
        if g.t_max > num_steps - 1:
            gates[name] = TimestepGate(g.t_min, num_steps - 1)
    return gates


def gate_active(gates: Mapping[str, TimestepGate], loss_name: str, t: int) -> bool:
    if loss_name not in gates:
        raise KeyError(f"unknown loss name {loss_name!r}; have {sorted(gates)}")
    return gates[loss_name].active(t)


@dataclass(frozen=True)
class SamplerSpec:
    """Piecewise-uniform distribution over integer timesteps.

    ``edges`` are ascending segment boundaries starting at 0 and ending
    at num_steps; segment i covers [edges[i], edges[i+1]) and carries
    relative per-timestep weight ``weights[i]``.
    """

    edges: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) < 2 or len(self.weights) != len(self.edges) - 1:
            raise ValueError("need len(edges) >= 2 and len(weights) == len(edges) - 1")
        if self.edges[0] != 0:
            raise ValueError("first edge must be 0")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"edges must be strictly ascending, got {self.edges}")
        if any(w <= 0 or not np.isfinite(w) for w in self.weights):
            raise ValueError(f"segment weights must be positive finite, got {self.weights}")

    @property
    def num_steps(self) -> int:
        return self.edges[-1]

    def segment_probs(self) -> np.ndarray:
        lengths = np.diff(np.asarray(self.edges, dtype=np.float64))
        mass = np.asarray(self.weights, dtype=np.float64) * lengths
        return mass / mass.sum()

    def probability(self, t: int) -> float:
        """P(T = t) under the sampler."""
        if not 0 <= t < self.num_steps:
            return 0.0
        lengths = np.diff(np.asarray(self.edges, dtype=np.float64))
        total = float((np.asarray(self.weights) * lengths).sum())
        for i in range(len(self.weights)):
            if self.edges[i] <= t < self.edges[i + 1]:
                return self.weights[i] / total
        return 0.0


def default_sampler(num_steps: int = 1000) -> SamplerSpec:
    """Low-noise half drawn twice as often as the high-noise half."""
    if num_steps < 2 or num_steps % 2 != 0:
        raise ValueError("default sampler expects an even num_steps >= 2")
    return SamplerSpec(edges=(0, num_steps // 2, num_steps), weights=(2.0, 1.0))


def sample_timestep(spec: SamplerSpec, rng: np.random.Generator) -> int:
    """Draw one timestep; the caller owns the generator (determinism)."""
    probs = spec.segment_probs()
    u = rng.random()
    acc = 0.0
    seg = len(probs) - 1
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            seg = i
            break
    return int(rng.integers(spec.edges[seg], spec.edges[seg + 1]))


@dataclass(frozen=True)
class LossWeightCurve:
    """Timestep-dependent weight for one loss, linear between grid points."""

    t_grid: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.t_grid) != len(self.values) or len(self.t_grid) < 1:
            raise ValueError("t_grid and values must be equal-length and non-empty")
        if any(b <= a for a, b in zip(self.t_grid, self.t_grid[1:])):
            raise ValueError("t_grid must be strictly ascending")
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise ValueError("curve values must be finite and >= 0")

    def at(self, t: int) -> float:
        return float(np.interp(float(t), self.t_grid, self.values))


def inverse_timestep_weights(
    curves: Mapping[str, np.ndarray],
    t_grid,
    base_weight: float,
    floor: float = 1e-3,
) -> dict[str, LossWeightCurve]:
    """Reweight each loss inversely to its average magnitude over t.

    Given per-loss mean-loss curves sampled on ``t_grid``, returns
    weight(t) = base * min(curve) / curve(t) with curve values floored
    at ``floor`` before inversion, so near-zero segments cannot blow
    the weight up. The minimum-magnitude timestep keeps the base
    weight; everything else gets less.
    """
    if base_weight < 0 or floor <= 0:
        raise ValueError("need base_weight >= 0 and floor > 0")
    grid = tuple(int(t) for t in t_grid)
    out = {}
    for name, raw in curves.items():
        arr = np.asarray(raw, dtype=np.float64)
        if arr.shape != (len(grid),):
            raise ValueError(
                f"curve {name!r} has shape {arr.shape}, expected ({len(grid)},)"
            )
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise ValueError(f"curve {name!r} must be finite and >= 0")
        clamped = np.maximum(arr, floor)
        weights = base_weight * clamped.min() / clamped
        out[name] = LossWeightCurve(t_grid=grid, values=tuple(float(w) for w in weights))
    return out


@dataclass(frozen=True)
class FeedbackPolicy:
    """Weights plus gates for the six feedback losses.

    ``weights`` holds the scalar weight per loss; an entry in
    ``weight_curves`` overrides it with a timestep-dependent curve.
    The denoising term is always weighted 1 and never gated here (its
    gate in ``default_gates`` spans the whole range).
    """

    weights: dict[str, float]
    gates: dict[str, TimestepGate]
    weight_curves: dict[str, LossWeightCurve] = field(default_factory=dict)

    def __post_init__(self):
        for name in FEEDBACK_LOSSES:
            if name not in self.weights:
                raise ValueError(f"missing weight for loss {name!r}")
            if name not in self.gates:
                raise ValueError(f"missing gate for loss {name!r}")
        for name, w in self.weights.items():
            if name not in LOSS_NAMES:
                raise ValueError(f"unknown loss name {name!r}")
            if w < 0 or not np.isfinite(w):
                raise ValueError(f"weight for {name!r} must be finite and >= 0")
        for name in self.weight_curves:
            if name not in FEEDBACK_LOSSES:
                raise ValueError(f"weight curve for unknown loss {name!r}")

    @classmethod
    def default(cls, num_steps: int = 1000, weight: float = 0.01) -> "FeedbackPolicy":
        """All feedback losses share one scalar weight (0.01 everywhere)."""
        return cls(
            weights={name: weight for name in FEEDBACK_LOSSES},
            gates=default_gates(num_steps),
        )

    def effective_weight(self, name: str, t: int) -> float:
        if name in self.weight_curves:
            return self.weight_curves[name].at(t)
        return self.weights[name]

    def active(self, name: str, t: int) -> bool:
        return gate_active(self.gates, name, t)
