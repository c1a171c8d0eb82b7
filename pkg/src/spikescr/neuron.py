"""Leaky integrate-and-fire dynamics with an arctan surrogate gradient.

Charge:  H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / tau
Fire:    S[t] = Theta(H[t] - V_th), Theta(x) = 1 iff x >= 0
Reset:   V[t] = H[t] * (1 - S[t]) + V_reset * S[t]

``lif_sequence`` is a single graph node whose backward pass is an explicit
BPTT loop; ``lif_step`` composes the same update from substrate primitives
and serves as an independent path for tests.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .compute import Tensor, custom_grad, make_node, tensor
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class NeuronConfig:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 5.0
    detach_reset: bool = True
    # Smooth forward (atan sigmoid instead of Heaviside); gradient checks only.
    soft: bool = False

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise ConfigurationError(
                f"v_threshold ({self.v_threshold}) must exceed v_reset ({self.v_reset})")
        if self.surrogate_alpha <= 0:
            raise ConfigurationError("surrogate_alpha must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MembraneState:
    """Per-neuron potentials recorded at one step (or stacked over time)."""

    h: np.ndarray
    v: np.ndarray
    s: np.ndarray


def surrogate_backward(x, alpha: float = 5.0) -> np.ndarray:
    """Derivative of the scaled-arctan sigmoid: alpha / (2 (1 + (pi alpha x / 2)^2))."""
    x = np.asarray(x)
    u = (math.pi / 2.0 * alpha) * x
    return (alpha / 2.0) / (1.0 + u * u)


def atan_sigmoid(x, alpha: float = 5.0) -> np.ndarray:
    """Smooth primitive of ``surrogate_backward``; maps to (0, 1)."""
    x = np.asarray(x)
    return np.arctan((math.pi / 2.0 * alpha) * x) / math.pi + 0.5


def _heaviside_fwd(x, alpha=5.0):
    return (x >= 0).astype(x.dtype)


def _heaviside_bwd(g, out, x, alpha=5.0):
    return g * surrogate_backward(x, alpha).astype(x.dtype)


def _soft_fwd(x, alpha=5.0):
    return atan_sigmoid(x, alpha).astype(x.dtype)


heaviside = custom_grad(_heaviside_fwd, _heaviside_bwd)
heaviside.__doc__ = "Step function forward, arctan surrogate backward."

soft_heaviside = custom_grad(_soft_fwd, _heaviside_bwd)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"input shape {a.shape} != state shape {b.shape}")


def lif_step(x_t, v_prev, cfg: NeuronConfig = NeuronConfig()) -> tuple[Tensor, Tensor]:
    """Advance one time step; returns ``(spikes, v_t)``."""
    x_t = tensor(x_t)
    v_prev = tensor(v_prev, dtype=x_t.dtype)
    _check_same_shape(x_t, v_prev)
    h = v_prev + (x_t - (v_prev - cfg.v_reset)) * (1.0 / cfg.tau)
    fire = soft_heaviside if cfg.soft else heaviside
    s = fire(h - cfg.v_threshold, alpha=cfg.surrogate_alpha)
    keep = (1.0 - s.detach()) if cfg.detach_reset else (1.0 - s)
    v = h * keep + s * cfg.v_reset
    return s, v


def lif_trace(x: np.ndarray, cfg: NeuronConfig = NeuronConfig()) -> MembraneState:
    """Forward-only simulation over axis 1 of ``x`` (B, T, ...), keeping H, V, S."""
    x = np.asarray(x, dtype=np.float64 if x.dtype == np.float64 else np.float32)
    if x.ndim < 2 or x.shape[1] < 1:
        raise DimensionError(f"expected (B, T, ...) with T >= 1, got {x.shape}")
    H, V, S = _lif_forward(x, cfg)
    return MembraneState(h=H, v=V, s=S)


def _lif_forward(x: np.ndarray, cfg: NeuronConfig):
    T = x.shape[1]
    inv_tau = np.asarray(1.0 / cfg.tau, dtype=x.dtype)
    v_reset = np.asarray(cfg.v_reset, dtype=x.dtype)
    H = np.empty_like(x)
    V = np.empty_like(x)
    S = np.empty_like(x)
    v = np.full(x[:, 0].shape, cfg.v_reset, dtype=x.dtype)
    for t in range(T):
        h = v + (x[:, t] - (v - v_reset)) * inv_tau
        if cfg.soft:
            s = atan_sigmoid(h - cfg.v_threshold, cfg.surrogate_alpha).astype(x.dtype)
        else:
            s = (h >= cfg.v_threshold).astype(x.dtype)
        v = h * (1 - s) + v_reset * s
        H[:, t], S[:, t], V[:, t] = h, s, v
    return H, V, S


def lif_sequence(x, cfg: NeuronConfig = NeuronConfig(), return_state: bool = False):
    """Run LIF neurons along axis 1 of ``x`` (B, T, ...), starting from V_reset.

    Gradients propagate through time with the surrogate derivative.
    """
    x = tensor(x)
    xd = x.data
    if xd.ndim < 2 or xd.shape[1] < 1:
        raise DimensionError(f"expected (B, T, ...) with T >= 1, got {xd.shape}")
    H, V, S = _lif_forward(xd, cfg)
    decay = 1.0 - 1.0 / cfg.tau
    inv_tau = 1.0 / cfg.tau

    def backward(g):
        T = xd.shape[1]
        gx = np.empty_like(xd)
        gv = np.zeros_like(xd[:, 0])
        SG = surrogate_backward(H - cfg.v_threshold, cfg.surrogate_alpha).astype(xd.dtype)
        keep = 1 - S
        if not cfg.detach_reset:
            keep = keep + (cfg.v_reset - H) * SG
        gs = g * SG
        for t in range(T - 1, -1, -1):
            gh = gs[:, t] + gv * keep[:, t]
            gx[:, t] = gh * inv_tau
            gv = gh * decay
        return (gx,)

    out = make_node(S, (x,), backward)
    if return_state:
        return out, MembraneState(h=H, v=V, s=S)
    return out


class LIF:
    """Spiking-neuron layer; remembers its last output for firing-rate monitors."""

    def __init__(self, cfg: NeuronConfig | None = None, name: str = "lif"):
        self.cfg = cfg or NeuronConfig()
        self.name = name
        self.last_spikes: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        out = lif_sequence(x, self.cfg)
        self.last_spikes = out.data
        return out
