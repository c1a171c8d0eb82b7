"""Training-time augmentation: spectrogram masking and event dropping.

Both operate on a single (T, N) sample and only ever zero entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class AugmentConfig:
    # spectrogram masking (dense, real-valued inputs)
    n_freq_masks: int = 1
    freq_mask_size: int = 10
    n_time_masks: int = 1
    time_mask_size: float = 0.25
    # event dropping (spike-count inputs)
    drop_proportion: float = 0.5
    time_drop_size: float = 0.1
    neuron_drop_size: int = 10
    exclusive_drops: bool = False

    def __post_init__(self):
        for name in ("time_mask_size", "time_drop_size", "drop_proportion"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_freq_masks", "freq_mask_size", "n_time_masks", "neuron_drop_size"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# reference settings per dataset family
GSC_AUGMENT = AugmentConfig(n_freq_masks=1, freq_mask_size=10, n_time_masks=1, time_mask_size=0.25)
SHD_AUGMENT = AugmentConfig(drop_proportion=0.5, time_drop_size=0.2, neuron_drop_size=20)
SSC_AUGMENT = AugmentConfig(drop_proportion=0.5, time_drop_size=0.1, neuron_drop_size=10)


def _window(rng: np.random.Generator, dim: int, size: int) -> slice:
    size = min(size, dim)
    start = int(rng.integers(0, dim - size + 1))
    return slice(start, start + size)


def spec_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero ``n_freq_masks`` channel bands and ``n_time_masks`` step windows.

    Oversized masks are clamped to the full dimension.
    """
    out = np.array(x, copy=True)
    T, N = out.shape
    for _ in range(cfg.n_freq_masks):
        if cfg.freq_mask_size:
            out[:, _window(rng, N, cfg.freq_mask_size)] = 0
    width = int(np.floor(cfg.time_mask_size * T))
    for _ in range(cfg.n_time_masks):
        if width:
            out[_window(rng, T, width), :] = 0
    return out


def event_drop(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Drop-by-time and drop-by-neuron, each applied with probability ``drop_proportion``.

    With ``exclusive_drops`` at most one of the two is applied per call.
    """
    out = np.array(x, copy=True)
    T, N = out.shape
    p = cfg.drop_proportion
    if cfg.exclusive_drops:
        do_drop = rng.random() < p
        by_time = do_drop and rng.random() < 0.5
        by_neuron = do_drop and not by_time
    else:
        by_time = rng.random() < p
        by_neuron = rng.random() < p
    if by_time:
        width = int(np.floor(cfg.time_drop_size * T))
        if width:
            out[_window(rng, T, width), :] = 0
    if by_neuron and cfg.neuron_drop_size:
        chans = rng.choice(N, size=min(cfg.neuron_drop_size, N), replace=False)
        out[:, chans] = 0
    return out


def augment_batch(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, kind: str = "spike") -> np.ndarray:
    """Apply per-sample augmentation to a (B, T, N) batch."""
    fn = event_drop if kind == "spike" else spec_augment
    return np.stack([fn(s, cfg, rng) for s in x]) if len(x) else x.copy()
