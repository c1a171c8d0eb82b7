"""SpikeSCR network: spiking embedding, global-local encoder blocks, readout head.

All activations passed between sub-layers are binary spike tensors laid out
as (batch, time, channels).  Every spiking neuron integrates along the time
axis, so no parameter shape depends on the number of time steps.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from . import compute as C
from .compute import BNState, Tensor
from .errors import ConfigurationError, DimensionError, ParseError
from .neuron import LIF, NeuronConfig

RESIDUAL_STYLES = ("spike_add", "membrane_shortcut")


@dataclass
class ModelConfig:
    n_blocks: int = 1
    n_heads: int = 8
    hidden: int = 128
    input_channels: int = 140
    n_classes: int = 20
    sem_kernel: int = 3
    sgc_expansion: int = 4
    dw_kernel: int = 31
    attn_scale: float | None = None
    residual_style: str = "spike_add"
    merge_proj: bool = True
    attn_bn: bool = False
    use_rope: bool = True
    rope_base: float = 10000.0
    use_sgu: bool = True
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if isinstance(self.neuron, dict):
            self.neuron = NeuronConfig(**self.neuron)
        if self.n_blocks < 1:
            raise ConfigurationError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            raise ConfigurationError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigurationError(f"head dimension {self.head_dim} must be even for rotary pairs")
        if self.residual_style not in RESIDUAL_STYLES:
            raise ConfigurationError(f"residual_style must be one of {RESIDUAL_STYLES}")
        if self.sem_kernel < 1 or self.sem_kernel % 2 == 0:
            raise ConfigurationError("sem_kernel must be a positive odd integer (same padding)")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ConfigurationError("dw_kernel must be a positive odd integer (same padding)")
        if self.sgc_expansion < 1:
            raise ConfigurationError("sgc_expansion must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def scale(self) -> float:
        return self.attn_scale if self.attn_scale is not None else 1.0 / math.sqrt(self.head_dim)

    @property
    def tag(self) -> str:
        return f"{self.n_blocks}L-{self.n_heads}-{self.hidden}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


# -- module plumbing ------------------------------------------------------------

class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _items(self):
        for key, val in vars(self).items():
            if key.startswith("last_"):
                continue
            if isinstance(val, (Module, Tensor, BNState, LIF)):
                yield key, val
            elif isinstance(val, list):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{key}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, val in self._items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, BNState):
                yield f"{name}.weight", val.weight
                yield f"{name}.bias", val.bias
            elif isinstance(val, Module):
                yield from val.named_parameters(name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BNState, str]]:
        for key, val in self._items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, BNState):
                yield f"{name}.running_mean", val, "running_mean"
                yield f"{name}.running_var", val, "running_var"
            elif isinstance(val, Module):
                yield from val.named_buffers(name)

    def named_neurons(self, prefix: str = "") -> Iterator[tuple[str, LIF]]:
        for key, val in self._items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, LIF):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_neurons(name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, st, attr in self.named_buffers():
            out[name] = getattr(st, attr).copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (st, attr) for name, st, attr in self.named_buffers()}
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != arr.shape:
                    raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
                p.data = np.array(arr, dtype=p.dtype)
            else:
                st, attr = buffers[name]
                setattr(st, attr, np.array(arr, dtype=np.float32))

    def astype(self, dtype) -> "Module":
        """Cast parameters in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = C.parameter(_uniform(rng, (out_features, in_features), in_features))
        self.bias = C.parameter(_uniform(rng, (out_features,), in_features)) if bias else None
        self.last_input: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        self.last_input = x.data
        return C.linear(x, self.weight, self.bias)


class Conv1d(Module):
    """Temporal convolution over (B, T, C) tensors with same padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 groups: int = 1, bias: bool = False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.groups = groups
        self.padding = kernel // 2
        fan_in = in_channels // groups * kernel
        self.weight = C.parameter(_uniform(rng, (out_channels, in_channels // groups, kernel), fan_in))
        self.bias = C.parameter(_uniform(rng, (out_channels,), fan_in)) if bias else None
        self.last_input: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        self.last_input = x.data
        y = C.conv1d(x.transpose(0, 2, 1), self.weight, self.bias, padding=self.padding, groups=self.groups)
        return y.transpose(0, 2, 1)


class BatchNorm(Module):
    def __init__(self, num_features: int):
        self.bn = BNState(num_features)

    def forward(self, x: Tensor) -> Tensor:
        return C.batchnorm(x, self.bn, training=self.training, axis=-1)


class LinearBN(Module):
    """{Linear-BN}: a bias-free projection whose affine shift lives in the BN."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.linear = Linear(in_features, out_features, rng, bias=False)
        self.norm = BatchNorm(out_features)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.linear(x))

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        return C.fold_bn(self.linear.weight.data, None, self.norm.bn, channel_axis=0)


def _residual(pre: Tensor, x: Tensor, neuron: LIF, style: str) -> Tensor:
    if style == "membrane_shortcut":
        return neuron(pre + x)
    s = neuron(pre)
    # logical OR of two spike trains; stays binary
    return s + x - s * x


# -- rotary position encoding -------------------------------------------------

@dataclass(frozen=True)
class RotaryTable:
    cos: np.ndarray  # (T, d_h / 2)
    sin: np.ndarray
    base: float


@lru_cache(maxsize=64)
def _rotary_cached(t_steps: int, head_dim: int, base: float) -> RotaryTable:
    if head_dim % 2:
        raise ConfigurationError(f"rotary head dimension must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.arange(t_steps, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(theta), np.sin(theta)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return RotaryTable(cos=cos, sin=sin, base=base)


def rotary_table(t_steps: int, head_dim: int, base: float = 10000.0) -> RotaryTable:
    return _rotary_cached(int(t_steps), int(head_dim), float(base))


def rope_rotate(x, table: RotaryTable, time_axis: int = -2) -> Tensor:
    """Rotate adjacent channel pairs of ``x`` by position-dependent angles.

    The last axis holds the head dimension; ``time_axis`` indexes position.
    """
    x = C.tensor(x)
    xd = x.data
    if xd.shape[-1] % 2:
        raise DimensionError(f"rotary input last dim must be even, got {xd.shape[-1]}")
    time_axis %= xd.ndim
    T = xd.shape[time_axis]
    if table.cos.shape[0] < T:
        raise DimensionError(f"rotary table covers {table.cos.shape[0]} positions, input has {T}")
    shape = [1] * xd.ndim
    shape[time_axis] = T
    shape[-1] = xd.shape[-1] // 2
    cos = table.cos[:T].reshape(shape).astype(xd.dtype)
    sin = table.sin[:T].reshape(shape).astype(xd.dtype)
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return C.make_node(out, (x,), backward)


# -- sub-layers ---------------------------------------------------------------

class SEM(Module):
    """Spiking embedding: temporal Conv1D -> BN -> LIF, mapping N inputs to d channels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.conv = Conv1d(cfg.input_channels, cfg.hidden, cfg.sem_kernel, rng)
        self.norm = BatchNorm(cfg.hidden)
        self.lif = LIF(cfg.neuron)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.cfg.input_channels:
            raise ConfigurationError(
                f"SEM expects (B, T, {self.cfg.input_channels}) input, got {x.shape}")
        return self.lif(self.norm(self.conv(x)))


class SSA(Module):
    """Spiking self-attention with rotary positions on the spiking queries and keys."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.hidden
        self.q = LinearBN(d, d, rng)
        self.k = LinearBN(d, d, rng)
        self.v = LinearBN(d, d, rng)
        self.lif_q = LIF(cfg.neuron)
        self.lif_k = LIF(cfg.neuron)
        self.lif_v = LIF(cfg.neuron)
        self.lif_rq = LIF(cfg.neuron)
        self.lif_rk = LIF(cfg.neuron)
        self.lif_attn = LIF(cfg.neuron)
        self.attn_norm = BatchNorm(d) if cfg.attn_bn else None
        self.proj = LinearBN(d, d, rng) if cfg.merge_proj else None
        self.lif_out = LIF(cfg.neuron)
        self.last_attn_counts: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.cfg.n_heads, self.cfg.head_dim)

    def attention(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Q' K'^T V per head on (B, T, heads, d_h) spike tensors; returns pre-scale counts."""
        qh, kh, vh = (t.transpose(0, 2, 1, 3) for t in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2)
        counts = scores @ vh
        self.last_attn_counts = counts.data
        return counts.transpose(0, 2, 1, 3)

    def pre_output(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        B, T, d = x.shape
        q = self.lif_q(self.q(x))
        k = self.lif_k(self.k(x))
        v = self.lif_v(self.v(x))
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        if cfg.use_rope:
            table = rotary_table(T, cfg.head_dim, cfg.rope_base)
            qh = self.lif_rq(rope_rotate(qh, table, time_axis=1))
            kh = self.lif_rk(rope_rotate(kh, table, time_axis=1))
        counts = self.attention(qh, kh, vh).reshape(B, T, d)
        a = counts * cfg.scale
        if self.attn_norm is not None:
            a = self.attn_norm(a)
        if self.proj is None:
            return a
        return self.proj(self.lif_attn(a))

    def forward(self, x: Tensor) -> Tensor:
        return _residual(self.pre_output(x), x, self.lif_out, self.cfg.residual_style)


def sgu_forward(x1: Tensor, x2: Tensor, gate_fn) -> Tensor:
    """Gate ``x2`` elementwise by the binary output of ``gate_fn(x1)``."""
    if x1.shape != x2.shape:
        raise DimensionError(f"SGU halves differ in shape: {x1.shape} vs {x2.shape}")
    return x2 * gate_fn(x1)


class SGU(Module):
    """Spiking gated unit: x2 * SN2(W(SN1(x1)))."""

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.lif1 = LIF(cfg.neuron)
        self.w = LinearBN(channels, channels, rng)
        self.lif2 = LIF(cfg.neuron)

    def gate(self, x1: Tensor) -> Tensor:
        return self.lif2(self.w(self.lif1(x1)))

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        return sgu_forward(x1, x2, self.gate)


class SGC(Module):
    """Separable gated convolution: pointwise -> depthwise(k) -> pointwise with SGU."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.hidden
        e = cfg.sgc_expansion * d
        self.pw1 = Conv1d(d, e, 1, rng)
        self.norm1 = BatchNorm(e)
        self.lif1 = LIF(cfg.neuron)
        self.dw = Conv1d(e, e, cfg.dw_kernel, rng, groups=e)
        self.norm2 = BatchNorm(e)
        self.lif2 = LIF(cfg.neuron)
        width = 2 * d if cfg.use_sgu else d
        self.pw2 = Conv1d(e, width, 1, rng)
        self.norm3 = BatchNorm(width)
        self.sgu = SGU(d, cfg, rng) if cfg.use_sgu else None
        self.lif_out = LIF(cfg.neuron)

    def pre_output(self, x: Tensor) -> Tensor:
        if x.shape[1] < 1:
            raise DimensionError("SGC needs at least one time step")
        h = self.lif1(self.norm1(self.pw1(x)))
        h = self.lif2(self.norm2(self.dw(h)))
        h = self.norm3(self.pw2(h))
        if self.sgu is None:
            return h
        d = self.cfg.hidden
        return self.sgu(h[..., :d], h[..., d:])

    def forward(self, x: Tensor) -> Tensor:
        return _residual(self.pre_output(x), x, self.lif_out, self.cfg.residual_style)


class SGLE(Module):
    """One global (SSA) plus local (SGC) encoder block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ssa = SSA(cfg, rng)
        self.sgc = SGC(cfg, rng)
        self.last_ssa_out: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        a = self.ssa(x)
        self.last_ssa_out = a.data
        return self.sgc(a)


def head_outputs(potentials: Tensor) -> tuple[Tensor, Tensor]:
    """Per-step softmax over classes and its sum over time: (out[t], y_hat)."""
    out = C.softmax(potentials, axis=-1)
    return out, out.sum(axis=1)


class Head(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc = Linear(cfg.hidden, cfg.n_classes, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        potentials = self.fc(x)
        _, y_hat = head_outputs(potentials)
        return potentials, y_hat


class SpikeSCR(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.sem = SEM(self.cfg, rng)
        self.blocks = [SGLE(self.cfg, rng) for _ in range(self.cfg.n_blocks)]
        self.head = Head(self.cfg, rng)
        self.last_block_outputs: list[np.ndarray] = []

    def encode(self, x) -> Tensor:
        x = C.tensor(x)
        s = self.sem(x)
        self.last_block_outputs = []
        for blk in self.blocks:
            s = blk(s)
            self.last_block_outputs.append(s.data)
        return s

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Return per-step potentials (B, T, Y) and summed head output y_hat (B, Y)."""
        return self.head(self.encode(x))

    def spike_boundaries(self) -> dict[str, np.ndarray]:
        """Every recorded spike tensor of the last forward pass, by name."""
        out = {name: lif.last_spikes for name, lif in self.named_neurons() if lif.last_spikes is not None}
        for i, blk in enumerate(self.blocks):
            if blk.last_ssa_out is not None:
                out[f"blocks.{i}.ssa.output"] = blk.last_ssa_out
        for i, s in enumerate(self.last_block_outputs):
            out[f"blocks.{i}.output"] = s
        return out


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"SSCR"
CHECKPOINT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model: SpikeSCR, meta: dict | None = None) -> None:
    """Write magic, version, JSON header, then named little-endian f32 tensors."""
    header = canonical_json({"model": model.cfg.to_dict(), "meta": meta or {}}).encode("utf-8")
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ParseError(f"checkpoint truncated while reading {what}")
    return b


def load_checkpoint(path) -> tuple[SpikeSCR, dict]:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read(f, 4, "header length"))
        try:
            header = json.loads(_read(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: malformed header: {exc}") from exc
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "dims"))
            n = int(np.prod(dims)) if rank else 1
            state[name] = np.frombuffer(_read(f, 4 * n, name), dtype="<f4").reshape(dims).astype(np.float32)
        if f.read(1):
            raise ParseError(f"{path}: trailing bytes after last tensor")
    model = SpikeSCR(ModelConfig.from_dict(header["model"]))
    model.load_state_dict(state)
    return model, header.get("meta", {})
