"""Independent oracles shared by the test suite.

None of these reuse the code under test beyond the tensor substrate: the
attention and rebinning oracles are written with plain Python loops.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import compute as C
from .compute import Tensor


@dataclass
class OracleReport:
    name: str
    max_abs: float
    max_rel: float
    tolerance: float
    passed: bool
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def append_report(path, report: OracleReport) -> None:
    with open(Path(path), "a", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")


def fd_gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                      tol: float = 1e-3, *, n_samples: int | None = None, seed: int = 0,
                      name: str = "fd_check") -> OracleReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``params`` should hold float64 data.  With ``n_samples`` only that many
    randomly chosen coordinates (over all parameters) are probed.  The
    relative deviation is ``max|analytic - numeric| / max|numeric|``.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64) for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    a_vals, n_vals = [], []
    with C.no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(np.asarray(fn().data, dtype=np.float64))
            flat[j] = orig - h
            fm = float(np.asarray(fn().data, dtype=np.float64))
            flat[j] = orig
            n_vals.append((fp - fm) / (2 * h))
            a_vals.append(float(analytic[i].reshape(-1)[j]))
    a = np.array(a_vals)
    n = np.array(n_vals)
    max_abs = float(np.max(np.abs(a - n))) if len(a) else 0.0
    scale = float(np.max(np.abs(n))) if len(n) else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    return OracleReport(name, max_abs, max_rel, tol, max_rel < tol, seed)


@dataclass
class SweepResult:
    rows: list[dict]
    wins: int
    losses: int
    ties: int
    mean_a: float
    mean_b: float
    mean_gap: float
    worst_gap: float


def seed_sweep_compare(run_a: Callable[[int], float], run_b: Callable[[int], float],
                       seeds: int | Sequence[int]) -> SweepResult:
    """Paired comparison: ``run_a(seed)`` against ``run_b(seed)`` per seed."""
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    rows = []
    for s in seed_list:
        a, b = float(run_a(s)), float(run_b(s))
        rows.append({"seed": s, "a": a, "b": b, "gap": a - b})
    gaps = np.array([r["gap"] for r in rows]) if rows else np.zeros(0)
    return SweepResult(
        rows=rows,
        wins=int((gaps > 0).sum()),
        losses=int((gaps < 0).sum()),
        ties=int((gaps == 0).sum()),
        mean_a=float(np.mean([r["a"] for r in rows])) if rows else float("nan"),
        mean_b=float(np.mean([r["b"] for r in rows])) if rows else float("nan"),
        mean_gap=float(gaps.mean()) if rows else 0.0,
        worst_gap=float(gaps.min()) if rows else 0.0,
    )


def attention_counts_oracle(q, k, v) -> np.ndarray:
    """Q K^T V for one head by explicit triple summation, (T, d) inputs."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    T, d = q.shape
    out = np.zeros((T, v.shape[1]), dtype=np.int64)
    for t in range(T):
        for j in range(v.shape[1]):
            acc = 0
            for u in range(T):
                score = 0
                for c in range(d):
                    score += int(q[t, c]) * int(k[u, c])
                acc += score * int(v[u, j])
            out[t, j] = acc
    return out


def binary_matrices(rows: int, cols: int):
    """Every binary (rows, cols) matrix."""
    for bits in itertools.product((0, 1), repeat=rows * cols):
        yield np.array(bits, dtype=np.int64).reshape(rows, cols)


def block_sum_oracle(x, factor: int) -> np.ndarray:
    """Coarse bin ``i`` is the loop sum of fine bins ``i*factor .. i*factor+factor-1``."""
    x = np.asarray(x, dtype=np.float64)
    T, N = x.shape
    out = np.zeros((T // factor, N))
    for i in range(T // factor):
        for j in range(factor):
            out[i] += x[i * factor + j]
    return out


def count_events_oracle(times, neurons, t_steps: int, duration: float, n_neurons: int) -> np.ndarray:
    """Histogram by direct interval tests against ``k * duration / t_steps`` edges."""
    edges = [duration * k / t_steps for k in range(t_steps + 1)]
    out = np.zeros((t_steps, n_neurons))
    for t, n in zip(times, neurons):
        for b in range(t_steps):
            last = b == t_steps - 1
            if edges[b] <= t < edges[b + 1] or (last and t == edges[-1]):
                out[b, n] += 1
                break
    return out


def lif_closed_form(x: float, t: int, tau: float, v_reset: float = 0.0) -> float:
    """Sub-threshold membrane potential after ``t`` steps of constant input ``x`` from rest."""
    return v_reset + x * (1.0 - (1.0 - 1.0 / tau) ** t)
