import json

import numpy as np
import pytest

from spikescr import compute as C
from spikescr.neuron import NeuronConfig, lif_sequence
from spikescr.testkit import (OracleReport, append_report, attention_counts_oracle, binary_matrices,
                              block_sum_oracle, fd_gradient_check, seed_sweep_compare)


def test_fd_quadratic_is_exact(rng):
    a = C.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    rep = fd_gradient_check(lambda: (a * a * 3.0).sum(), [a], tol=1e-6)
    assert rep.passed and rep.max_rel < 1e-6


def test_fd_two_step_soft_lif(rng):
    x = C.Tensor(rng.normal(1.0, 0.5, size=(1, 2, 4)), requires_grad=True)
    cfg = NeuronConfig(soft=True, detach_reset=False)
    rep = fd_gradient_check(lambda: lif_sequence(x, cfg).sum(), [x], tol=1e-3)
    assert rep.passed


def test_fd_detects_wrong_gradient(rng):
    bad = C.custom_grad(lambda x: x * x, lambda g, out, x: g * x)  # true derivative is 2x
    a = C.Tensor(rng.uniform(1, 2, size=4), requires_grad=True)
    rep = fd_gradient_check(lambda: bad(a).sum(), [a], tol=1e-3)
    assert not rep.passed and rep.max_rel == pytest.approx(0.5, rel=1e-3)


def test_fd_sampling_deterministic(rng):
    a = C.Tensor(rng.normal(size=50), requires_grad=True)
    r1 = fd_gradient_check(lambda: (a * a).sum(), [a], n_samples=5, seed=3)
    r2 = fd_gradient_check(lambda: (a * a).sum(), [a], n_samples=5, seed=3)
    assert r1 == r2


def test_sweep_identical_functions():
    res = seed_sweep_compare(lambda s: 0.5 + s, lambda s: 0.5 + s, 5)
    assert len(res.rows) == 5
    assert (res.wins, res.losses, res.ties, res.mean_gap) == (0, 0, 5, 0.0)


def test_sweep_counts_wins():
    res = seed_sweep_compare(lambda s: s, lambda s: 2 - s, [0, 1, 2, 3])
    assert (res.wins, res.losses, res.ties) == (2, 1, 1)
    assert res.worst_gap == -2


def test_attention_oracle_small_case():
    q = np.array([[1, 0], [1, 1]])
    k = np.array([[1, 1], [0, 1]])
    v = np.array([[1, 0], [1, 1]])
    np.testing.assert_array_equal(attention_counts_oracle(q, k, v), (q @ k.T) @ v)


def test_binary_matrix_enumeration():
    assert len(list(binary_matrices(2, 2))) == 16


def test_block_sum_oracle():
    x = np.arange(12.0).reshape(6, 2)
    np.testing.assert_array_equal(block_sum_oracle(x, 3), [[6, 9], [24, 27]])


def test_reports_as_json_lines(tmp_path):
    path = tmp_path / "r.jsonl"
    for i in range(2):
        append_report(path, OracleReport(f"t{i}", 0.0, 0.0, 1e-3, True, seed=i))
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["name"] for r in rows] == ["t0", "t1"] and rows[1]["seed"] == 1
