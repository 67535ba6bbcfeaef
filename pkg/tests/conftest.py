import math

import numpy as np
import pytest

from pasa_lab.attention_ref import AttentionProblem
from pasa_lab.bench import DistributionSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_problem():
    """FP64 random problem: uniform(x0 - am, x0 + am) for Q, K, V."""

    def _make(b=1, n=2, s_q=128, s_kv=128, d=16, s1=64, s2=64, x0=0.0, am=1.0, seed=0):
        r = np.random.default_rng(seed)
        q = r.uniform(x0 - am, x0 + am, (b, n, s_q, d))
        k = r.uniform(x0 - am, x0 + am, (b, n, s_kv, d))
        v = r.uniform(x0 - am, x0 + am, (b, n, s_kv, d))
        return AttentionProblem(q, k, v, s1, s2)

    return _make


@pytest.fixture
def bench_problem():
    """FP16-rounded benchmark problem from a DistributionSpec."""

    def _make(kind="uniform", x0=0.0, am=0.5, shape=(1, 1, 256, 128), seed=0, s1=128, s2=128):
        q, k, v = generate(DistributionSpec(kind=kind, x0=x0, am=am, shape=shape, seed=seed))
        return AttentionProblem(q, k, v, s1, s2)

    return _make


def relative_rmse(computed, golden):
    return float(np.linalg.norm((computed - golden).ravel()) / np.linalg.norm(golden.ravel()))


def brute_force_attention(q, k, v):
    """Row-by-row softmax attention with Python sums, for one (S, d) head."""
    alpha = math.sqrt(q.shape[-1])
    out = np.empty((q.shape[0], v.shape[1]))
    for r in range(q.shape[0]):
        scores = [float(np.dot(q[r], k[c])) / alpha for c in range(k.shape[0])]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = math.fsum(weights)
        for col in range(v.shape[1]):
            out[r, col] = math.fsum(w * v[c, col] for c, w in enumerate(weights)) / total
    return out


def find_row(rows, policy, **match):
    """First sweep row for ``policy`` whose fields equal ``match``, else None."""
    for row in rows:
        if row.policy is policy and all(getattr(row, k) == v for k, v in match.items()):
            return row
    return None
