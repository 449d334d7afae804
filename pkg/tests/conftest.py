import numpy as np
import pytest

from vbclick.clicklog import Dataset, Impression, Session
from vbclick.models import ModelKind, ParamStore, ParamTable
from vbclick.synth import SimConfig, generate_ground_truth, simulate_sessions


def make_session(sid, query, docs, clicks):
    return Session(sid, query, tuple(Impression(d, bool(c)) for d, c in zip(docs, clicks)))


def make_dataset(rows):
    """rows: (query, docs, clicks) triples; session ids are assigned in order."""
    return Dataset([make_session(f"s{i}", q, ds, cs) for i, (q, ds, cs) in enumerate(rows)])


def constant_params(kind, dataset, alpha=0.5, gamma=0.5, sigma=0.5, max_rank=10):
    pairs = sorted({(s.query, imp.doc) for s in dataset for imp in s.impressions})
    if kind.browsing:
        gkeys = [(r, rp) for r in range(1, max_rank + 1) for rp in range(r)]
    else:
        gkeys = list(range(1, max_rank + 1))
    docs = sorted(dataset.documents())
    return ParamStore(kind, ParamTable("alpha", pairs, alpha), ParamTable("gamma", gkeys, gamma),
                      ParamTable("sigma", docs, sigma) if kind.has_vision else None)


@pytest.fixture(scope="session")
def small_world():
    cfg = SimConfig(n_queries=20, docs_per_query=8, n_sessions=10_000)
    gt, features = generate_ground_truth(cfg, seed=3)
    data = simulate_sessions(gt, cfg, ModelKind.VUBM2, seed=4)
    return cfg, gt, features, data


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
