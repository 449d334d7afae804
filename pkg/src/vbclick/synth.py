"""Synthetic click logs drawn from known click-model parameters.

Sessions are simulated in fixed blocks, each with its own generator seeded by
``(seed, block)``, so any block can be regenerated independently. Inside a
block all sessions advance rank by rank together:

    E ~ Bern(gamma[r, r']),  Ẽ = E or Bern(sigma)   (-2 kinds)
                             Ẽ = E and Bern(sigma)  (-1 kinds)
    R ~ Bern(alpha[q, d]),   C = Ẽ and R
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clicklog import FEATURE_DIM, Dataset, FeatureTable, Impression, Session
from .models import ModelKind, ParamStore, ParamTable

BLOCK_SIZE = 8192


@dataclass
class SimConfig:
    n_queries: int = 50
    docs_per_query: int = 10
    n_sessions: int = 10_000
    min_len: int = 3
    max_len: int = 8
    doc_skew: float = 0.0  # Zipf exponent over a query's candidates; 0 = uniform
    query_skew: float = 0.0
    sigma_scale: float = 1.5  # norm of the logistic weight vector
    sigma_bias: float = -1.0

    def __post_init__(self):
        if min(self.n_queries, self.docs_per_query, self.n_sessions) < 1:
            raise ValueError("counts must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.doc_skew < 0 or self.query_skew < 0:
            raise ValueError("skew exponents must be non-negative")


@dataclass
class GroundTruth:
    candidates: dict[str, list[str]]  # query -> candidate docs, most popular first
    alpha: dict[tuple[str, str], float]
    gamma: dict[tuple[int, int], float]
    gamma_r: dict[int, float]
    sigma: dict[str, float]
    sigma_w: np.ndarray | None = None
    sigma_b: float | None = None
    seed: int | None = None
    queries: list[str] = field(init=False)

    def __post_init__(self):
        self.queries = list(self.candidates)
        for name, table in (("alpha", self.alpha), ("gamma", self.gamma),
                            ("gamma_r", self.gamma_r), ("sigma", self.sigma)):
            vals = np.fromiter(table.values(), dtype=np.float64, count=len(table))
            if np.any((vals < 0) | (vals > 1)):
                raise ValueError(f"ground-truth {name} outside [0, 1]")

    def params(self, kind: ModelKind) -> ParamStore:
        """The ground truth as a model, for analytic click probabilities."""
        alpha = ParamTable("alpha", list(self.alpha), list(self.alpha.values()))
        g = self.gamma if kind.browsing else self.gamma_r
        gamma = ParamTable("gamma", list(g), list(g.values()))
        sigma = ParamTable("sigma", list(self.sigma), list(self.sigma.values())) if kind.has_vision else None
        return ParamStore(kind, alpha, gamma, sigma)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "candidates": self.candidates,
            "alpha": [{"query": q, "doc": d, "value": v} for (q, d), v in sorted(self.alpha.items())],
            "gamma": [{"r": r, "rp": rp, "value": v} for (r, rp), v in sorted(self.gamma.items())],
            "gamma_r": [{"r": r, "value": v} for r, v in sorted(self.gamma_r.items())],
            "sigma": [{"doc": d, "value": v} for d, v in sorted(self.sigma.items())],
            "sigma_rule": None if self.sigma_w is None else
                          {"w": self.sigma_w.tolist(), "b": self.sigma_b},
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        rule = doc.get("sigma_rule")
        return cls(
            candidates={q: list(ds) for q, ds in doc["candidates"].items()},
            alpha={(e["query"], e["doc"]): e["value"] for e in doc["alpha"]},
            gamma={(e["r"], e["rp"]): e["value"] for e in doc["gamma"]},
            gamma_r={e["r"]: e["value"] for e in doc["gamma_r"]},
            sigma={e["doc"]: e["value"] for e in doc["sigma"]},
            sigma_w=None if rule is None else np.array(rule["w"]),
            sigma_b=None if rule is None else rule["b"],
            seed=doc.get("seed"),
        )


def logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def default_gamma_grid(max_len: int, rng: np.random.Generator) -> tuple[dict, dict]:
    """Examination probabilities that decay with distance from the last click."""
    gamma, gamma_r = {}, {}
    for r in range(1, max_len + 1):
        gamma_r[r] = float(np.clip(0.95 * 0.85 ** (r - 1) + rng.uniform(-0.03, 0.03), 0.05, 0.98))
        for rp in range(r):
            if rp == 0:
                base = 0.95 * 0.8 ** (r - 1)
            else:
                base = 0.9 * 0.75 ** (r - rp - 1)
            gamma[(r, rp)] = float(np.clip(base + rng.uniform(-0.05, 0.05), 0.05, 0.98))
    return gamma, gamma_r


def generate_ground_truth(cfg: SimConfig, seed: int = 0) -> tuple[GroundTruth, FeatureTable]:
    rng = np.random.default_rng(seed)
    queries = [f"q{i:04d}" for i in range(cfg.n_queries)]
    candidates = {q: [f"{q}-d{k:03d}" for k in range(cfg.docs_per_query)] for q in queries}
    docs = [d for q in queries for d in candidates[q]]
    X = rng.standard_normal((len(docs), FEATURE_DIM))
    w = rng.standard_normal(FEATURE_DIM)
    w *= cfg.sigma_scale / np.linalg.norm(w)
    sigma_vals = logistic(X @ w + cfg.sigma_bias)
    alpha_vals = rng.uniform(0.05, 0.95, size=len(docs))
    gamma, gamma_r = default_gamma_grid(cfg.max_len, rng)
    alpha = {}
    i = 0
    for q in queries:
        for d in candidates[q]:
            alpha[(q, d)] = float(alpha_vals[i])
            i += 1
    gt = GroundTruth(
        candidates=candidates,
        alpha=alpha,
        gamma=gamma,
        gamma_r=gamma_r,
        sigma=dict(zip(docs, sigma_vals.tolist())),
        sigma_w=w,
        sigma_b=cfg.sigma_bias,
        seed=seed,
    )
    return gt, FeatureTable(docs, X)


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def simulate_sessions(gt: GroundTruth, cfg: SimConfig, kind: ModelKind = ModelKind.VUBM2,
                      seed: int = 0) -> Dataset:
    queries = gt.queries
    n_cand = max(len(c) for c in gt.candidates.values())
    # padded candidate tables; padding gets zero selection weight
    weights = np.zeros((len(queries), n_cand))
    alpha = np.zeros((len(queries), n_cand))
    sigma = np.zeros((len(queries), n_cand))
    for qi, q in enumerate(queries):
        cands = gt.candidates[q]
        weights[qi, :len(cands)] = _zipf(len(cands), cfg.doc_skew)
        alpha[qi, :len(cands)] = [gt.alpha[(q, d)] for d in cands]
        if kind.has_vision:
            sigma[qi, :len(cands)] = [gt.sigma[d] for d in cands]
    n_avail = np.array([len(gt.candidates[q]) for q in queries])
    max_len = min(cfg.max_len, n_cand)
    gamma = np.zeros((max_len + 1, max_len + 1))
    for r in range(1, max_len + 1):
        for rp in range(r):
            gamma[r, rp] = gt.gamma[(r, rp)] if kind.browsing else gt.gamma_r[r]
    q_weights = _zipf(len(queries), cfg.query_skew)
    log_w = np.log(np.where(weights > 0, weights, 1.0))
    log_w[weights == 0] = -np.inf
    mode = kind.exam_mode

    sessions: list[Session] = []
    for block, start in enumerate(range(0, cfg.n_sessions, BLOCK_SIZE)):
        rng = np.random.default_rng([seed, block])
        size = min(BLOCK_SIZE, cfg.n_sessions - start)
        q = rng.choice(len(queries), size=size, p=q_weights)
        length = np.minimum(rng.integers(cfg.min_len, cfg.max_len + 1, size=size), n_avail[q])
        # Gumbel top-k: weighted sampling of the displayed set without replacement
        keys = log_w[q] + rng.gumbel(size=(size, n_cand))
        chosen = np.argsort(-keys, axis=1, kind="stable")[:, :max_len]
        # random display order among the chosen documents
        pos = np.arange(max_len)[None, :]
        shuffle_keys = np.where(pos < length[:, None], rng.random((size, max_len)), np.inf)
        order = np.argsort(shuffle_keys, axis=1, kind="stable")
        shown = np.take_along_axis(chosen, order, axis=1)

        clicks = np.zeros((size, max_len), dtype=bool)
        prev = np.zeros(size, dtype=np.int64)
        for r in range(1, max_len + 1):
            u = rng.random((3, size))
            d = shown[:, r - 1]
            g = gamma[r, prev]
            exam = u[0] < g
            if mode == 1:
                exam = exam | (u[1] < sigma[q, d])
            elif mode == 2:
                exam = exam & (u[1] < sigma[q, d])
            c = exam & (u[2] < alpha[q, d]) & (r <= length)
            clicks[:, r - 1] = c
            prev = np.where(c, r, prev)

        for i in range(size):
            qq = queries[q[i]]
            cands = gt.candidates[qq]
            imps = tuple(Impression(cands[shown[i, k]], bool(clicks[i, k])) for k in range(length[i]))
            sessions.append(Session(f"s{start + i:08d}", qq, imps))
    return Dataset(sessions)


def click_rate_cells(data: Dataset) -> dict[tuple[str, str, int, int], tuple[int, int]]:
    """(query, doc, rank, previous click rank) -> (impressions, clicks)."""
    cells: dict[tuple[str, str, int, int], list[int]] = {}
    for s in data.sessions:
        prev = 0
        for r, imp in enumerate(s.impressions, 1):
            cell = cells.setdefault((s.query, imp.doc, r, prev), [0, 0])
            cell[0] += 1
            if imp.clicked:
                cell[1] += 1
                prev = r
    return {k: (n, c) for k, (n, c) in cells.items()}


def save_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    Path(path).write_text(gt.to_json(), encoding="utf-8")


def load_ground_truth(path: str | Path) -> GroundTruth:
    return GroundTruth.from_json(Path(path).read_text(encoding="utf-8"))
