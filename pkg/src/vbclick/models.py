"""Position-based and user-browsing click models with a per-document vision bias.

Every model clicks a document iff it is examined and relevant. Relevance is
``alpha[q, d]``. Position examination is ``gamma[r]`` (PBM family) or
``gamma[r, r']`` (UBM family, ``r'`` being the rank of the previous click).
The vision variants add a per-document ``sigma[d]``:

* ``-2`` (additive complement): exam = gamma + (1 - gamma) * sigma
* ``-1`` (multiplicative):      exam = gamma * sigma
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .clicklog import Session

MODEL_SCHEMA_VERSION = 1
LOG_EPS = 1e-12


class ModelKind(str, Enum):
    PBM = "pbm"
    UBM = "ubm"
    VPBM1 = "vpbm1"
    VPBM2 = "vpbm2"
    VUBM1 = "vubm1"
    VUBM2 = "vubm2"

    @property
    def browsing(self) -> bool:
        """True for the UBM family (gamma keyed by (r, r'))."""
        return self in (ModelKind.UBM, ModelKind.VUBM1, ModelKind.VUBM2)

    @property
    def has_vision(self) -> bool:
        return self not in (ModelKind.PBM, ModelKind.UBM)

    @property
    def exam_mode(self) -> int:
        """0: gamma only, 1: gamma + (1-gamma) sigma, 2: gamma * sigma."""
        if self in (ModelKind.VPBM2, ModelKind.VUBM2):
            return 1
        if self in (ModelKind.VPBM1, ModelKind.VUBM1):
            return 2
        return 0

    @property
    def label(self) -> str:
        return {"pbm": "PBM", "ubm": "UBM", "vpbm1": "vPBM-1", "vpbm2": "vPBM-2",
                "vubm1": "vUBM-1", "vubm2": "vUBM-2"}[self.value]

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        key = name.strip().lower().replace("-", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown model kind {name!r}") from None


class UnknownKeyError(KeyError):
    """A parameter lookup hit a key that the model never learned."""

    def __init__(self, table: str, key: Hashable):
        self.table = table
        self.key = key
        super().__init__(f"unknown key {key!r} in {table} table")

    def __str__(self) -> str:
        return self.args[0]


class ParamTable:
    """Keyed parameter values backed by one float array.

    The array is what the EM kernels update; the key index is fixed after
    construction.
    """

    def __init__(self, name: str, keys: Iterable[Hashable], values: Sequence[float] | np.ndarray | float):
        self.name = name
        self.keys = list(keys)
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError(f"duplicate keys in {name} table")
        if np.isscalar(values):
            self.values = np.full(len(self.keys), float(values))
        else:
            self.values = np.array(values, dtype=np.float64)
        if self.values.shape != (len(self.keys),):
            raise ValueError(f"{name} table: {len(self.keys)} keys but values of shape {self.values.shape}")

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self.index

    def __getitem__(self, key) -> float:
        return float(self.values[self.position(key)])

    def position(self, key) -> int:
        try:
            return self.index[key]
        except KeyError:
            raise UnknownKeyError(self.name, key) from None

    def as_dict(self) -> dict:
        return dict(zip(self.keys, self.values.tolist()))

    def copy(self) -> "ParamTable":
        return ParamTable(self.name, self.keys, self.values.copy())


@dataclass
class ParamStore:
    kind: ModelKind
    alpha: ParamTable
    gamma: ParamTable
    sigma: ParamTable | None = None
    mlp: object | None = None

    def __post_init__(self):
        if self.kind.has_vision and self.sigma is None:
            raise ValueError(f"{self.kind.label} requires a vision-bias table")
        if not self.kind.has_vision and self.sigma is not None:
            raise ValueError(f"{self.kind.label} has no vision bias")
        for table in self.tables():
            if np.any((table.values < 0.0) | (table.values > 1.0)) or not np.all(np.isfinite(table.values)):
                raise ValueError(f"{table.name} values must lie in [0, 1]")

    def tables(self) -> list[ParamTable]:
        return [t for t in (self.alpha, self.gamma, self.sigma) if t is not None]

    def copy(self) -> "ParamStore":
        return ParamStore(self.kind, self.alpha.copy(), self.gamma.copy(),
                          None if self.sigma is None else self.sigma.copy(), self.mlp)

    def gamma_key(self, r: int, prev: int):
        return (r, prev) if self.kind.browsing else r

    def sigma_of(self, doc: str) -> float:
        return 0.0 if self.sigma is None else self.sigma[doc]


def previous_click_rank(clicks: Sequence[bool], r: int) -> int:
    """Rank of the last click strictly above rank ``r`` (1-based), 0 if none."""
    if not 1 <= r <= len(clicks) + 1:
        raise ValueError(f"rank {r} out of range for {len(clicks)} impressions")
    for k in range(r - 1, 0, -1):
        if clicks[k - 1]:
            return k
    return 0


def previous_click_ranks(clicks: Sequence[bool]) -> list[int]:
    out, last = [], 0
    for k, c in enumerate(clicks, 1):
        out.append(last)
        if c:
            last = k
    return out


def _check_unit(name: str, x: float) -> None:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name}={x} outside [0, 1]")


def examination_prob(kind: ModelKind, gamma: float, sigma: float = 0.0) -> float:
    _check_unit("gamma", gamma)
    mode = kind.exam_mode
    if mode == 0:
        return gamma
    _check_unit("sigma", sigma)
    if mode == 1:
        return gamma + (1.0 - gamma) * sigma
    return gamma * sigma


def conditional_click_prob(params: ParamStore, q: str, d: str, r: int, prev: int) -> float:
    """P(C_r = 1 | earlier clicks) with ``prev`` the previous click rank."""
    if not 0 <= prev < r:
        raise ValueError(f"previous click rank {prev} must lie in [0, {r})")
    alpha = params.alpha[(q, d)]
    gamma = params.gamma[params.gamma_key(r, prev)]
    return alpha * examination_prob(params.kind, gamma, params.sigma_of(d))


def session_click_probs(params: ParamStore, s: Session) -> list[float]:
    prevs = previous_click_ranks(s.clicks)
    return [conditional_click_prob(params, s.query, imp.doc, r, prev)
            for r, (imp, prev) in enumerate(zip(s.impressions, prevs), 1)]


def clamped_log(p: float) -> float:
    return math.log(min(max(p, LOG_EPS), 1.0 - LOG_EPS))


def impression_log_likelihoods(params: ParamStore, s: Session) -> list[float]:
    return [clamped_log(p) if imp.clicked else clamped_log(1.0 - p)
            for imp, p in zip(s.impressions, session_click_probs(params, s))]


def session_log_likelihood(params: ParamStore, s: Session) -> float:
    """Natural-log likelihood of a session's clicks under the chain factorisation."""
    return math.fsum(impression_log_likelihoods(params, s))


def session_click_marginal(params: ParamStore, s: Session, r: int) -> float:
    """Unconditional P(C_r = 1), summing over the rank j of the previous click.

    P(C_r=1) = sum_j P(C_j=1) * prod_{j<k<r} (1 - p(k | j)) * p(r | j), P(C_0=1) = 1.
    """
    n = len(s)
    if not 1 <= r <= n:
        raise ValueError(f"rank {r} outside session of length {n}")

    def p(k: int, j: int) -> float:
        return conditional_click_prob(params, s.query, s.impressions[k - 1].doc, k, j)

    marg = [1.0]
    for k in range(1, r + 1):
        total = 0.0
        for j in range(k):
            skip = 1.0
            for m in range(j + 1, k):
                skip *= 1.0 - p(m, j)
            total += marg[j] * skip * p(k, j)
        marg.append(total)
    return marg[r]


def initial_params(kind: ModelKind, qd_pairs: Iterable[tuple[str, str]], gamma_keys: Iterable,
                   docs: Iterable[str] | None, init_alpha: float, init_gamma: float,
                   init_sigma: float) -> ParamStore:
    alpha = ParamTable("alpha", qd_pairs, init_alpha)
    gamma = ParamTable("gamma", gamma_keys, init_gamma)
    sigma = ParamTable("sigma", docs or [], init_sigma) if kind.has_vision else None
    return ParamStore(kind, alpha, gamma, sigma)


# -- persistence ---------------------------------------------------------------

def params_to_json(params: ParamStore) -> str:
    alpha = [{"query": q, "doc": d, "value": v}
             for (q, d), v in sorted(params.alpha.as_dict().items())]
    if params.kind.browsing:
        gamma = [{"r": r, "rp": rp, "value": v} for (r, rp), v in sorted(params.gamma.as_dict().items())]
    else:
        gamma = [{"r": r, "value": v} for r, v in sorted(params.gamma.as_dict().items())]
    doc = {
        "version": MODEL_SCHEMA_VERSION,
        "kind": params.kind.value,
        "alpha": alpha,
        "gamma": gamma,
        "sigma": [] if params.sigma is None else
                 [{"doc": d, "value": v} for d, v in sorted(params.sigma.as_dict().items())],
    }
    if params.mlp is not None:
        doc["mlp"] = params.mlp.to_dict()
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def params_from_json(text: str) -> ParamStore:
    doc = json.loads(text)
    version = doc.get("version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValueError(f"model schema version {version!r} is not supported "
                         f"(expected {MODEL_SCHEMA_VERSION})")
    kind = ModelKind.parse(doc["kind"])
    alpha = ParamTable("alpha", [(e["query"], e["doc"]) for e in doc["alpha"]],
                       [e["value"] for e in doc["alpha"]])
    if kind.browsing:
        gkeys = [(int(e["r"]), int(e["rp"])) for e in doc["gamma"]]
    else:
        gkeys = [int(e["r"]) for e in doc["gamma"]]
    gamma = ParamTable("gamma", gkeys, [e["value"] for e in doc["gamma"]])
    sigma = None
    if kind.has_vision:
        sigma = ParamTable("sigma", [e["doc"] for e in doc["sigma"]], [e["value"] for e in doc["sigma"]])
    mlp = None
    if doc.get("mlp") is not None:
        from .regem import Mlp
        mlp = Mlp.from_dict(doc["mlp"])
    return ParamStore(kind, alpha, gamma, sigma, mlp)


def save_params(params: ParamStore, path: str | Path) -> None:
    Path(path).write_text(params_to_json(params), encoding="utf-8")


def load_params(path: str | Path) -> ParamStore:
    return params_from_json(Path(path).read_text(encoding="utf-8"))
