"""Standard EM for the six click-model kinds.

The dataset is compiled once into flat per-impression index arrays (the
previous-click rank depends only on observed clicks, so every impression's
parameter keys are fixed). Each iteration runs the E-step kernel over fixed
chunks of impressions, merges chunk sums in chunk order, and applies the
ratio M-step. Chunk boundaries never depend on the thread count, so results
are bit-identical for any number of workers.
"""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .clicklog import Dataset
from .models import ModelKind, ParamStore, ParamTable, UnknownKeyError, previous_click_ranks

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1 << 16


class DegenerateObservationError(ValueError):
    """The observed click has zero probability under the given parameters."""


# -- compiled data -------------------------------------------------------------

@dataclass
class CompiledData:
    """Flat impression arrays plus the parameter keys they index."""

    kind: ModelKind
    alpha_keys: list
    gamma_keys: list
    sigma_keys: list
    a_idx: np.ndarray
    g_idx: np.ndarray
    s_idx: np.ndarray
    click: np.ndarray
    rank: np.ndarray
    session: np.ndarray  # session position of every impression
    n_sessions: int

    def __len__(self) -> int:
        return self.a_idx.shape[0]

    def chunks(self, size: int = CHUNK_SIZE) -> list[slice]:
        n = len(self)
        return [slice(i, min(i + size, n)) for i in range(0, n, size)] or [slice(0, 0)]

    def select(self, mask: np.ndarray) -> "CompiledData":
        return CompiledData(self.kind, self.alpha_keys, self.gamma_keys, self.sigma_keys,
                            self.a_idx[mask], self.g_idx[mask], self.s_idx[mask],
                            self.click[mask], self.rank[mask], self.session[mask], self.n_sessions)


def _raw_columns(dataset: Dataset, browsing: bool):
    qd, gk, docs, clicks, ranks, sess = [], [], [], [], [], []
    for si, s in enumerate(dataset.sessions):
        prevs = previous_click_ranks(s.clicks)
        for r, (imp, prev) in enumerate(zip(s.impressions, prevs), 1):
            qd.append((s.query, imp.doc))
            gk.append((r, prev) if browsing else r)
            docs.append(imp.doc)
            clicks.append(imp.clicked)
            ranks.append(r)
            sess.append(si)
    return qd, gk, docs, clicks, ranks, sess


def compile_dataset(dataset: Dataset, kind: ModelKind, params: ParamStore | None = None) -> CompiledData:
    """Index a dataset against a model's keys.

    Without ``params`` the key sets are the sorted keys observed in the data
    (training). With ``params`` the model's own key order is used and any
    unseen key raises :class:`UnknownKeyError` (evaluation).
    """
    qd, gk, docs, clicks, ranks, sess = _raw_columns(dataset, kind.browsing)
    if params is None:
        alpha_keys = sorted(set(qd))
        gamma_keys = sorted(set(gk))
        sigma_keys = sorted(set(docs)) if kind.has_vision else []
        a_index = {k: i for i, k in enumerate(alpha_keys)}
        g_index = {k: i for i, k in enumerate(gamma_keys)}
        s_index = {k: i for i, k in enumerate(sigma_keys)}
    else:
        if params.kind is not kind:
            raise ValueError(f"model is {params.kind.label}, expected {kind.label}")
        alpha_keys, gamma_keys = params.alpha.keys, params.gamma.keys
        a_index, g_index = params.alpha.index, params.gamma.index
        sigma_keys = params.sigma.keys if params.sigma is not None else []
        s_index = params.sigma.index if params.sigma is not None else {}

    def lookup(index, keys, table):
        try:
            return np.fromiter((index[k] for k in keys), dtype=np.int64, count=len(keys))
        except KeyError as exc:
            raise UnknownKeyError(table, exc.args[0]) from None

    a_idx = lookup(a_index, qd, "alpha")
    g_idx = lookup(g_index, gk, "gamma")
    s_idx = lookup(s_index, docs, "sigma") if kind.has_vision else np.zeros(len(docs), dtype=np.int64)
    return CompiledData(
        kind, list(alpha_keys), list(gamma_keys), list(sigma_keys), a_idx, g_idx, s_idx,
        np.array(clicks, dtype=np.uint8), np.array(ranks, dtype=np.int64),
        np.array(sess, dtype=np.int64), len(dataset.sessions),
    )


# -- single-impression posteriors ---------------------------------------------

class PosteriorTriple(NamedTuple):
    """Posteriors of one impression given its observed click.

    ``p_vision`` is the posterior that the vision gate fired: P(Ẽ=1, E=0 | C)
    for the ``-2`` kinds and P(Ẽ=1, E=1 | C) for the ``-1`` kinds (0 for the
    baselines). The matching sigma-update denominator is P(E=0 | C) and
    P(E=1 | C) respectively, see :func:`sigma_denominator`.
    """

    p_rel: float
    p_exam: float
    p_vision: float


def sigma_denominator(post: PosteriorTriple, kind: ModelKind) -> float:
    mode = kind.exam_mode
    if mode == 1:
        return 1.0 - post.p_exam
    if mode == 2:
        return post.p_exam
    return 0.0


def _check_inputs(alpha, gamma, sigma):
    for name, v in (("alpha", alpha), ("gamma", gamma), ("sigma", sigma)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")


def e_step_closed_form(alpha: float, gamma: float, sigma: float, clicked: bool,
                       kind: ModelKind) -> PosteriorTriple:
    _check_inputs(alpha, gamma, sigma)
    mode = kind.exam_mode
    exam = gamma if mode == 0 else (gamma + (1 - gamma) * sigma if mode == 1 else gamma * sigma)
    p = alpha * exam
    if clicked:
        if p <= 0.0:
            raise DegenerateObservationError(
                f"click observed with zero click probability (alpha={alpha}, exam={exam})")
        if mode == 1:
            return PosteriorTriple(1.0, gamma / exam, sigma * (1 - gamma) / exam)
        if mode == 2:
            return PosteriorTriple(1.0, 1.0, 1.0)
        return PosteriorTriple(1.0, 1.0, 0.0)
    den = 1.0 - p
    if den <= 0.0:
        raise DegenerateObservationError(
            f"skip observed with click probability 1 (alpha={alpha}, exam={exam})")
    p_rel = alpha * (1 - exam) / den
    if mode == 1:
        return PosteriorTriple(p_rel, gamma * (1 - alpha) / den, sigma * (1 - gamma) * (1 - alpha) / den)
    if mode == 2:
        return PosteriorTriple(p_rel, gamma * (1 - alpha * sigma) / den, gamma * sigma * (1 - alpha) / den)
    return PosteriorTriple(p_rel, gamma * (1 - alpha) / den, 0.0)


def e_step_enumerated(alpha: float, gamma: float, sigma: float, clicked: bool,
                      kind: ModelKind) -> PosteriorTriple:
    """Posteriors by brute-force enumeration of the hidden (E, Ẽ, R) states."""
    _check_inputs(alpha, gamma, sigma)
    mode = kind.exam_mode

    def p_vis_given_exam(e: int) -> float:
        # P(Ẽ=1 | E=e)
        if mode == 0:
            return float(e)
        if mode == 1:
            return 1.0 if e else sigma
        return sigma if e else 0.0

    total = rel = exam = vis = 0.0
    for e, et, r in itertools.product((0, 1), repeat=3):
        pe = gamma if e else 1 - gamma
        pv = p_vis_given_exam(e)
        pet = pv if et else 1 - pv
        pr = alpha if r else 1 - alpha
        weight = pe * pet * pr
        if bool(et and r) != bool(clicked) or weight == 0.0:
            continue
        total += weight
        rel += weight * r
        exam += weight * e
        if mode == 1 and et and not e:
            vis += weight
        elif mode == 2 and et and e:
            vis += weight
    if total <= 0.0:
        raise DegenerateObservationError("observation has zero probability under the model")
    return PosteriorTriple(rel / total, exam / total, vis / total)


# -- M-step --------------------------------------------------------------------

@dataclass
class PosteriorSums:
    """E-step sums grouped per parameter key."""

    alpha_num: np.ndarray
    alpha_den: np.ndarray
    gamma_num: np.ndarray
    gamma_den: np.ndarray
    sigma_num: np.ndarray
    sigma_den: np.ndarray
    log_likelihood: float = 0.0
    n_impressions: int = 0

    @classmethod
    def zeros(cls, n_alpha: int, n_gamma: int, n_sigma: int) -> "PosteriorSums":
        z = np.zeros
        return cls(z(n_alpha), z(n_alpha), z(n_gamma), z(n_gamma), z(n_sigma), z(n_sigma))

    def add(self, other: "PosteriorSums") -> None:
        self.alpha_num += other.alpha_num
        self.alpha_den += other.alpha_den
        self.gamma_num += other.gamma_num
        self.gamma_den += other.gamma_den
        self.sigma_num += other.sigma_num
        self.sigma_den += other.sigma_den
        self.log_likelihood += other.log_likelihood
        self.n_impressions += other.n_impressions


def _ratio(num, den, prev):
    ok = den > 0.0
    out = prev.copy()
    np.divide(num, den, out=out, where=ok)
    return np.clip(out, 0.0, 1.0), ~ok


@dataclass
class MStepResult:
    params: ParamStore
    flagged: dict[str, list] = field(default_factory=dict)


def m_step(sums: PosteriorSums, params: ParamStore, update_sigma: bool = True) -> MStepResult:
    """Ratio updates; keys with a zero denominator keep their value and are flagged."""
    new = params.copy()
    flagged = {}
    for name, num, den in (("alpha", sums.alpha_num, sums.alpha_den),
                           ("gamma", sums.gamma_num, sums.gamma_den)):
        table = getattr(new, name)
        table.values, bad = _ratio(num, den, table.values)
        if bad.any():
            flagged[name] = [table.keys[i] for i in np.flatnonzero(bad)]
    if update_sigma and new.sigma is not None:
        new.sigma.values, bad = _ratio(sums.sigma_num, sums.sigma_den, new.sigma.values)
        if bad.any():
            flagged["sigma"] = [new.sigma.keys[i] for i in np.flatnonzero(bad)]
    return MStepResult(new, flagged)


# -- E-step over a dataset -----------------------------------------------------

def e_step(data: CompiledData, params: ParamStore, threads: int = 1,
           backend: str | None = None) -> PosteriorSums:
    estep, _ = kernels.get_backend(backend)
    mode = params.kind.exam_mode
    alpha = params.alpha.values
    gamma = params.gamma.values
    sigma = params.sigma.values if params.sigma is not None else np.zeros(1)
    n_s = len(params.sigma) if params.sigma is not None else 0

    def run(sl: slice) -> PosteriorSums:
        part = PosteriorSums.zeros(len(alpha), len(gamma), n_s)
        part.log_likelihood = estep(
            data.a_idx[sl], data.g_idx[sl], data.s_idx[sl], data.click[sl],
            alpha, gamma, sigma, mode,
            part.alpha_num, part.alpha_den, part.gamma_num, part.gamma_den,
            part.sigma_num, part.sigma_den,
        )
        part.n_impressions = sl.stop - sl.start
        return part

    chunks = data.chunks()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    total = PosteriorSums.zeros(len(alpha), len(gamma), n_s)
    for part in parts:
        total.add(part)
    return total


def average_log_likelihood(data: CompiledData, params: ParamStore, threads: int = 1,
                           backend: str | None = None) -> float:
    sums = e_step(data, params, threads, backend)
    return sums.log_likelihood / max(sums.n_impressions, 1)


# -- driver --------------------------------------------------------------------

@dataclass
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-5
    init_alpha: float | None = None
    init_gamma: float = 0.5
    init_sigma: float = 0.5
    update_sigma: bool = True
    threads: int = 1
    backend: str | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        for name in ("init_alpha", "init_gamma", "init_sigma"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    def alpha0(self, kind: ModelKind) -> float:
        """0.2 for the UBM family and 0.5 for the PBM family unless overridden."""
        if self.init_alpha is not None:
            return self.init_alpha
        return 0.2 if kind.browsing else 0.5


@dataclass
class EmTrace:
    avg_ll: list[float] = field(default_factory=list)
    max_delta: list[float] = field(default_factory=list)
    converged: bool = False
    initial_ll: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.avg_ll)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "avg_ll", "max_param_delta"])
            for i, (ll, d) in enumerate(zip(self.avg_ll, self.max_delta), 1):
                w.writerow([i, repr(ll), repr(d)])


def init_params_for(data: CompiledData, cfg: EmConfig) -> ParamStore:
    kind = data.kind
    sigma = ParamTable("sigma", data.sigma_keys, cfg.init_sigma) if kind.has_vision else None
    return ParamStore(kind, ParamTable("alpha", data.alpha_keys, cfg.alpha0(kind)),
                      ParamTable("gamma", data.gamma_keys, cfg.init_gamma), sigma)


SigmaStep = Callable[[ParamStore, PosteriorSums, np.ndarray], np.ndarray]


def em_loop(data: CompiledData, params: ParamStore, cfg: EmConfig,
            sigma_step: SigmaStep | None = None,
            on_iteration: Callable[[int, ParamStore], None] | None = None) -> tuple[ParamStore, EmTrace]:
    """Iterate E/M steps; ``sigma_step`` replaces the sigma ratio update.

    ``sigma_step(old_params, sums, ratio_sigma)`` receives the standard
    M-step sigma values and returns the sigma vector to use.
    """
    trace = EmTrace()
    lls = []
    for it in range(1, cfg.max_iters + 1):
        sums = e_step(data, params, cfg.threads, cfg.backend)
        lls.append(sums.log_likelihood / max(sums.n_impressions, 1))
        res = m_step(sums, params, update_sigma=cfg.update_sigma)
        new = res.params
        if sigma_step is not None and new.sigma is not None:
            new.sigma.values = np.clip(np.asarray(sigma_step(params, sums, new.sigma.values),
                                                  dtype=np.float64), 0.0, 1.0)
        delta = max(float(np.max(np.abs(a.values - b.values), initial=0.0))
                    for a, b in zip(new.tables(), params.tables()))
        params = new
        trace.max_delta.append(delta)
        if on_iteration is not None:
            on_iteration(it, params)
        if delta < cfg.tol:
            trace.converged = True
            break
    lls.append(average_log_likelihood(data, params, cfg.threads, cfg.backend))
    trace.initial_ll = lls[0]
    trace.avg_ll = lls[1:]
    logger.info("EM %s: %d iterations, final avg LL %.6f", data.kind.label, trace.iterations, lls[-1])
    return params, trace


def run_em(train: Dataset, kind: ModelKind, cfg: EmConfig | None = None,
           init_params: ParamStore | None = None) -> tuple[ParamStore, EmTrace]:
    cfg = cfg or EmConfig()
    if not train.sessions:
        raise ValueError("cannot train on an empty dataset")
    data = compile_dataset(train, kind, init_params)
    params = init_params.copy() if init_params is not None else init_params_for(data, cfg)
    return em_loop(data, params, cfg)
