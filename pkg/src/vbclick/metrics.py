"""Click-prediction and ranking metrics, plus table rendering for reports.

All click probabilities are conditional on the observed earlier clicks of the
session. Log-likelihood uses the natural log averaged per impression;
perplexity uses log2 as in the usual click-model definition.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .clicklog import BUCKET_LABELS, Dataset, QueryFrequencyIndex
from .em import CompiledData, compile_dataset
from .models import LOG_EPS, ParamStore

DEFAULT_MAX_RANK = 10


@dataclass
class Predictions:
    data: CompiledData
    probs: np.ndarray

    @property
    def clicks(self) -> np.ndarray:
        return self.data.click.astype(bool)

    def select(self, mask: np.ndarray) -> "Predictions":
        return Predictions(self.data.select(mask), self.probs[mask])


def predict(d: Dataset, params: ParamStore, backend: str | None = None) -> Predictions:
    data = compile_dataset(d, params.kind, params)
    _, click_probs = kernels.get_backend(backend)
    sigma = params.sigma.values if params.sigma is not None else np.zeros(1)
    probs = click_probs(data.a_idx, data.g_idx, data.s_idx, params.alpha.values,
                        params.gamma.values, sigma, params.kind.exam_mode)
    return Predictions(data, np.asarray(probs))


def _obs_prob(pred: Predictions) -> np.ndarray:
    p = np.where(pred.clicks, pred.probs, 1.0 - pred.probs)
    return np.clip(p, LOG_EPS, 1.0 - LOG_EPS)


def _ll_from(pred: Predictions) -> float:
    if len(pred.probs) == 0:
        raise ValueError("no impressions to evaluate")
    return float(np.mean(np.log(_obs_prob(pred))))


def _ppl_from(pred: Predictions) -> float:
    if len(pred.probs) == 0:
        raise ValueError("no impressions to evaluate")
    return float(2.0 ** (-np.mean(np.log2(_obs_prob(pred)))))


def log_likelihood(d: Dataset, params: ParamStore) -> float:
    """Average per-impression log-likelihood (natural log, <= 0)."""
    return _ll_from(predict(d, params))


def subset_perplexity(pred: Predictions, mask: np.ndarray) -> float:
    """Perplexity pooled over an arbitrary subset of impressions."""
    return _ppl_from(pred.select(mask))


def _rank_perplexities(pred: Predictions, max_rank: int | None = None) -> dict[int, float]:
    ranks = pred.data.rank
    logs = np.log2(_obs_prob(pred))
    top = int(ranks.max(initial=0))
    if max_rank is not None:
        top = min(top, max_rank)
    sums = np.bincount(ranks, logs, minlength=top + 1)
    counts = np.bincount(ranks, minlength=top + 1)
    return {r: float(2.0 ** (-sums[r] / counts[r])) for r in range(1, top + 1) if counts[r]}


def perplexity_at_rank(d: Dataset, params: ParamStore, r: int) -> float:
    per_rank = _rank_perplexities(predict(d, params))
    if r not in per_rank:
        raise ValueError(f"no session reaches rank {r}")
    return per_rank[r]


def total_perplexity(d: Dataset, params: ParamStore, max_rank: int = DEFAULT_MAX_RANK) -> float:
    """Mean of the per-rank perplexities over ranks 1..max_rank that have data."""
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    per_rank = _rank_perplexities(predict(d, params), max_rank)
    if not per_rank:
        raise ValueError("no impressions to evaluate")
    return float(np.mean(list(per_rank.values())))


def clicked_perplexity(d: Dataset, params: ParamStore) -> float:
    pred = predict(d, params)
    mask = pred.clicks
    if not mask.any():
        raise ValueError("dataset has no clicks")
    return subset_perplexity(pred, mask)


def perplexity_improvement(p_new: float, p_old: float) -> float:
    """Percent improvement of p_new over p_old, relative to the gap above 1."""
    if p_old == 1.0:
        raise ZeroDivisionError("baseline perplexity is 1; improvement undefined")
    return (p_old - p_new) / (p_old - 1.0) * 100.0


def ll_improvement(ll_new: float, ll_old: float) -> float:
    """Percent improvement in log-likelihood, (|old| - |new|) / |old|."""
    if ll_old == 0.0:
        raise ZeroDivisionError("baseline log-likelihood is 0; improvement undefined")
    return (abs(ll_old) - abs(ll_new)) / abs(ll_old) * 100.0


def _reciprocal_ranks(d: Dataset, params: ParamStore) -> list[float]:
    out = []
    for s in d.sessions:
        first = next((imp.doc for imp in s.impressions if imp.clicked), None)
        if first is None:
            continue
        scored = sorted(((-params.alpha[(s.query, imp.doc)], imp.doc) for imp in s.impressions))
        pos = next(i for i, (_, doc) in enumerate(scored, 1) if doc == first)
        out.append(1.0 / pos)
    return out


def mrr(d: Dataset, params: ParamStore) -> float:
    """Mean reciprocal rank of each session's first click under the alpha ordering."""
    rr = _reciprocal_ranks(d, params)
    if not rr:
        raise ValueError("no session with a click")
    return math.fsum(rr) / len(rr)


@dataclass
class EvalReport:
    n_sessions: int
    n_impressions: int
    avg_log_likelihood: float
    perplexity_per_rank: dict[int, float]
    total_perplexity: float
    clicked_perplexity: float | None
    mrr: float | None
    buckets: dict[str, "EvalReport"] = field(default_factory=dict)

    def summary(self) -> dict[str, float | None]:
        return {
            "log_likelihood": self.avg_log_likelihood,
            "perplexity": self.total_perplexity,
            "clicked_perplexity": self.clicked_perplexity,
            "mrr": self.mrr,
        }


def _report(d: Dataset, pred: Predictions, params: ParamStore, max_rank: int) -> EvalReport:
    per_rank = _rank_perplexities(pred, max_rank)
    clicked = pred.clicks
    rr = _reciprocal_ranks(d, params)
    return EvalReport(
        n_sessions=len(d.sessions),
        n_impressions=len(pred.probs),
        avg_log_likelihood=_ll_from(pred),
        perplexity_per_rank=per_rank,
        total_perplexity=float(np.mean(list(per_rank.values()))),
        clicked_perplexity=subset_perplexity(pred, clicked) if clicked.any() else None,
        mrr=math.fsum(rr) / len(rr) if rr else None,
    )


def evaluate(d: Dataset, params: ParamStore, max_rank: int = DEFAULT_MAX_RANK) -> EvalReport:
    return _report(d, predict(d, params), params, max_rank)


def bucketed_report(d: Dataset, params: ParamStore, idx: QueryFrequencyIndex,
                    max_rank: int = DEFAULT_MAX_RANK) -> EvalReport:
    """Overall report with one sub-report per populated query-frequency bucket."""
    pred = predict(d, params)
    overall = _report(d, pred, params, max_rank)
    labels = [idx.bucket(s.query) for s in d.sessions]
    sess_label = np.array([lab or "" for lab in labels], dtype=object)
    imp_label = sess_label[pred.data.session] if len(pred.probs) else np.array([], dtype=object)
    for lab in BUCKET_LABELS:
        sess_ids = [i for i, l in enumerate(labels) if l == lab]
        if not sess_ids:
            continue
        sub = Dataset([d.sessions[i] for i in sess_ids])
        overall.buckets[lab] = _report(sub, pred.select(imp_label == lab), params, max_rank)
    return overall


# -- rendering -----------------------------------------------------------------

def _fmt(x: float | None, digits: int = 4) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def _pct(x: float | None) -> str:
    if x is None:
        return "-"
    return f"{0.0 if round(x, 2) == 0 else x:+.2f}%"


def _safe(fn, new, old):
    if new is None or old is None:
        return None
    try:
        return fn(new, old)
    except ZeroDivisionError:
        return None


def comparison_tables(reports: dict[str, EvalReport], baseline: str | None = None,
                      max_rank: int = DEFAULT_MAX_RANK) -> dict[str, list[list[str]]]:
    """Model x metric, model x rank and model x bucket tables as string rows."""
    base = reports.get(baseline) if baseline else None
    metric = [["model", "log_likelihood", "ll_improvement", "perplexity", "ppl_improvement",
               "clicked_perplexity", "clicked_improvement", "mrr"]]
    for name, rep in reports.items():
        metric.append([
            name,
            _fmt(rep.avg_log_likelihood),
            _pct(_safe(ll_improvement, rep.avg_log_likelihood, base and base.avg_log_likelihood)),
            _fmt(rep.total_perplexity),
            _pct(_safe(perplexity_improvement, rep.total_perplexity, base and base.total_perplexity)),
            _fmt(rep.clicked_perplexity),
            _pct(_safe(perplexity_improvement, rep.clicked_perplexity, base and base.clicked_perplexity)),
            _fmt(rep.mrr),
        ])
    ranks = sorted({r for rep in reports.values() for r in rep.perplexity_per_rank if r <= max_rank})
    rank_rows = [["model"] + [f"rank_{r}" for r in ranks]]
    for name, rep in reports.items():
        row = [name]
        for r in ranks:
            p = rep.perplexity_per_rank.get(r)
            cell = _fmt(p)
            if base is not None and p is not None:
                cell += f" ({_pct(_safe(perplexity_improvement, p, base.perplexity_per_rank.get(r)))})"
            row.append(cell)
        rank_rows.append(row)
    bucket_rows = [["model", "bucket", "sessions", "log_likelihood", "perplexity", "mrr"]]
    for name, rep in reports.items():
        for lab in BUCKET_LABELS:
            sub = rep.buckets.get(lab)
            if sub is None:
                continue
            bucket_rows.append([name, lab, str(sub.n_sessions), _fmt(sub.avg_log_likelihood),
                                _fmt(sub.total_perplexity), _fmt(sub.mrr)])
    return {"metrics": metric, "ranks": rank_rows, "buckets": bucket_rows}


def to_markdown(rows: list[list[str]]) -> str:
    head, *body = rows
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def to_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    return buf.getvalue()
