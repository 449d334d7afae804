import math

import numpy as np
import pytest

from vbclick import metrics
from vbclick.clicklog import query_frequency_index
from vbclick.em import EmConfig, run_em
from vbclick.models import ModelKind, ParamStore, ParamTable, session_log_likelihood

from conftest import constant_params, make_dataset


def pbm(alpha: dict, gamma: dict):
    return ParamStore(ModelKind.PBM, ParamTable("alpha", list(alpha), list(alpha.values())),
                      ParamTable("gamma", list(gamma), list(gamma.values())))


def test_constant_half_predictor():
    data = make_dataset([("q", ["a", "b", "c"], [1, 0, 1]), ("q", ["b"], [0])])
    params = constant_params(ModelKind.UBM, data, alpha=1.0, gamma=0.5)
    assert metrics.log_likelihood(data, params) == pytest.approx(math.log(0.5), abs=1e-12)
    assert metrics.total_perplexity(data, params) == pytest.approx(2.0, abs=1e-12)
    assert metrics.perplexity_at_rank(data, params, 2) == pytest.approx(2.0, abs=1e-12)


def test_perfect_predictor():
    data = make_dataset([("q", ["a", "b"], [1, 0])])
    params = pbm({("q", "a"): 1.0, ("q", "b"): 0.0}, {1: 1.0, 2: 1.0})
    assert metrics.log_likelihood(data, params) == pytest.approx(0.0, abs=1e-11)
    assert metrics.total_perplexity(data, params) == pytest.approx(1.0, abs=1e-11)


def test_single_click_perplexity():
    data = make_dataset([("q", ["a"], [1])])
    params = pbm({("q", "a"): 0.8}, {1: 1.0})
    assert metrics.perplexity_at_rank(data, params, 1) == pytest.approx(1.25, abs=1e-12)


def test_total_is_mean_over_ranks():
    data = make_dataset([("q", ["a", "b"], [0, 1])])
    params = pbm({("q", "a"): 1.0, ("q", "b"): 2 / 3}, {1: 0.5, 2: 1.0})
    assert metrics.total_perplexity(data, params) == pytest.approx(1.75, abs=1e-12)


def test_short_sessions_leave_ranks_out():
    data = make_dataset([("q", ["a"], [1]), ("q", ["a", "b"], [0, 1])])
    params = pbm({("q", "a"): 0.5, ("q", "b"): 0.8}, {1: 1.0, 2: 1.0})
    assert metrics.total_perplexity(data, params) == pytest.approx((2.0 + 1.25) / 2, abs=1e-12)
    with pytest.raises(ValueError, match="rank 3"):
        metrics.perplexity_at_rank(data, params, 3)


def test_max_rank_truncates():
    data = make_dataset([("q", ["a", "b"], [0, 1])])
    params = pbm({("q", "a"): 1.0, ("q", "b"): 2 / 3}, {1: 0.5, 2: 1.0})
    assert metrics.total_perplexity(data, params, max_rank=1) == pytest.approx(2.0, abs=1e-12)


def test_clicked_perplexity():
    data = make_dataset([("q", ["a"], [1]), ("q", ["b"], [1]), ("q", ["c"], [0])])
    params = pbm({("q", "a"): 0.8, ("q", "b"): 0.4, ("q", "c"): 0.1}, {1: 1.0})
    assert metrics.clicked_perplexity(data, params) == pytest.approx(2 ** -(math.log2(0.32) / 2), abs=1e-12)
    assert metrics.clicked_perplexity(data, params) == pytest.approx(1.7678, abs=1e-4)
    with pytest.raises(ValueError):
        metrics.clicked_perplexity(make_dataset([("q", ["c"], [0])]), params)


@pytest.mark.parametrize("new, old, expected", [(1.388, 1.417, 6.95), (1.381, 1.412, 7.52), (1.5, 1.5, 0.0)])
def test_perplexity_improvement(new, old, expected):
    assert metrics.perplexity_improvement(new, old) == pytest.approx(expected, abs=0.01)


def test_improvement_guards():
    assert metrics.ll_improvement(-0.409, -0.433) == pytest.approx(5.54, abs=0.01)
    with pytest.raises(ZeroDivisionError):
        metrics.perplexity_improvement(1.2, 1.0)
    with pytest.raises(ZeroDivisionError):
        metrics.ll_improvement(-0.1, 0.0)


def mrr_fixture():
    alpha = {("q", "a"): 0.9, ("q", "b"): 0.7, ("q", "c"): 0.5, ("q", "d"): 0.3}
    data = make_dataset([
        ("q", ["b", "a"], [0, 1]),
        ("q", ["a", "b"], [0, 1]),
        ("q", ["d", "c", "b", "a"], [1, 1, 0, 0]),
        ("q", ["a", "b"], [0, 0]),
    ])
    return data, pbm(alpha, {r: 0.5 for r in range(1, 5)})


def test_mrr_three_sessions():
    data, params = mrr_fixture()
    assert metrics.mrr(data, params) == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-12)


def test_mrr_top_alpha_everywhere():
    data = make_dataset([("q", ["b", "a"], [0, 1]), ("q", ["a"], [1])])
    params = pbm({("q", "a"): 0.9, ("q", "b"): 0.1}, {1: 0.5, 2: 0.5})
    assert metrics.mrr(data, params) == 1.0


def test_mrr_ties_break_by_document_id():
    data = make_dataset([("q", ["y", "x"], [1, 0])])
    params = pbm({("q", "x"): 0.5, ("q", "y"): 0.5}, {1: 0.5, 2: 0.5})
    assert metrics.mrr(data, params) == 0.5


def test_mrr_without_clicks_fails():
    data = make_dataset([("q", ["a"], [0])])
    with pytest.raises(ValueError):
        metrics.mrr(data, pbm({("q", "a"): 0.5}, {1: 0.5}))


def bucket_fixture():
    train = make_dataset([("rare", ["a"], [0])] + [("common", ["b"], [1])] * 12)
    test = make_dataset([("rare", ["a"], [1]), ("rare", ["a"], [0]),
                         ("common", ["b"], [1]), ("common", ["b"], [1])])
    params = pbm({("rare", "a"): 0.5, ("common", "b"): 0.8}, {1: 1.0})
    return train, test, params


def test_bucketed_report_by_hand():
    train, test, params = bucket_fixture()
    rep = metrics.bucketed_report(test, params, query_frequency_index(train))
    assert set(rep.buckets) == {"1-10", "10-30"}
    assert rep.buckets["1-10"].total_perplexity == pytest.approx(2.0, abs=1e-12)
    assert rep.buckets["10-30"].total_perplexity == pytest.approx(1.25, abs=1e-12)
    assert sum(b.n_impressions for b in rep.buckets.values()) == rep.n_impressions


def test_single_bucket_equals_overall():
    train, test, params = bucket_fixture()
    only = make_dataset([("common", ["b"], [1]), ("common", ["b"], [0])])
    rep = metrics.bucketed_report(only, params, query_frequency_index(train))
    assert list(rep.buckets) == ["10-30"]
    assert rep.buckets["10-30"].summary() == rep.summary()


def test_log_likelihood_agrees_with_session_sums(small_world):
    *_, data = small_world
    params, _ = run_em(data, ModelKind.VUBM1, EmConfig(max_iters=5))
    per_session = [session_log_likelihood(params, s) for s in data]
    expected = math.fsum(per_session) / data.n_impressions()
    assert metrics.log_likelihood(data, params) == pytest.approx(expected, abs=1e-12)


def test_perplexity_never_below_one(small_world):
    *_, data = small_world
    params, _ = run_em(data, ModelKind.UBM, EmConfig(max_iters=5))
    rep = metrics.evaluate(data, params)
    assert all(p >= 1.0 for p in rep.perplexity_per_rank.values())
    assert rep.avg_log_likelihood <= 0


def test_self_baseline_reports_zero_improvement():
    data, params = mrr_fixture()
    rep = metrics.evaluate(data, params)
    tables = metrics.comparison_tables({"base": rep, "model": rep}, baseline="base")
    row = tables["metrics"][2]
    assert row[2] == row[4] == row[6] == "+0.00%"
    assert tables["ranks"][0][1:] == ["rank_1", "rank_2", "rank_3", "rank_4"]


def test_csv_rendering_quotes_fields():
    text = metrics.to_csv([["model", "note"], ["a,b", 'say "hi"']])
    assert text == 'model,note\r\n"a,b","say ""hi"""\r\n'
    assert metrics.to_markdown([["a", "b"], ["1", "2"]]).splitlines()[1] == "|---|---|"


def test_predictions_subset(small_world):
    *_, data = small_world
    params, _ = run_em(data, ModelKind.PBM, EmConfig(max_iters=3))
    pred = metrics.predict(data, params)
    everything = np.ones(len(pred.probs), dtype=bool)
    assert metrics.subset_perplexity(pred, everything) == pytest.approx(
        2 ** (-metrics.log_likelihood(data, params) / math.log(2)), rel=1e-12)
