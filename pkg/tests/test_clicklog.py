import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbclick.clicklog import (
    BUCKET_LABELS, ClickLogError, Dataset, FeatureTable, bucket_label, chronological_split,
    filter_test, load_features, load_sessions, query_frequency_index, save_features, save_sessions,
)

from conftest import make_dataset, make_session


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_load_single_session(tmp_path):
    p = write_lines(tmp_path / "s.jsonl", [
        {"sid": "a", "query": "q", "docs": [{"id": "d1", "click": 0}, {"id": "d2", "click": 1},
                                            {"id": "d3", "click": 0}]}])
    data = load_sessions(p)
    assert len(data) == 1
    s = data.sessions[0]
    assert len(s) == 3
    assert s.clicks == [False, True, False]
    assert s.docs == ["d1", "d2", "d3"]


def test_empty_file_gives_empty_dataset(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("", encoding="utf-8")
    assert len(load_sessions(p)) == 0


@pytest.mark.parametrize("record, message", [
    ({"sid": "a", "query": "q", "docs": []}, "empty session"),
    ({"sid": "a", "docs": [{"id": "d", "click": 0}]}, "missing field"),
    ({"sid": "a", "query": "q", "docs": [{"id": "d", "click": 2}]}, "click must be 0 or 1"),
    ({"sid": "a", "query": "q", "docs": [{"id": "d", "click": 0}, {"id": "d", "click": 1}]},
     "duplicate document"),
])
def test_malformed_lines_are_rejected_with_line_number(tmp_path, record, message):
    ok = {"sid": "z", "query": "q", "docs": [{"id": "d", "click": 0}]}
    p = write_lines(tmp_path / "bad.jsonl", [ok, record])
    with pytest.raises(ClickLogError, match=message) as err:
        load_sessions(p)
    assert "line 2" in str(err.value)


def test_duplicate_session_id_rejected(tmp_path):
    rec = {"sid": "a", "query": "q", "docs": [{"id": "d", "click": 0}]}
    with pytest.raises(ClickLogError, match="duplicate session id"):
        load_sessions(write_lines(tmp_path / "dup.jsonl", [rec, rec]))


def test_invalid_json(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(ClickLogError, match="invalid JSON"):
        load_sessions(p)


@pytest.mark.parametrize("n, expected", [(4, (3, 1)), (100, (75, 25)), (1, (0, 1))])
def test_split_sizes(n, expected):
    data = make_dataset([("q", ["d"], [0])] * n)
    train, test = chronological_split(data, 0.75)
    assert (len(train), len(test)) == expected


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_fraction(fraction):
    with pytest.raises(ValueError):
        chronological_split(make_dataset([("q", ["d"], [0])]), fraction)


def test_filter_drops_unseen_query():
    train = make_dataset([("q1", ["a", "b"], [1, 0])])
    test = make_dataset([("q2", ["a"], [1])])
    assert len(filter_test(test, train)) == 0


def test_filter_drops_unseen_document_and_compacts():
    train = make_dataset([("q", ["a", "c"], [1, 0])])
    test = make_dataset([("q", ["a", "b", "c"], [0, 1, 1])])
    out = filter_test(test, train)
    s = out.sessions[0]
    assert s.docs == ["a", "c"]
    assert s.clicks == [False, True]


def test_filter_is_noop_inside_vocabulary():
    train = make_dataset([("q", ["a", "b"], [1, 0]), ("r", ["c"], [0])])
    test = make_dataset([("q", ["b", "a"], [0, 0]), ("r", ["c"], [1])])
    assert filter_test(test, train) == test


@pytest.mark.parametrize("count, label", [(1, "1-10"), (7, "1-10"), (9, "1-10"), (10, "10-30"),
                                          (29, "10-30"), (30, "30-100"), (9999, "2000-10000"),
                                          (10000, ">=10000")])
def test_bucket_edges_are_left_closed(count, label):
    assert bucket_label(count) == label


def test_query_frequency_index():
    train = make_dataset([("q", ["a"], [0])] * 7 + [("r", ["a"], [0])] * 10)
    idx = query_frequency_index(train)
    assert idx.bucket("q") == "1-10"
    assert idx.bucket("r") == "10-30"
    assert idx.bucket("unseen") is None
    assert len(query_frequency_index(Dataset())) == 0


def test_feature_table_validation(tmp_path):
    with pytest.raises(ClickLogError):
        FeatureTable(["a"], np.zeros((1, 5)))
    with pytest.raises(ClickLogError):
        FeatureTable(["a"], np.full((1, 64), np.nan))
    table = FeatureTable(["a", "b"], np.arange(128.0).reshape(2, 64))
    with pytest.raises(ValueError):
        table.matrix[0, 0] = 1.0
    with pytest.raises(ClickLogError, match="missing"):
        table.rows(["a", "zz"])


def test_features_round_trip(tmp_path, rng):
    table = FeatureTable(["x", "y,z", "w"], rng.standard_normal((3, 64)))
    save_features(table, tmp_path / "f.csv")
    back = load_features(tmp_path / "f.csv")
    assert back.doc_ids == table.doc_ids
    assert np.array_equal(back.matrix, table.matrix)


def test_features_header_checked(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("doc,f1\n", encoding="utf-8")
    with pytest.raises(ClickLogError, match="header"):
        load_features(p)


# -- properties ----------------------------------------------------------------

names = st.text(alphabet="abcdefgh", min_size=1, max_size=3)


@st.composite
def datasets(draw, max_sessions=12):
    n = draw(st.integers(0, max_sessions))
    sessions = []
    for i in range(n):
        docs = draw(st.lists(names, min_size=1, max_size=5, unique=True))
        clicks = draw(st.lists(st.booleans(), min_size=len(docs), max_size=len(docs)))
        sessions.append(make_session(f"s{i}", draw(names), docs, clicks))
    return Dataset(sessions)


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_sessions_round_trip_bytes(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("rt")
    save_sessions(data, d / "a.jsonl")
    loaded = load_sessions(d / "a.jsonl")
    assert loaded == data
    save_sessions(loaded, d / "b.jsonl")
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl").read_bytes()


@settings(max_examples=80, deadline=None)
@given(datasets(), datasets())
def test_filter_is_idempotent(test, train):
    once = filter_test(test, train)
    assert filter_test(once, train) == once
    assert once.queries() <= train.queries()
    assert once.documents() <= train.documents()


@settings(max_examples=80, deadline=None)
@given(datasets(max_sessions=30).filter(lambda d: len(d) > 0), st.floats(0.01, 0.99))
def test_split_is_an_ordered_partition(data, fraction):
    train, test = chronological_split(data, fraction)
    assert train.sessions + test.sessions == data.sessions


@given(st.integers(1, 10**7))
def test_every_count_has_one_bucket(count):
    assert bucket_label(count) in BUCKET_LABELS
