import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relsnap.store import (
    STATIC_TIME,
    EntityRow,
    LoadError,
    RelationalDatabase,
    Table,
    TaskSpec,
    load_database,
    load_task,
    make_database,
    save_database,
    save_task,
    slice_history,
    split_times,
    validate,
)

from oracles import random_db, shop_defs, week_db


def write_csvs(tmp_path, tables: dict[str, str], schema: dict):
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    data = tmp_path / "data"
    data.mkdir()
    for name, text in tables.items():
        (data / f"{name}.csv").write_text(text)
    return tmp_path / "schema.json", data


SHOP_SCHEMA = {
    "tables": [
        {"name": "users", "pk_col": "user_id", "static": True, "feature_cols": ["age"]},
        {"name": "products", "pk_col": "product_id", "static": True, "feature_cols": ["price"]},
        {"name": "transactions", "pk_col": "tx_id", "timestamp_col": "ts", "feature_cols": ["amount"],
         "fk_cols": {"user_id": "users", "product_id": "products"}},
    ]
}


def test_empty_schema_gives_empty_database(tmp_path):
    schema, data = write_csvs(tmp_path, {}, {"tables": []})
    db = load_database(schema, data)
    assert db.n_tables == 0
    assert db.links == frozenset()
    assert len(db) == 0


def test_shop_fixture_links(tmp_path):
    schema, data = write_csvs(tmp_path, {
        "users": "user_id,age\n1,30\n2,40\n",
        "products": "product_id,price\n1,9.5\n2,3\n",
        "transactions": "tx_id,user_id,product_id,amount,ts\n1,1,2,5,1\n2,2,1,7,2\n3,1,1,1,3\n",
    }, SHOP_SCHEMA)
    db = load_database(schema, data)
    assert db.n_tables == 3
    assert db.links == {(2, 0), (2, 1)}
    assert db.entity("transactions", 2).fks == (2, 1, 0)


def test_dangling_fk_names_table_and_row(tmp_path):
    schema, data = write_csvs(tmp_path, {
        "users": "user_id,age\n1,30\n",
        "products": "product_id,price\n1,9.5\n",
        "transactions": "tx_id,user_id,product_id,amount,ts\n1,1,1,5,1\n2,99,1,7,2\n",
    }, SHOP_SCHEMA)
    with pytest.raises(LoadError) as err:
        load_database(schema, data)
    assert err.value.table == "transactions"
    assert err.value.row == 2
    assert "fk-dangling" in str(err.value)


def test_duplicate_pk_in_csv_reports_second_occurrence(tmp_path):
    schema, data = write_csvs(tmp_path, {
        "users": "user_id,age\n1,30\n1,31\n",
        "products": "product_id,price\n1,9.5\n",
        "transactions": "tx_id,user_id,product_id,amount,ts\n",
    }, SHOP_SCHEMA)
    with pytest.raises(LoadError) as err:
        load_database(schema, data)
    assert (err.value.table, err.value.row) == ("users", 2)


@pytest.mark.parametrize("text, fragment", [
    ("tx_id,user_id,product_id,amount,ts\n1,1,1,abc,1\n", "bad feature"),
    ("tx_id,user_id,product_id,amount,ts\n1,x,1,1,1\n", "not an integer"),
    ("tx_id,user_id,product_id,amount\n1,1,1,1\n", "missing columns"),
    ("tx_id,user_id,product_id,amount,ts\n1,1,1,1\n", "expected 5 fields"),
])
def test_malformed_rows(tmp_path, text, fragment):
    schema, data = write_csvs(tmp_path, {
        "users": "user_id,age\n1,30\n",
        "products": "product_id,price\n1,9.5\n",
        "transactions": text,
    }, SHOP_SCHEMA)
    with pytest.raises(LoadError, match=fragment):
        load_database(schema, data)


def test_unknown_fk_target_in_schema(tmp_path):
    bad = {"tables": [{"name": "a", "fk_cols": {"b_id": "b"}}]}
    schema, data = write_csvs(tmp_path, {"a": "id,b_id,timestamp\n"}, bad)
    with pytest.raises(LoadError, match="unknown table"):
        load_database(schema, data)


def test_valid_fixture_has_empty_report():
    assert validate(week_db()).ok


def test_duplicate_pk_is_one_violation():
    n = 3
    users = [EntityRow(1, (0,) * n, (1.0,), STATIC_TIME), EntityRow(1, (0,) * n, (2.0,), STATIC_TIME)]
    db = make_database(shop_defs(), {"users": users})
    report = validate(db)
    assert report.kinds() == ["pk-duplicate"]


def test_zero_fk_means_no_link():
    txs = [EntityRow(k, (0, 0, 0), (1.0,), k) for k in range(1, 5)]
    db = make_database(shop_defs(), {"transactions": txs})
    assert validate(db).ok
    assert db.links == frozenset()


@pytest.mark.parametrize("row, kind", [
    (EntityRow(1, (0, 0, 0), (1.0,), 5), "timestamp-static"),
    (EntityRow(-2, (0, 0, 0), (1.0,), STATIC_TIME), "pk-nonpositive"),
    (EntityRow(1, (0, 0, 0), (float("nan"),), STATIC_TIME), "feature-nonfinite"),
    (EntityRow(1, (0, 0, -1), (1.0,), STATIC_TIME), "fk-negative"),
    (EntityRow(1, (0, 0, 4), (1.0,), STATIC_TIME), "fk-undeclared"),
])
def test_user_row_violations(row, kind):
    db = make_database(shop_defs(), {"users": [row]})
    assert kind in validate(db).kinds()


def test_negative_dynamic_timestamp():
    db = make_database(shop_defs(), {"transactions": [EntityRow(1, (0, 0, 0), (1.0,), -3)]})
    assert validate(db).kinds() == ["timestamp-negative"]


def test_table_ids_must_be_positional():
    users = Table.from_rows(shop_defs()[1], [], 3)
    with pytest.raises(ValueError, match="expected 0"):
        RelationalDatabase((users,))


def test_slice_at_max_time_is_identity():
    db = week_db()
    cut = slice_history(db, db.max_time())
    for a, b in zip(db.tables, cut.tables):
        assert np.array_equal(a.pk, b.pk) and np.array_equal(a.fk, b.fk) and np.array_equal(a.time, b.time)


def test_slice_keeps_rows_up_to_t():
    txs = [EntityRow(k, (0, 0, 0), (float(k),), k) for k in (1, 2, 3)]
    db = make_database(shop_defs(), {"transactions": txs})
    cut = slice_history(db, 2)
    # brute-force filter over rows
    expect = sorted(r.pk for r in txs if r.timestamp <= 2)
    assert cut.table("transactions").pk.tolist() == expect


def test_slice_at_zero_keeps_only_statics():
    cut = slice_history(week_db(), 0)
    assert len(cut.table("transactions")) == 0
    assert len(cut.table("users")) == 2 and len(cut.table("products")) == 3


def test_slice_rejects_negative_time():
    with pytest.raises(ValueError):
        slice_history(week_db(), -1)


def test_slice_zeroes_orphaned_fks():
    db = make_database(shop_defs(True), {
        "transactions": [EntityRow(1, (0, 0, 0, 0), (1.0,), 5)],
        "returns": [EntityRow(1, (0, 0, 1, 0), (1.0,), 2)],
    })
    cut = slice_history(db, 3)
    assert cut.table("returns").fk[0, 2] == 0
    assert validate(cut).ok


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(0, 12))
def test_slice_is_valid_and_causal(seed, t):
    db = random_db(np.random.default_rng(seed), max_rows=60)
    cut = slice_history(db, t)
    assert validate(cut).ok
    for tab in cut.tables:
        assert (tab.time <= t).all()
    # every kept row keeps its features and timestamp
    for a, b in zip(db.tables, cut.tables):
        idx, found = a.locate(b.pk)
        assert found.all()
        assert np.array_equal(a.x[idx], b.x) and np.array_equal(a.time[idx], b.time)


def _task(seed_times=range(10)):
    st_ = np.array(list(seed_times))
    return TaskSpec("t", 0, "binary-classification", 1, st_, np.ones(len(st_), int), st_, np.zeros(len(st_)))


def test_split_six_two_two():
    tr, va, te = split_times(_task(), 6, 2, 2)
    assert tr == [0, 1, 2, 3, 4, 5] and va == [6, 7] and te == [8, 9]


@given(n=st.integers(0, 20), a=st.integers(0, 8), b=st.integers(0, 8), c=st.integers(0, 8))
def test_split_is_chronological(n, a, b, c):
    task = _task(range(0, 3 * n, 3))
    if a + b + c > n:
        with pytest.raises(ValueError):
            split_times(task, a, b, c)
        return
    tr, va, te = split_times(task, a, b, c)
    seq = tr + va + te
    assert seq == sorted(seq) and len(set(seq)) == len(seq)
    assert (len(tr), len(va), len(te)) == (a, b, c)


def test_task_rejects_bad_labels():
    with pytest.raises(ValueError):
        TaskSpec("t", 0, "binary-classification", 1, [0], [1], [0], [0.5])
    with pytest.raises(ValueError):
        TaskSpec("t", 0, "ranking", 1, [0], [1], [0], [0.0])
    with pytest.raises(ValueError):
        TaskSpec("t", 0, "regression", 1, [3, 1], [1], [0], [0.0])


def test_round_trip_through_files(tmp_path):
    db = random_db(np.random.default_rng(3), max_rows=80)
    save_database(db, tmp_path / "schema.json", tmp_path / "data")
    back = load_database(tmp_path / "schema.json", tmp_path / "data")
    for a, b in zip(db.tables, back.tables):
        for name in ("pk", "fk", "x", "time"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), (a.name, name)
    users = db.tables[0].pk
    task = TaskSpec("churn", 0, "binary-classification", 2, [1, 3], np.tile(users, 2),
                    np.repeat([1, 3], len(users)), np.zeros(2 * len(users)))
    save_task(task, back, tmp_path / "churn")
    again = load_task(tmp_path / "churn.json", back)
    assert again.target_table == 0 and again.horizon == 2
    pks, y = again.at(3)
    assert np.array_equal(pks, np.sort(db.tables[0].pk)) and (y == 0).all()


def test_task_with_unknown_entity_fails_to_load(tmp_path):
    db = week_db()
    task = TaskSpec("t", 0, "regression", 1, [1], [7], [1], [1.0])
    save_task(task, db, tmp_path / "t")
    with pytest.raises(LoadError, match="missing"):
        load_task(tmp_path / "t.json", db)
