import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vnn_brainage.dataset import (
    Cohort,
    Group,
    SplitSpec,
    Subject,
    apportion,
    filter_group,
    load_cohort,
    load_cohort_json,
    save_cohort,
    save_cohort_json,
    split,
    standardize,
)
from vnn_brainage.errors import DataError

from conftest import make_cohort


def _write(tmp_path, text, name="c.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_rows_four_features(tmp_path):
    path = _write(
        tmp_path,
        "id,age,group,cdr,f1,f2,f3,f4\n"
        "a,60,HC,,2.1,2.2,2.3,2.4\n"
        "b,70.5,mci,1.5,2.0,2.1,2.2,2.3\n"
        "c,80,Ad,4,1.9,2.0,2.1,2.2\n",
    )
    c = load_cohort(path, "m4")
    assert (c.m, c.n, c.scale_tag) == (4, 3, "m4")
    assert c.ids == ["a", "b", "c"]
    assert c.groups == [Group.HC, Group.MCI, Group.AD]
    assert [s.cdr for s in c.subjects] == [None, 1.5, 4.0]
    np.testing.assert_array_equal(c.X[1], [2.0, 2.1, 2.2, 2.3])


def test_load_without_cdr_column(tmp_path):
    path = _write(tmp_path, "id,age,group,f1,f2\nx,61,HC,1,2\ny,62,AD,3,4\n")
    c = load_cohort(path)
    assert c.m == 2
    assert all(s.cdr is None for s in c.subjects)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("id,age,group,f1,f2\na,60,HC,1,2\nb,61,HC,1\n", "row 3"),
        ("id,age,group,f1,f2\na,60,HC,1,2\nb,61,HC,1,zz\n", "row 3"),
        ("id,age,group,f1\na,60,HC,1\na,61,HC,2\n", "row 3"),
        ("name,age,group,f1\na,60,HC,1\n", "header"),
        ("id,age,group,f1,f3\na,60,HC,1,2\n", "f1..fm"),
        ("id,age,group,f1\na,60,XYZ,1\n", "row 2"),
        ("id,age,group,f1\na,-3,HC,1\n", "row 2"),
    ],
)
def test_load_errors_name_the_row(tmp_path, text, fragment):
    with pytest.raises(DataError, match=fragment):
        load_cohort(_write(tmp_path, text))


def test_ragged_row_error_mentions_row_number(tmp_path):
    path = _write(tmp_path, "id,age,group,f1,f2,f3\na,60,HC,1,2,3\nb,61,HC,1,2,3\nc,62,HC,1,2\n")
    with pytest.raises(DataError, match="row 4"):
        load_cohort(path)


def test_save_load_roundtrip_exact(tmp_path):
    c = make_cohort(n=12, m=5, seed=3, groups=[Group.HC, Group.MCI, Group.AD] * 4, cdr=True)
    save_cohort(c, tmp_path / "c.csv")
    back = load_cohort(tmp_path / "c.csv", c.scale_tag)
    assert back.ids == c.ids
    assert back.groups == c.groups
    np.testing.assert_array_equal(back.ages, c.ages)
    np.testing.assert_array_equal(back.X, c.X)
    assert [s.cdr for s in back.subjects] == [s.cdr for s in c.subjects]


def test_json_roundtrip(tmp_path):
    c = make_cohort(n=6, m=3, seed=1, groups=[Group.HC, Group.AD] * 3, cdr=True)
    save_cohort_json(c, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert {"id", "age", "group", "cdr", "features"} <= set(doc["subjects"][0])
    back = load_cohort_json(tmp_path / "c.json")
    assert back.ids == c.ids and back.m == c.m
    np.testing.assert_array_equal(back.X, c.X)


def test_cohort_invariants():
    s1 = Subject("a", 60.0, Group.HC, [1.0, 2.0])
    with pytest.raises(DataError):
        Cohort(3, "x", (s1,))
    with pytest.raises(DataError):
        Cohort(2, "x", (s1, Subject("a", 61.0, Group.HC, [1.0, 2.0])))
    with pytest.raises(DataError):
        Subject("b", 0.0, Group.HC, [1.0])
    with pytest.raises(DataError):
        Subject("b", 50.0, Group.HC, [1.0], cdr=-1.0)


def test_split_spec_validation():
    with pytest.raises(DataError):
        SplitSpec(0.8, 0.2, 0.0)
    with pytest.raises(DataError):
        SplitSpec(0.8, 0.1, 0.2)


def test_split_n10_sizes():
    train, val, test = split(make_cohort(n=10), SplitSpec(seed=7))
    assert (train.n, val.n, test.n) == (8, 1, 1)


def test_split_deterministic():
    c = make_cohort(n=37)
    a = split(c, SplitSpec(seed=5))
    b = split(c, SplitSpec(seed=5))
    assert [p.ids for p in a] == [p.ids for p in b]
    assert [p.ids for p in a] != [p.ids for p in split(c, SplitSpec(seed=6))]


def test_split_stratified_counts():
    c = make_cohort(n=100, groups=[Group.HC] * 60 + [Group.AD] * 40)
    train, val, test = split(c, SplitSpec(seed=2, stratify_by_group=True))
    counts = train.group_counts()
    assert counts[Group.HC] == 48 and counts[Group.AD] == 32
    assert val.group_counts() == {Group.HC: 6, Group.AD: 4}


def test_split_empty_part_error():
    with pytest.raises(DataError, match="empty"):
        split(make_cohort(n=4), SplitSpec(seed=0))


@settings(max_examples=1000, deadline=None)
@given(
    n=st.integers(10, 80),
    seed=st.integers(0, 2**32 - 1),
    train=st.integers(50, 85),
    stratify=st.booleans(),
)
def test_split_is_partition(n, seed, train, stratify):
    val = (100 - train) // 2
    spec = SplitSpec(train / 100, val / 100, (100 - train - val) / 100, seed, stratify)
    labels = [Group.HC, Group.MCI, Group.AD]
    c = make_cohort(n=n, m=2, groups=[labels[i % 3] for i in range(n)])
    try:
        parts = split(c, spec)
    except DataError:
        return
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(c.ids)
    assert len(set(ids)) == n


def test_apportion_largest_remainder():
    assert apportion(10, [0.8, 0.1, 0.1]) == [8, 1, 1]
    assert apportion(7, [0.5, 0.5]) == [4, 3]  # tie goes to the earlier part
    assert sum(apportion(101, [0.8, 0.1, 0.1])) == 101


def test_filter_group():
    c = make_cohort(n=5, groups=[Group.HC] * 3 + [Group.AD] * 2)
    assert filter_group(c, {Group.HC}).n == 3
    assert filter_group(c, set()).n == 0
    mixed = make_cohort(n=12, groups=[Group.HC, Group.MCI, Group.AD, Group.OTHER] * 3)
    counts = mixed.group_counts()
    sub = filter_group(mixed, {"MCI", "ad"})
    assert sub.n == counts[Group.MCI] + counts[Group.AD]
    assert sub.ids == [s.id for s in mixed.subjects if s.group in (Group.MCI, Group.AD)]


def test_standardize():
    c = make_cohort(n=40, m=4, seed=9)
    z, mean, std = standardize(c)
    np.testing.assert_allclose(z.X.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.X.std(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(z.X * std + mean, c.X, atol=1e-12)
