import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audsr.evalmod import ConfusionCounts, Report, accuracy, f1, report, update


def _counts(tp, fp, tn, fn):
    a = lambda v: np.array([v], dtype=np.int64)  # noqa: E731
    return ConfusionCounts(a(tp), a(fp), a(tn), a(fn))


@pytest.mark.parametrize("p,y,field", [(0.7, 1, "tp"), (0.5, 0, "fp"), (0.2, 0, "tn"), (0.1, 1, "fn")])
def test_update_single_cases(p, y, field):
    c = update(ConfusionCounts.zeros(1), [p], [y], 0.5)
    assert getattr(c, field)[0] == 1 and c.total[0] == 1


def test_update_rejects_bad_threshold_and_shape():
    with pytest.raises(ValueError):
        update(ConfusionCounts.zeros(1), [0.5], [1], 1.0)
    with pytest.raises(ValueError):
        update(ConfusionCounts.zeros(2), [0.5], [1])


def test_f1_cases():
    assert f1(_counts(2, 1, 0, 1))[0] == pytest.approx(2 / 3)
    assert f1(_counts(3, 0, 5, 0))[0] == 1.0
    assert f1(_counts(0, 0, 4, 0))[0] == 0.0


def test_accuracy_cases():
    assert accuracy(_counts(1, 1, 1, 1))[0] == 0.5
    assert accuracy(_counts(2, 0, 3, 0))[0] == 1.0
    with pytest.raises(ValueError):
        accuracy(_counts(0, 0, 0, 0))


def test_report_average_and_layout():
    rep = Report([f"AU{i}" for i in range(6)], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1.0] * 6, 10)
    assert rep.mean_f1 == pytest.approx(0.35)
    rows = rep.to_table().splitlines()
    assert rows[0].split("\t")[-1] == "Avg." and rows[1].split("\t")[-1] == "35.0"
    single = Report(["AU1"], [0.42], [0.9], 3)
    assert single.mean_f1 == 0.42


def test_report_is_byte_stable():
    rng = np.random.default_rng(0)
    p, y = rng.random((20, 3)), rng.random((20, 3)) < 0.4
    a = report(update(ConfusionCounts.zeros(3), p, y), ["x", "y", "z"], split="test")
    b = report(update(ConfusionCounts.zeros(3), p, y), ["x", "y", "z"], split="test")
    assert a.to_text() == b.to_text() and a.to_table() == b.to_table()
    assert a.to_dict()["split"] == "test"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_streaming_order_and_shards_agree(seed, n_shards):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    p, y = rng.random((n, 4)), rng.random((n, 4)) < 0.5
    whole = update(ConfusionCounts.zeros(4), p, y)
    perm = rng.permutation(n)
    shuffled = update(ConfusionCounts.zeros(4), p[perm], y[perm])
    merged = ConfusionCounts.zeros(4)
    for part in np.array_split(np.arange(n), n_shards):
        if len(part):
            merged = merged + update(ConfusionCounts.zeros(4), p[part], y[part])
    for c in (shuffled, merged):
        for field in ("tp", "fp", "tn", "fn"):
            np.testing.assert_array_equal(getattr(c, field), getattr(whole, field))
