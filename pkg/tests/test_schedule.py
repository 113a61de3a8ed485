import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtc.errors import ConfigurationError, RangeError
from xtc.schedule import LRSchedule, budget_preset, lr_at, stage_at, stage_boundaries, total_steps, warmup_steps


def test_stage_examples():
    assert all(stage_at(t, 10, "one_stage")[:2] == (1, 1) for t in range(10))
    assert stage_at(49, 100, "two_stage")[:2] == (0, 1)
    assert stage_at(50, 100, "two_stage")[:2] == (1, 0)
    assert stage_at(32, 99, "three_stage")[:2] == (0, 1)
    assert stage_at(33, 99, "three_stage")[:2] == (1, 1)
    assert stage_at(66, 99, "three_stage")[:2] == (1, 0)


@pytest.mark.parametrize("T", range(1, 1001))
def test_stage_transitions_every_T(T):
    two = [stage_at(t, T, "two_stage")[2] for t in range(T)]
    assert two == [0] * (T // 2) + [1] * (T - T // 2)
    three = [stage_at(t, T, "three_stage")[2] for t in range(T)]
    a, b = T // 3, 2 * T // 3
    assert three == [0] * a + [1] * (b - a) + [2] * (T - b)


@given(st.integers(1, 1000), st.sampled_from(["one_stage", "two_stage", "three_stage"]))
def test_boundaries_partition_training(T, kind):
    bounds = stage_boundaries(T, kind)
    assert bounds[0][0] == 0 and bounds[-1][1] == T
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))


def test_stage_out_of_range():
    with pytest.raises(RangeError):
        stage_at(10, 10, "one_stage")
    with pytest.raises(ConfigurationError):
        stage_at(0, 10, "four_stage")


def test_lr_examples():
    s = LRSchedule(1e-4, 1000)
    assert lr_at(0, s) == 0.0
    assert lr_at(100, s) == 1e-4
    assert lr_at(999, s) == pytest.approx(1e-4 / 900, rel=1e-12)


def test_two_stage_peaks():
    s = LRSchedule(1e-4, 1000, "two_stage")
    lrs = [lr_at(t, s) for t in range(1000)]
    assert max(lrs[:500]) == pytest.approx(2.5e-4, abs=1e-18)
    assert max(lrs[500:]) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(500, s) == 0.0  # fresh warmup at the stage switch


@settings(max_examples=300)
@given(st.integers(1, 1000), st.sampled_from(["one_stage", "two_stage", "three_stage"]),
       st.floats(1e-6, 1e-2))
def test_lr_properties(T, kind, peak):
    s = LRSchedule(peak, T, kind)
    for i, (start, end) in enumerate(s.boundaries):
        if end == start:
            continue
        n = end - start
        w = warmup_steps(n, 0.1)
        top = s.stage_peak(i)
        lrs = [lr_at(t, s) for t in range(start, end)]
        assert lrs[0] == 0.0
        if w < n:
            assert lrs[w] == top  # warmup endpoint is exactly the peak
        assert max(lrs) <= top
        assert all(x >= 0 for x in lrs)
    if kind != "one_stage" and T >= 2:
        assert s.stage_peak(0) / s.stage_peak(1) == pytest.approx(2.5, abs=1e-9)


@given(st.integers(2, 1000))
def test_stage_lr_sum_closed_form(n):
    # warmup ramp plus linear decay integrates to peak * n / 2
    s = LRSchedule(1.0, n)
    assert sum(lr_at(t, s) for t in range(n)) == pytest.approx(n / 2, rel=1e-9)


def test_kind_override():
    s = LRSchedule(1e-4, 100, "one_stage")
    assert lr_at(5, s, kind="two_stage") == 2.5e-4


@pytest.mark.parametrize("label,task,longer,epochs,aug", [
    ("A", "large_no_DA", False, 3, False),
    ("B", "large_no_DA", False, 9, False),
    ("C", "large_no_DA", False, 18, False),
    ("C", "large_no_DA", True, 36, False),
    ("A", "qnli_like", False, 1, True),
    ("B", "qnli_like", False, 3, True),
    ("C", "qnli_like", False, 6, True),
    ("C", "qnli_like", True, 9, True),
    ("B", "small_DA", False, 3, True),
    ("C", "small_DA", False, 12, True),
    ("C", "cola_mrpc_like", False, 12, True),
    ("C", "cola_mrpc_like", True, 18, True),
])
def test_table_presets(label, task, longer, epochs, aug):
    cell = budget_preset(label, task, longer)
    assert (cell.epochs, cell.augmented) == (epochs, aug)


def test_preset_errors():
    with pytest.raises(ConfigurationError):
        budget_preset("D", "qnli_like")
    with pytest.raises(ConfigurationError):
        budget_preset("A", "imagenet")


def test_total_steps():
    assert total_steps(3, 25_000, 32) == 3 * 782
