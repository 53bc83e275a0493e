import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cascadeseg.metrics import REGIONS, dice, evaluate, mean_scores, summarize


def test_region_definitions():
    assert REGIONS == {"WT": (1, 2, 3), "TC": (1, 3), "EC": (3,)}


def test_dice_cases():
    a = np.zeros(30, bool)
    a[:10] = True
    assert dice(a, a) == 1.0
    b = np.zeros(30, bool)
    b[20:] = True
    assert dice(a, b) == 0.0
    c = np.zeros(30, bool)
    c[5:15] = True  # |P|=10, |T|=10, overlap 5
    assert dice(a, c) == 0.5
    assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


def test_dice_extent_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))


def test_evaluate_perfect_and_empty_enhancing():
    t = np.array([0, 1, 2, 2])
    assert evaluate(t, t) == {"WT": 1.0, "TC": 1.0, "EC": 1.0}


def test_edema_labelled_as_core_4cube():
    truth = np.zeros((4, 4, 4), np.uint8)
    truth[1:3, 1:3, 1:3] = 1  # 8 core voxels
    truth[0, :, :] = 2  # 16 edema voxels
    pred = truth.copy()
    pred[0, :, :] = 1
    s = evaluate(pred, truth)
    assert s["WT"] == 1.0
    # TC: |P| = 24, |T| = 8, overlap 8 -> 16/32
    assert s["TC"] == pytest.approx(0.5)
    assert s["EC"] == 1.0


vols = arrays(np.uint8, (4, 3, 3), elements=st.integers(0, 3))


@given(vols, vols)
def test_dice_symmetry_range_and_nesting(p, t):
    for r, cls in REGIONS.items():
        a, b = np.isin(p, cls), np.isin(t, cls)
        d = dice(a, b)
        assert d == dice(b, a)
        assert 0.0 <= d <= 1.0
    assert not (np.isin(p, REGIONS["EC"]) & ~np.isin(p, REGIONS["TC"])).any()
    assert not (np.isin(p, REGIONS["TC"]) & ~np.isin(p, REGIONS["WT"])).any()


def test_summarize_statistics():
    scores = [{"WT": v, "TC": v / 2, "EC": 1.0} for v in (0.2, 0.4, 0.6, 0.8)]
    s = summarize(scores)
    assert s["WT"]["mean"] == pytest.approx(0.5)
    assert s["WT"]["median"] == pytest.approx(0.5)
    assert s["WT"]["q25"] == pytest.approx(0.35)
    assert s["WT"]["q75"] == pytest.approx(0.65)
    assert s["WT"]["std"] == pytest.approx(np.sqrt(0.05))
    assert s["EC"]["std"] == 0.0
    assert mean_scores(scores)["TC"] == pytest.approx(0.25)
