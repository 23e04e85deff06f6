"""rewards: IoU, greedy box overlap, mask metrics, clamped reward."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchwork import rewards as rw
from patchwork.rewards import Box


def random_box(rng, score=None):
    y0, y1 = np.sort(rng.uniform(0, 1, 2))
    x0, x1 = np.sort(rng.uniform(0, 1, 2))
    if y1 - y0 < 1e-3 or x1 - x0 < 1e-3:
        return random_box(rng, score)
    s = rng.uniform(0, 1) if score is None else score
    return Box(float(y0), float(x0), float(y1), float(x1), float(s))


def area_iou(a, b):
    """Rasterless oracle via explicit interval overlap."""
    oy = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ox = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = oy * ox
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def exhaustive_greedy(gt, preds):
    """Greedy matching by enumerating every (gt, pred) pair in descending IoU
    order (ties by index) and accepting a pair when both ends are free."""
    kept = [p for p in preds if p.score > 0.5]
    if not gt:
        return 1.0 if not kept else 0.0
    pairs = [(area_iou(g.coords(), p.coords()), i, j) for (i, g), (j, p) in
             itertools.product(enumerate(gt), enumerate(kept))]
    pairs.sort(key=lambda e: (-e[0], e[1], e[2]))
    used_g, used_p, total = set(), set(), 0.0
    for v, i, j in pairs:
        if v > 0 and i not in used_g and j not in used_p:
            used_g.add(i)
            used_p.add(j)
            total += v
    return total / len(gt)


def best_matching(gt, preds):
    kept = [p for p in preds if p.score > 0.5]
    if not gt:
        return 1.0 if not kept else 0.0
    best = 0.0
    n = max(len(gt), len(kept))
    for perm in itertools.permutations(range(n)):
        s = sum(area_iou(gt[i].coords(), kept[perm[i]].coords())
                for i in range(len(gt)) if perm[i] < len(kept))
        best = max(best, s)
    return best / len(gt)


def test_iou_examples():
    a = Box(0, 0, 1, 0.5)
    assert rw.iou(a, a) == 1.0
    assert rw.iou(Box(0, 0, 0.2, 0.2), Box(0.5, 0.5, 1, 1)) == 0.0
    assert rw.iou(a, Box(0, 0, 1, 1)) == pytest.approx(0.5)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        Box(0.5, 0, 0.5, 1)


def test_box_overlap_examples():
    g = Box(0.1, 0.1, 0.5, 0.5)
    assert rw.box_overlap_metric([g], [Box(*g.coords(), score=0.9)]) == 1.0
    assert rw.box_overlap_metric([g], [Box(*g.coords(), score=0.4)]) == 0.0
    # pred covering half of gt1 -> IoU 0.5; gt2 unmatched
    g1, g2 = Box(0, 0, 0.4, 0.4), Box(0.6, 0.6, 1, 1)
    p = Box(0, 0, 0.4, 0.2, 0.9)
    assert rw.iou(g1, p) == pytest.approx(0.5)
    assert rw.box_overlap_metric([g1, g2], [p]) == pytest.approx(0.25)
    assert exhaustive_greedy([g1, g2], [p]) == pytest.approx(0.25)


def test_empty_gt_convention():
    assert rw.box_overlap_metric([], []) == 1.0
    assert rw.box_overlap_metric([], [Box(0, 0, 1, 1, 0.3)]) == 1.0  # filtered out
    assert rw.box_overlap_metric([], [Box(0, 0, 1, 1, 0.9)]) == 0.0


def test_score_exactly_half_is_filtered():
    g = Box(0, 0, 1, 1)
    assert rw.box_overlap_metric([g], [Box(0, 0, 1, 1, 0.5)]) == 0.0


def test_greedy_against_exhaustive_oracle_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        gt = [random_box(rng, 1.0) for _ in range(rng.integers(0, 4))]
        preds = [random_box(rng) for _ in range(rng.integers(0, 4))]
        f = rw.box_overlap_metric(gt, preds)
        assert f == pytest.approx(exhaustive_greedy(gt, preds), abs=1e-12)
        # greedy is a 1/2-approximation of the best one-to-one matching
        best = best_matching(gt, preds)
        assert best / 2 - 1e-12 <= f <= best + 1e-12


def test_mask_miou_examples():
    a = np.zeros((8, 8), bool)
    a[0:4, 0:4] = True
    assert rw.mask_miou(a, a) == 1.0
    b = np.zeros((8, 8), bool)
    b[4:, 4:] = True
    assert rw.mask_miou(a, b) == 0.0
    c = np.zeros((8, 8), bool)
    c[0:4, 2:6] = True
    assert rw.mask_miou(a, c) == pytest.approx(1 / 3)
    assert rw.mask_miou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        rw.mask_miou(a, a[:4])


def test_mask_miou_matches_set_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = rng.random((6, 7)) < rng.random()
        p = rng.random((6, 7)) < rng.random()
        gs = {(int(i), int(j)) for i, j in zip(*np.nonzero(g))}
        ps = {(int(i), int(j)) for i, j in zip(*np.nonzero(p))}
        expect = len(gs & ps) / len(gs | ps) if gs | ps else 1.0
        assert rw.mask_miou(g, p) == pytest.approx(expect)


def test_boundary_f_examples():
    sq = np.zeros((16, 16), bool)
    sq[4:10, 4:10] = True
    assert rw.boundary_f_measure(sq, sq) == 1.0
    assert rw.boundary_f_measure(sq, np.zeros_like(sq)) == 0.0
    shifted = np.roll(sq, 1, axis=1)
    assert rw.boundary_f_measure(sq, shifted, 1) == 1.0
    assert rw.boundary_f_measure(sq, shifted, 0) < 1.0


def test_td0_reward_examples():
    assert rw.td0_reward(0.8, 0.6) == pytest.approx(0.2)
    assert rw.td0_reward(0.6, 0.8) == 0.0
    for x in np.linspace(0, 1, 11):
        assert rw.td0_reward(x, x) == 0.0


@given(st.floats(0, 1), st.floats(0, 1))
def test_td0_reward_clamp_exact(a, b):
    r = rw.td0_reward(a, b)
    assert 0 <= r <= 1
    assert r == (a - b if a > b else 0.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_metrics_bounded_and_order_free(seed):
    rng = np.random.default_rng(seed)
    gt = [random_box(rng, 1.0) for _ in range(rng.integers(0, 4))]
    preds = [random_box(rng) for _ in range(rng.integers(0, 5))]
    f = rw.box_overlap_metric(gt, preds)
    assert 0 <= f <= 1
    # permutation of either list leaves f unchanged unless exact IoU ties exist
    g2 = [gt[i] for i in rng.permutation(len(gt))]
    p2 = [preds[i] for i in rng.permutation(len(preds))]
    assert rw.box_overlap_metric(g2, p2) == pytest.approx(f, abs=1e-12)
    m1, m2 = rng.random((5, 5)) < 0.5, rng.random((5, 5)) < 0.5
    assert 0 <= rw.mask_miou(m1, m2) <= 1
    assert rw.mask_miou(m1, m2) == rw.mask_miou(m2, m1)


def test_box_file_roundtrip(tmp_path):
    frames = [[Box(0.1, 0.2, 0.3, 0.4)], [], [Box(0, 0, 1, 1), Box(0.5, 0.5, 0.75, 1)]]
    rw.write_box_file(tmp_path / "gt.txt", frames)
    back = rw.read_box_file(tmp_path / "gt.txt")
    assert [[b.coords() for b in f] for f in back] == [[b.coords() for b in f] for f in frames]
    text = (tmp_path / "gt.txt").read_text().split("\n")
    assert text[0] == "0.100000 0.200000 0.300000 0.400000" and text[1] == ""
