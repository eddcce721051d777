import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from py_sod_metrics import Smeasure, WeightedFmeasure

from deeptopo.metrics import (
    METRIC_NAMES,
    EvalReport,
    cc_delta,
    e_measure_curve,
    evaluate_pair,
    mae,
    mean_e,
    miou,
    n_components,
    s_measure,
    skeleton_recall,
    skeletonize,
    weighted_f,
)

ALL_3X3 = np.array([[(v >> b) & 1 for b in range(9)] for v in range(512)], dtype=bool).reshape(512, 3, 3)


def flood_components(m):
    """Union-find over 8-neighbours."""
    h, w = m.shape
    parent = list(range(h * w))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for r, c in itertools.product(range(h), range(w)):
        if not m[r, c]:
            continue
        for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and m[rr, cc]:
                parent[find(r * w + c)] = find(rr * w + cc)
    return len({find(r * w + c) for r, c in itertools.product(range(h), range(w)) if m[r, c]})


def naive_mean_e(pred, gt, n=256):
    """Per-threshold alignment matrix, averaged over thresholds k/n."""
    g = gt.astype(float)
    scores = []
    for k in range(1, n + 1):
        fm = (pred >= k / n).astype(float)
        if g.sum() == 0:
            enhanced = 1.0 - fm
        elif g.sum() == g.size:
            enhanced = fm
        else:
            a, b = fm - fm.mean(), g - g.mean()
            den = a * a + b * b
            align = np.zeros_like(den)
            nz = den > 0
            align[nz] = 2 * a[nz] * b[nz] / den[nz]
            enhanced = (align + 1) ** 2 / 4
        scores.append(enhanced.sum() / g.size)
    return float(np.mean(scores))


def sod(metric_cls, key, pred, gt):
    m = metric_cls()
    m.step(pred, gt, normalize=False)
    return float(m.get_results()[key])


def fixtures(seed, count, size=8):
    r = np.random.default_rng(seed)
    out = []
    for i in range(count):
        g = r.random((size, size)) < r.uniform(0.15, 0.6)
        if not g.any():
            g[size // 2, size // 2] = True
        if g.all():
            g[0, 0] = False
        kind = i % 3
        if kind == 0:
            p = r.random((size, size))
        elif kind == 1:
            p = np.clip(g + r.normal(0, 0.3, g.shape), 0, 1)
        else:
            p = np.round(r.random((size, size)) * 255) / 255
        out.append((p, g))
    return out


def test_miou_exhaustive():
    p = ALL_3X3[:, None]
    g = ALL_3X3[None, :]
    inter = (p & g).sum(axis=(2, 3))
    union = (p | g).sum(axis=(2, 3))
    oracle = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    for i in range(512):
        pi = ALL_3X3[i].astype(float)
        got = np.array([miou(pi, ALL_3X3[j]) for j in range(512)])
        np.testing.assert_array_equal(got, oracle[i])


def test_cc_delta_exhaustive():
    counts = np.array([flood_components(m) for m in ALL_3X3])
    assert counts.max() == 4
    got_counts = np.array([n_components(m) for m in ALL_3X3])
    np.testing.assert_array_equal(got_counts, counts)
    for i in range(512):
        got = np.array([cc_delta(ALL_3X3[i], ALL_3X3[j]) for j in range(512)])
        np.testing.assert_array_equal(got, counts[i] - counts)


def test_mae_cases(rng):
    g = rng.random((3, 3)) < 0.5
    assert mae(g.astype(float), g) == 0
    assert mae(1 - g.astype(float), g) == 1
    p = rng.random((3, 3))
    assert mae(p, g) == pytest.approx(sum(abs(p[i, j] - g[i, j]) for i in range(3) for j in range(3)) / 9,
                                      abs=1e-12)
    with pytest.raises(ValueError):
        mae(p + 1, g)
    with pytest.raises(ValueError):
        mae(p, np.full((3, 3), 2))


def test_s_measure_against_reference():
    worst = 0.0
    for p, g in fixtures(0, 60):
        worst = max(worst, abs(s_measure(p, g) - sod(Smeasure, "sm", p, g)))
    assert worst <= 1e-6


def test_s_measure_degenerate_cases():
    g = np.zeros((8, 8), bool)
    assert s_measure(np.zeros((8, 8)), g) == 1
    assert s_measure(np.full((8, 8), 0.3), g) == pytest.approx(0.7)
    assert s_measure(np.full((8, 8), 0.3), ~g) == pytest.approx(0.3)
    fg = np.zeros((8, 8), bool)
    fg[2:5, 3:7] = True
    assert s_measure(fg.astype(float), fg) == 1


def test_weighted_f_against_reference():
    worst = 0.0
    for p, g in fixtures(1, 60):
        worst = max(worst, abs(weighted_f(p, g) - sod(WeightedFmeasure, "wfm", p, g)))
    assert worst <= 1e-6


def test_weighted_f_cases():
    g = np.zeros((40, 40), bool)
    g[8:30, 5:33] = True
    assert weighted_f(g.astype(float), g) == pytest.approx(1.0, abs=1e-12)
    assert weighted_f(np.zeros((40, 40)), g) == pytest.approx(0.0, abs=1e-12)
    # thin objects keep some blurred credit even for an empty prediction, as in the reference
    small = np.zeros((8, 8), bool)
    small[1:4, 2:6] = True
    assert weighted_f(np.zeros((8, 8)), small) == pytest.approx(sod(WeightedFmeasure, "wfm", np.zeros((8, 8)), small))
    empty = np.zeros((8, 8), bool)
    assert weighted_f(np.zeros((8, 8)), empty) == 1.0
    assert weighted_f(np.full((8, 8), 0.2), empty) == 0.0


def test_mean_e_against_transliteration():
    worst = 0.0
    cases = fixtures(2, 40)
    cases += [(np.random.default_rng(3).random((8, 8)), np.zeros((8, 8), bool)),
              (np.random.default_rng(4).random((8, 8)), np.ones((8, 8), bool))]
    for p, g in cases:
        worst = max(worst, abs(mean_e(p, g) - naive_mean_e(p, g)))
    assert worst <= 1e-6


def test_mean_e_cases():
    g = np.zeros((8, 8), bool)
    g[2:6, 1:4] = True
    assert mean_e(g.astype(float), g) == 1.0
    np.testing.assert_array_equal(e_measure_curve(g.astype(float), g), 1.0)
    inv = e_measure_curve(1 - g.astype(float), g)
    other = e_measure_curve(np.random.default_rng(0).random((8, 8)), g)
    assert np.all(inv <= other + 1e-12)
    assert np.all(inv == inv[0])


def test_skeleton_cases():
    line = np.zeros((7, 7), bool)
    line[3, 1:6] = True
    np.testing.assert_array_equal(skeletonize(line), line)
    sq = np.zeros((7, 7), bool)
    sq[1:6, 1:6] = True
    sk = skeletonize(sq)
    assert sk[3, 3] and n_components(sk) == 1 and not (sk & ~sq).any()
    assert not skeletonize(np.zeros((5, 5), bool)).any()


@given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.8))
def test_skeleton_subset_and_components(seed, density):
    from scipy import ndimage

    r = np.random.default_rng(seed)
    m = ndimage.binary_closing(r.random((20, 20)) < density, iterations=1)
    sk = skeletonize(m)
    assert not (sk & ~m).any()
    assert n_components(sk) == n_components(m)


@given(st.integers(0, 2**31 - 1))
def test_skeleton_recall_set_count(seed):
    r = np.random.default_rng(seed)
    p = r.random((6, 6)) < 0.5
    s = r.random((6, 6)) < 0.3
    expect = 1.0 if not s.any() else sum(p[i, j] and s[i, j] for i in range(6) for j in range(6)) / s.sum()
    assert skeleton_recall(p, s) == expect
    assert skeleton_recall(p | s, s) == 1.0


def test_cc_delta_split():
    g = np.zeros((5, 7), bool)
    g[2, 1:6] = True
    p = g.copy()
    p[2, 3] = False
    assert cc_delta(g, g) == 0 and cc_delta(p, g) == 1


def test_perfect_prediction_scores(rng):
    g = np.zeros((16, 16), bool)
    g[3:9, 4:12] = True
    g[12:14, 1:3] = True
    r = evaluate_pair(g.astype(float), g)
    for k in ("s_alpha", "f_beta_w", "mean_e", "iou", "skeleton_recall"):
        assert r[k] == pytest.approx(1.0, abs=1e-12), k
    assert r["mae"] == 0 and r["cc_delta"] == 0


@given(st.integers(0, 2**31 - 1))
def test_ranges_and_purity(seed):
    r = np.random.default_rng(seed)
    g = r.random((10, 10)) < 0.4
    p = r.random((10, 10))
    a, b = evaluate_pair(p, g), evaluate_pair(p.copy(), g.copy())
    assert a == b
    for k in METRIC_NAMES:
        if k != "cc_delta":
            assert 0 <= a[k] <= 1, k
    assert isinstance(a["cc_delta"], int)


def test_report_aggregate_and_tables(rng):
    rep = EvalReport(config={"note": "x"})
    for i, (p, g) in enumerate(fixtures(5, 6)):
        rep.add(f"{i:03d}", p, g)
    agg = rep.aggregate()
    for k in METRIC_NAMES:
        assert agg[k] == pytest.approx(np.mean([rec[k] for rec in rep.records]), abs=1e-15)
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == ["id", *METRIC_NAMES]
    assert len(lines) == 1 + 6 + 1 and lines[-1].startswith("MEAN")
    assert "# note = x" in rep.to_text()
