import numpy as np
import pytest

from deeptopo import checkpoint
from deeptopo.config import resolve
from deeptopo.synthdata import generate_dataset, read_pnm
from deeptopo.metrics import METRIC_NAMES
from deeptopo.train import ENCODER_INIT_NOTE, epoch_order, evaluate, load_model, predict, train


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(4, 96, seed=5)


def cfg(**kw):
    base = {"epochs": 1, "batch_size": 2, "seed": 1}
    base.update(kw)
    return resolve("toy", overrides=base)


def test_epoch_order_is_a_seeded_permutation():
    a = epoch_order(10, 3, 1)
    assert sorted(a) == list(range(10))
    np.testing.assert_array_equal(a, epoch_order(10, 3, 1))
    assert not np.array_equal(a, epoch_order(10, 3, 2))


def test_lambda_zero_total_equals_seg(samples):
    res = train(cfg(lam=0.0), samples)
    for _, _, seg, rec, tot in res.steps:
        assert tot == seg and rec >= 0
    res1 = train(cfg(lam=1.0), samples)
    for _, _, seg, rec, tot in res1.steps:
        assert tot == rec


def test_training_writes_artifacts_and_is_deterministic(samples, tmp_path):
    c = cfg(epochs=2)
    r1 = train(c, samples, tmp_path / "a")
    train(c, samples, tmp_path / "b")
    for sub in ("final", "best"):
        for f in (checkpoint.MANIFEST, checkpoint.BLOB):
            assert (tmp_path / "a" / sub / f).read_bytes() == (tmp_path / "b" / sub / f).read_bytes()
    log = (tmp_path / "a" / "train_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "l_seg", "l_rec", "l_total"] and len(log) == 3
    steps = (tmp_path / "a" / "train_steps.tsv").read_text().splitlines()
    assert len(steps) == 1 + 2 * 2
    assert r1.best_epoch in (1, 2)
    saved, _ = checkpoint.read(tmp_path / "a" / "final")
    assert saved == c.identity()


def test_load_model_round_trip_and_refusal(samples, tmp_path):
    c = cfg()
    res = train(c, samples, tmp_path / "r")
    m = load_model(tmp_path / "r" / "final", c)
    x = np.stack([s.image for s in samples[:2]])
    a = predict(res.model, x)
    b = predict(m, x)
    assert np.max(np.abs(a - b)) < 1e-6
    with pytest.raises(checkpoint.CheckpointError, match="ablation"):
        load_model(tmp_path / "r" / "final", c.replace(ablation="baseline"))


def test_predict_shape_and_range(samples):
    m = train(cfg(), samples).model
    p = predict(m, np.stack([s.image for s in samples]), batch_size=3)
    assert p.shape == (4, 96, 96) and p.dtype == np.float64
    assert p.min() >= 0 and p.max() <= 1


def test_gt_bypass_report(samples, tmp_path):
    rep = evaluate(None, samples, tmp_path / "ev", gt_as_pred=True)
    agg = rep.aggregate()
    for k in METRIC_NAMES:
        if k == "mae":
            assert agg[k] == 0
        elif k != "cc_delta":
            assert agg[k] == 1.0, k
    assert agg["cc_delta"] == 0
    assert len(rep.records) == len(samples)
    text = (tmp_path / "ev" / "report.txt").read_text()
    assert ENCODER_INIT_NOTE in text
    rows = (tmp_path / "ev" / "report.tsv").read_text().splitlines()
    assert len(rows) == 1 + len(samples) + 1
    pgm = read_pnm(tmp_path / "ev" / "predictions" / f"{samples[0].id}.pgm", "P5")
    np.testing.assert_array_equal(pgm == 255, samples[0].mask)


def test_report_recomputable_from_predictions(samples, tmp_path):
    from deeptopo.metrics import evaluate_pair

    m = train(cfg(), samples).model
    rep = evaluate(m, samples, tmp_path / "ev")
    for rec, s in zip(rep.records, samples):
        pred = read_pnm(tmp_path / "ev" / "predictions" / f"{s.id}.pgm", "P5") / 255.0
        again = evaluate_pair(pred, s.mask, s.skeleton)
        assert again == {k: v for k, v in rec.items() if k != "id"}


def test_evaluate_needs_model(samples):
    with pytest.raises(ValueError):
        evaluate(None, samples)
