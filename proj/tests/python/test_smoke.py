import math

import numpy as np
import pytest

import orthokd

TINY = """
model.width = 4
data.classes = 4
data.synthetic.train = 96
data.synthetic.test = 64
data.synthetic.size = 8
train.epochs = 1
train.batch_size = 32
finetune.epochs = 1
finetune.batch_size = 32
score.batch = 8
"""


def test_surplus_and_confidence():
    assert orthokd.surplus(71.23, 73.76, 70.06, 73.30) == pytest.approx(0.71, abs=1e-9)
    r = orthokd.confidence_from_stddev(0.462, 5)
    assert r["errmargin"] == pytest.approx(0.207, abs=1e-3)
    assert r["interval99"] == pytest.approx(0.532, abs=1e-3)
    s = orthokd.confidence_report([1.0, 2.0, 3.0, 4.0, 5.0])
    assert s["avg"] == 3.0 and s["n"] == 5


def test_naswot_extremes():
    ortho = np.array([[1, -1, 1, -1], [1, 1, -1, -1]], dtype=float)
    assert orthokd.naswot_from_jacobians(ortho) == pytest.approx(-2.0, abs=0.01)
    same = np.array([[0.3, -1.2, 2.0, 0.1]] * 2)
    assert orthokd.naswot_from_jacobians(same) <= -9e4


def test_kd_loss_identities():
    y, s, t = [0, 1, 0], [0.2, -1.0, 3.0], [5.0, 0.0, 0.0]
    ce = orthokd.kd_loss(y, s, t, alpha=0.0)
    assert ce == pytest.approx(-math.log(math.exp(-1) / sum(math.exp(v) for v in s)), abs=1e-12)
    assert orthokd.kd_loss(y, s, s, alpha=1.0) == pytest.approx(0.0, abs=1e-12)
    p, q = [0.75, 0.25], [0.4, 0.6]
    expanded = sum(w * -math.log(q[c]) for c, w in orthokd.expand_soft_target(p))
    assert expanded == pytest.approx(orthokd.cross_entropy(p, q), abs=1e-12)
    with pytest.raises(orthokd.ConfigError):
        orthokd.kd_loss(y, s, t, alpha=1.5)


def test_model_round_trip(tmp_path):
    m = orthokd.Model.micro_resnet(1, 4, 10, 3)
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
    logits = m.predict(x)
    assert logits.shape == (2, 10)
    path = str(tmp_path / "m.ckpt")
    m.save(path)
    back = orthokd.Model.load(path)
    assert back.digest() == m.digest()
    np.testing.assert_array_equal(back.predict(x), logits)
    assert math.isfinite(m.naswot(x))
    with pytest.raises(orthokd.ShapeError):
        m.predict(np.zeros((2, 3, 16)))


def test_run_experiment(tmp_path):
    res = orthokd.run_experiment(TINY, {"seeds": "1"}, matrix=True, out_dir=str(tmp_path))
    tags = {r["tag"] for r in res["records"]}
    assert "Self-Distill" in tags and "Unpruned" in tags
    assert len(res["naswot_scratch"]) == 1
    report = orthokd.report_markdown((tmp_path / "results.csv").read_text())
    assert "| label |" in report
    with pytest.raises(orthokd.ConfigError):
        orthokd.run_experiment(TINY, {"train.lrate": "0.1"})
