import json
import math

import numpy as np
import pytest

from tfdiag import tensor as T
from tfdiag.data import PRESETS, SignalDataset, make_dataset
from tfdiag.errors import ContractError, NumericError
from tfdiag.layers import BatchNorm1d
from tfdiag.model import FEMCFormer, ModelConfig
from tfdiag.tensor import Tensor, backward, gradcheck
from tfdiag.train import (Adam, TrainConfig, TrainingDiverged, accuracy, confusion_matrix, cross_entropy,
                          evaluate, infer, recalibrate_batchnorm, scatter_metrics, train)


def brute_scatter(x, y):
    """Double loop over samples and feature pairs."""
    n, d = x.shape
    classes = sorted(set(y.tolist()))
    grand = [sum(x[i, a] for i in range(n)) / n for a in range(d)]
    sb = np.zeros((d, d))
    sw = np.zeros((d, d))
    for k in classes:
        members = [i for i in range(n) if y[i] == k]
        mk = [sum(x[i, a] for i in members) / len(members) for a in range(d)]
        for a in range(d):
            for b in range(d):
                sb[a, b] += len(members) * (mk[a] - grand[a]) * (mk[b] - grand[b])
                for i in members:
                    sw[a, b] += (x[i, a] - mk[a]) * (x[i, b] - mk[b])
    return sb, sw


# --- loss ---------------------------------------------------------------------------------

def test_cross_entropy_value_and_uniform_case():
    logits = np.array([[2.0, 1.0, 0.1], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    loss = cross_entropy(Tensor(logits), labels).item()
    p0 = np.exp(2.0) / np.exp([2.0, 1.0, 0.1]).sum()
    assert loss == pytest.approx((-math.log(p0) + math.log(3)) / 2, abs=1e-14)


def test_cross_entropy_is_stable_for_large_logits():
    loss = cross_entropy(Tensor([[1000.0, 0.0]]), [1]).item()
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 4)
    rep = gradcheck(lambda t: cross_entropy(t, labels), Tensor(rng.standard_normal((4, 5))), 1e-5, 1e-7)
    assert rep.passed


def test_cross_entropy_label_errors():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# --- optimizer --------------------------------------------------------------------------------

def test_adam_first_steps_match_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    p.grad = g1.copy()
    opt.step()
    # first bias-corrected step is lr * sign(g) (up to eps)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)
    p.grad = g2.copy()
    opt.step()
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert np.allclose(p.data, np.array([0.9, -1.9]) - step, atol=1e-12)


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([("w", w)], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        backward(T.sum(T.square(w)))
        opt.step()
    assert np.max(np.abs(w.data)) < 1e-2


def test_adam_rejects_non_finite_gradient_by_name():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([("layer.weight", p)])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="layer.weight"):
        opt.step()
    assert np.all(p.data == 0)


# --- metrics ---------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_scatter_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d, k = int(rng.integers(6, 20)), int(rng.integers(1, 5)), int(rng.integers(2, 4))
    y = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    x = rng.standard_normal((n, d)) + y[:, None]
    res = scatter_metrics(x, y)
    sb, sw = brute_scatter(x, y)
    assert np.max(np.abs(res.sb - sb)) < 1e-12
    assert np.max(np.abs(res.sw - sw)) < 1e-12
    j1 = np.trace(sb) / np.trace(sw)
    assert abs(res.j1 - j1) < 1e-12 * max(1, j1)
    assert abs(res.j2 - np.trace(sw + sb) / np.trace(sw)) < 1e-12 * max(1, res.j2)
    assert abs(res.j2_alt - np.trace(sw + sb) / np.trace(sb)) < 1e-12 * max(1, res.j2_alt)
    assert res.j2 == 1 + res.j1


def test_scatter_zero_within_class_is_capped():
    x = np.array([[0.0], [0.0], [1.0], [1.0]])
    res = scatter_metrics(x, np.array([0, 0, 1, 1]))
    assert res.capped
    assert res.j1 == pytest.approx(1.0 / 1e-12)
    assert math.isfinite(res.j1)


def test_scatter_preconditions():
    with pytest.raises(ContractError):
        scatter_metrics(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ContractError):
        scatter_metrics(np.zeros((1, 2)), np.zeros(1))


def test_accuracy_hand_counts():
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 3]) == 100.0
    assert accuracy([0, 0, 0, 0], [0, 1, 2, 3]) == 25.0
    assert accuracy([1, 1, 2], [1, 2, 2]) == pytest.approx(200 / 3)
    with pytest.raises(ContractError):
        accuracy([0, 1], [0])
    with pytest.raises(ContractError):
        accuracy([], [])


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]


# --- batch-norm recalibration -------------------------------------------------------------------------

def test_recalibration_uses_current_weights_statistics():
    cfg = ModelConfig(input_length=64, embed_channels=2, embed_kernel=5, num_blocks=1, distill_kernel=8,
                      classifier_hidden=4, num_classes=2)
    m = FEMCFormer(cfg)
    x = np.random.default_rng(0).random((6, 64))
    recalibrate_batchnorm(m, x, batch_size=6)
    bn = m.blocks[0].norm1
    h = m.distills[0](m.embed(Tensor(x[:, None, :]))).data
    n = h.shape[0] * h.shape[2]
    assert np.allclose(bn.running_mean, h.mean(axis=(0, 2)), atol=1e-12)
    assert np.allclose(bn.running_var, h.var(axis=(0, 2)) * n / (n - 1), atol=1e-12)
    assert bn.momentum == 0.1
    assert m.training


def test_recalibration_averages_batches():
    bn = BatchNorm1d(1)

    class Wrap(FEMCFormer):
        def __init__(self):
            self.norm = bn

        def forward(self, x):
            return self.norm(x)

    x = np.array([[0.0, 2.0], [4.0, 6.0]])
    recalibrate_batchnorm(Wrap(), x, batch_size=1)
    assert bn.running_mean.tolist() == [3.0]
    assert bn.running_var.tolist() == [2.0]


# --- training ---------------------------------------------------------------------------------------

def tiny_problem():
    tr, te = make_dataset({k: PRESETS["four-class"][k] for k in ("normal", "outer_race")}, 20, length=512,
                          snr_db=10, rng_seed=0)
    cfg = ModelConfig(input_length=512, embed_channels=2, embed_kernel=9, num_blocks=1, distill_kernel=8,
                      classifier_hidden=8, num_classes=2)
    return tr, te, cfg


def test_train_learns_easy_problem_and_reports():
    tr, te, cfg = tiny_problem()
    seen = []
    rep = train(FEMCFormer(cfg), tr, te, TrainConfig(epochs=15, batch_size=8, learning_rate=3e-3),
                on_epoch_end=lambda e, m, r: seen.append(e))
    assert seen == list(range(1, 16))
    assert len(rep.loss) == len(rep.train_acc) == len(rep.test_acc) == 15
    assert rep.initial_loss == pytest.approx(math.log(2), abs=0.5)
    assert rep.loss[-1] < rep.loss[0]
    assert rep.final_test_accuracy >= 75.0
    assert rep.j2 == 1 + rep.j1
    assert np.sum(rep.confusion) == len(te)
    d = json.loads(rep.to_json(timing=False))
    assert "wall_clock_s" not in d and d["config"]["epochs"] == 15


def test_training_is_bit_deterministic(tmp_path):
    tr, te, cfg = tiny_problem()
    runs = []
    for _ in range(2):
        m = FEMCFormer(cfg)
        rep = train(m, tr, te, TrainConfig(epochs=2, batch_size=8, seed=3))
        runs.append((rep.to_json(timing=False), m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported():
    tr, te, cfg = tiny_problem()
    with pytest.raises(TrainingDiverged) as info:
        train(FEMCFormer(cfg), tr, te, TrainConfig(epochs=5, batch_size=8, learning_rate=1e300))
    assert "loss became" in str(info.value) or "non-finite" in str(info.value)


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)


def test_infer_and_evaluate_shapes():
    tr, te, cfg = tiny_problem()
    m = FEMCFormer(cfg)
    feats, logits = infer(m, te.samples, batch_size=3)
    assert feats.shape == (len(te), 8) and logits.shape == (len(te), 2)
    res = evaluate(m, te)
    assert res.confusion.shape == (2, 2)
    assert set(res.to_dict()) == {"accuracy", "j1", "j2", "j2_alt", "j1_capped", "confusion"}
    one = SignalDataset(te.samples[:2], np.zeros(2, dtype=int), ["a", "b"])
    assert math.isnan(evaluate(m, one).j1)
