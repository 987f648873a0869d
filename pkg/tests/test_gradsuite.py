import numpy as np
import pytest

from tfdiag import gradsuite, layers
from tfdiag import tensor as T
from tfdiag.tensor import _node


@pytest.fixture(scope="module")
def results():
    return gradsuite.run_suite(0)


def test_every_component_is_covered(results):
    names = {r.name for r in results}
    for required in ("conv1d", "depthwise_conv1d", "maxpool1d", "batchnorm1d", "linear", "gelu", "softmax",
                     "rdft", "irdft", "complex_hadamard", "far_reconstruct", "FAREL", "MSCAL", "TFFN",
                     "distill", "distill_first", "cross_entropy", "model"):
        assert required in names


def test_every_component_passes(results):
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad
    assert max(r.max_rel_error for r in results) < gradsuite.TOL


def test_suite_detects_a_wrong_gradient(monkeypatch):
    real = layers.gelu

    def broken(x):
        out = real(x)
        return _node(out.data, (x,), "broken_gelu", lambda g: (0.9 * g,))

    monkeypatch.setattr(layers, "gelu", broken)
    (res,) = gradsuite.run_suite(0, names=["gelu"])
    assert not res.passed


def test_suite_detects_a_dropped_weight_gradient(monkeypatch):
    real = layers.linear

    def broken(x, w, b=None):
        out = real(x, w, b)
        return _node(out.data, (x, w, b), "broken_linear",
                     lambda g: (g @ w.data, np.zeros_like(w.data), g.sum(axis=0)))

    monkeypatch.setattr(layers, "linear", broken)
    (res,) = gradsuite.run_suite(0, names=["linear"])
    assert not res.passed


def test_full_model_check_on_small_model():
    from tfdiag.model import FEMCFormer
    m = FEMCFormer(gradsuite._small_cfg())
    assert gradsuite.full_model_check(m, np.random.default_rng(1), n_probes=4) < gradsuite.TOL


def test_small_config_shapes_stay_small():
    cfg = gradsuite._small_cfg()
    assert cfg.input_length <= 32 and cfg.embed_channels <= 8
    x = T.Tensor(np.zeros((2, 1, 32)))
    assert gradsuite.FEMCFormer(cfg)(x).shape == (2, cfg.num_classes)
