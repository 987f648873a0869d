"""Finite-difference checks for every differentiable component at small shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers, spectral, tensor
from .layers import BatchNorm1d
from .model import FAREL, MSCAL, TFFN, Distill, FEMCFormer, ModelConfig
from .tensor import Tensor, gradcheck

TOL = 1e-4
H = 1e-5


@dataclass
class ComponentResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # random projection to a scalar so every output element matters
    return tensor.sum(tensor.hadamard(out, Tensor(w)))


def _check_input_and_params(build: Callable[[Tensor], Tensor], x: Tensor, params, rng) -> float:
    """Max relative error over the input and a probe of each parameter."""
    out = build(x)
    w = rng.standard_normal(out.shape)
    f = lambda _: _weighted(build(x), w)  # noqa: E731
    worst = gradcheck(f, x, H, TOL).max_rel_error
    for p in params:
        n = p.size
        idx = rng.choice(n, size=min(n, 6), replace=False)
        worst = max(worst, gradcheck(f, p, H, TOL, indices=idx).max_rel_error)
    return worst


def _small_cfg(**kw) -> ModelConfig:
    base = dict(input_length=32, embed_channels=2, embed_kernel=5, num_blocks=2, distill_kernel=8,
                classifier_hidden=6, num_classes=3, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def _perturb_filters(module, rng):
    # move spectral weights off the identity so their gradients are generic
    for name, p in module.named_parameters():
        if "filter" in name:
            p.data += 0.3 * rng.standard_normal(p.shape)


def _components(rng) -> dict[str, Callable[[], float]]:
    def c_add():
        a, b = _rand(rng, 2, 8), _rand(rng, 2, 8)
        return _check_input_and_params(lambda x: tensor.add(x, b), a, [b], rng)

    def c_hadamard():
        a, b = _rand(rng, 3, 5), _rand(rng, 3, 5)
        return _check_input_and_params(lambda x: tensor.hadamard(x, b), a, [b], rng)

    def c_scale():
        return _check_input_and_params(lambda x: tensor.scale(x, 0.1), _rand(rng, 2, 8), [], rng)

    def c_gelu():
        return _check_input_and_params(layers.gelu, _rand(rng, 2, 4, 8), [], rng)

    def c_softmax():
        return _check_input_and_params(lambda x: layers.softmax(x, -1), _rand(rng, 2, 4, 8), [], rng)

    def c_conv1d():
        wt = Tensor(rng.standard_normal((4, 3, 5)), requires_grad=True)
        bt = Tensor(rng.standard_normal(4), requires_grad=True)
        return _check_input_and_params(lambda x: layers.conv1d(x, wt, bt, stride=2, padding=2),
                                       _rand(rng, 2, 3, 16), [wt, bt], rng)

    def c_depthwise():
        wt = Tensor(rng.standard_normal((4, 1, 3)), requires_grad=True)
        bt = Tensor(rng.standard_normal(4), requires_grad=True)
        return _check_input_and_params(lambda x: layers.depthwise_conv1d(x, wt, bt),
                                       _rand(rng, 2, 4, 16), [wt, bt], rng)

    def c_maxpool():
        return _check_input_and_params(lambda x: layers.maxpool1d(x, 3, 2), _rand(rng, 2, 3, 17), [], rng)

    def c_batchnorm():
        bn = BatchNorm1d(3)
        bn.weight.data[:] = rng.uniform(0.5, 1.5, 3)
        bn.bias.data[:] = rng.standard_normal(3)
        return _check_input_and_params(bn, _rand(rng, 2, 3, 8), [bn.weight, bn.bias], rng)

    def c_linear():
        wt = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
        bt = Tensor(rng.standard_normal(5), requires_grad=True)
        return _check_input_and_params(lambda x: layers.linear(x, wt, bt), _rand(rng, 2, 8), [wt, bt], rng)

    def c_rdft():
        def f(x):
            s = spectral.rdft(x)
            return tensor.add(tensor.scale(s.re, 1.3), tensor.hadamard(s.im, s.im))
        return _check_input_and_params(f, _rand(rng, 2, 3, 12), [], rng)

    def c_irdft():
        re = _rand(rng, 2, 3, 9)
        im = Tensor(rng.standard_normal((2, 3, 9)), requires_grad=True)
        f = lambda x: spectral.irdft(spectral.ComplexSpectrum(x, im, 16))  # noqa: E731
        return _check_input_and_params(f, re, [im], rng)

    def c_complex_hadamard():
        w = spectral.SpectralWeight(3, 14)
        w.re.data[:] = rng.standard_normal(w.shape)
        w.im.data[:] = rng.standard_normal(w.shape)

        def f(x):
            s = spectral.complex_hadamard(spectral.rdft(x), w)
            return tensor.add(tensor.square(s.re), tensor.square(s.im))
        return _check_input_and_params(f, _rand(rng, 2, 3, 14), [w.re, w.im], rng)

    def c_far():
        w = spectral.SpectralWeight(3, 15)
        w.re.data[:] = rng.standard_normal(w.shape)
        w.im.data[:] = rng.standard_normal(w.shape)
        return _check_input_and_params(lambda x: spectral.far_reconstruct(x, w, 0.7),
                                       _rand(rng, 2, 3, 15), [w.re, w.im], rng)

    def c_farel():
        cfg = _small_cfg()
        m = FAREL(cfg, np.random.default_rng(1))
        _perturb_filters(m, rng)
        return _check_input_and_params(m, _rand(rng, 2, 1, 32), m.parameters(), rng)

    def c_mscal():
        m = MSCAL(4, _small_cfg(), np.random.default_rng(2))
        return _check_input_and_params(m, _rand(rng, 2, 4, 16), m.parameters(), rng)

    def c_tffn():
        m = TFFN(4, 16, _small_cfg(gamma=0.5), np.random.default_rng(3))
        _perturb_filters(m, rng)
        return _check_input_and_params(m, _rand(rng, 2, 4, 16), m.parameters(), rng)

    def c_distill():
        m = Distill(4, 8, _small_cfg(), np.random.default_rng(4), first=False)
        return _check_input_and_params(m, _rand(rng, 2, 4, 16), m.parameters(), rng)

    def c_distill_first():
        m = Distill(2, 2, _small_cfg(), np.random.default_rng(5), first=True)
        return _check_input_and_params(m, _rand(rng, 2, 2, 32), m.parameters(), rng)

    def c_model():
        m = FEMCFormer(_small_cfg(gamma=0.5))
        _perturb_filters(m, rng)
        return full_model_check(m, rng)

    def c_cross_entropy():
        from .train import cross_entropy
        labels = rng.integers(0, 4, size=3)
        x = _rand(rng, 3, 4)
        return gradcheck(lambda t: cross_entropy(t, labels), x, H, TOL).max_rel_error

    return {
        "add": c_add, "hadamard": c_hadamard, "scale": c_scale, "gelu": c_gelu, "softmax": c_softmax,
        "conv1d": c_conv1d, "depthwise_conv1d": c_depthwise, "maxpool1d": c_maxpool,
        "batchnorm1d": c_batchnorm, "linear": c_linear, "rdft": c_rdft, "irdft": c_irdft,
        "complex_hadamard": c_complex_hadamard, "far_reconstruct": c_far, "FAREL": c_farel,
        "MSCAL": c_mscal, "TFFN": c_tffn, "distill": c_distill, "distill_first": c_distill_first,
        "cross_entropy": c_cross_entropy, "model": c_model,
    }


def full_model_check(model: FEMCFormer, rng: np.random.Generator, n_probes: int = 10,
                     batch: int = 2) -> float:
    """Cross-entropy loss through the whole model; probes random parameter entries and the input."""
    from .train import cross_entropy

    cfg = model.config
    x = Tensor(rng.standard_normal((batch, cfg.in_channels, cfg.input_length)))
    labels = rng.integers(0, cfg.num_classes, size=batch)
    f = lambda _: cross_entropy(model(x), labels)  # noqa: E731
    named = list(model.named_parameters())
    worst = 0.0
    for k in rng.choice(len(named), size=min(n_probes, len(named)), replace=False):
        _, p = named[k]
        i = int(rng.integers(p.size))
        worst = max(worst, gradcheck(f, p, H, TOL, indices=[i]).max_rel_error)
    worst = max(worst, gradcheck(f, x, H, TOL, indices=rng.choice(x.size, 6, replace=False)).max_rel_error)
    return worst


COMPONENTS = tuple(_components(np.random.default_rng(0)))


def run_suite(seed: int = 0, names=None) -> list[ComponentResult]:
    rng = np.random.default_rng(seed)
    comps = _components(rng)
    results = []
    for name in names or comps:
        t0 = time.perf_counter()
        err = comps[name]()
        results.append(ComponentResult(name, err, err < TOL, time.perf_counter() - t0))
    return results
