"""Cross-entropy training with Adam, accuracy, and class-scatter feature metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SignalDataset
from .errors import ContractError, NumericError
from .layers import BatchNorm1d, Module
from .tensor import Tensor, _node, backward

TRACE_FLOOR = 1e-12


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, computed in the log domain."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def rule(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (grad * (g.reshape(()) / b),)

    return _node(np.array([loss]), (logits,), "cross_entropy", rule)


class Adam:
    """Bias-corrected Adam over named parameters; updates ``param.data`` in place."""

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class ScatterResult:
    j1: float
    j2: float
    j2_alt: float
    capped: bool
    trace_sb: float
    trace_sw: float
    sb: np.ndarray = field(repr=False)
    sw: np.ndarray = field(repr=False)


def scatter_metrics(features: np.ndarray, labels) -> ScatterResult:
    """Between/within-class scatter, scalarized by trace.

    ``j1 = tr(Sb)/tr(Sw)``, ``j2 = tr(Sw+Sb)/tr(Sw)``; ``j2_alt`` is
    ``tr(Sw+Sb)/tr(Sb)``. ``tr(Sw)`` is floored at 1e-12 and ``capped`` reports it.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if len(x) < 2 or x.shape[1] < 1:
        raise ContractError("scatter_metrics needs N >= 2 samples and D >= 1")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("scatter_metrics needs at least two classes")
    grand = x.mean(axis=0)
    d = x.shape[1]
    sb = np.zeros((d, d))
    sw = np.zeros((d, d))
    for k in classes:
        xk = x[labels == k]
        mk = xk.mean(axis=0)
        diff = (mk - grand)[:, None]
        sb += len(xk) * (diff @ diff.T)
        centred = xk - mk
        sw += centred.T @ centred
    tb, tw = float(np.trace(sb)), float(np.trace(sw))
    capped = tw < TRACE_FLOOR
    tw_f = max(tw, TRACE_FLOOR)
    j1 = tb / tw_f
    # tr(Sw + Sb) / tr(Sw) = 1 + tr(Sb) / tr(Sw); written this way the identity holds bit-exactly
    j2 = 1.0 + j1
    j2_alt = (tw + tb) / tb if tb > 0 else math.inf
    return ScatterResult(j1, j2, j2_alt, capped, tb, tw, sb, sw)


def accuracy(predictions, labels) -> float:
    """Percentage of correct predictions."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ContractError(f"predictions {p.shape} and labels {y.shape} differ in length")
    if p.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return 100.0 * float(np.count_nonzero(p == y)) / p.size


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


@dataclass
class EvalResult:
    accuracy: float
    j1: float
    j2: float
    j2_alt: float
    capped: bool
    confusion: np.ndarray
    predictions: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "j1": self.j1, "j2": self.j2, "j2_alt": self.j2_alt,
                "j1_capped": self.capped, "confusion": self.confusion.tolist()}


def _batches(x: np.ndarray, batch_size: int):
    for i in range(0, len(x), batch_size):
        yield i, x[i:i + batch_size]


def infer(model: Module, samples: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (features, logits) for a (N, L) array."""
    was = model.training
    model.eval()
    feats, logits = [], []
    for _, xb in _batches(samples, batch_size):
        f, lg = model.forward_features(Tensor(xb[:, None, :]))
        feats.append(f.data)
        logits.append(lg.data)
    model.train(was)
    return np.concatenate(feats), np.concatenate(logits)


def recalibrate_batchnorm(model: Module, samples: np.ndarray, batch_size: int = 64) -> None:
    """Replace batchnorm running statistics with their average over ``samples``.

    The exponential running averages lag behind weights that are still moving,
    which makes eval-mode outputs drift from train-mode ones; a forward sweep
    with the current weights gives statistics that match them. Parameters are
    untouched.
    """
    norms = [m for m in model.modules() if isinstance(m, BatchNorm1d)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.running_mean[:] = 0.0
        m.running_var[:] = 0.0
    was = model.training
    model.train()
    try:
        for k, (_, xb) in enumerate(_batches(samples, batch_size), 1):
            for m in norms:
                m.momentum = 1.0 / k  # cumulative mean over batches
            model(Tensor(xb[:, None, :]))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was)


def evaluate(model: Module, dataset: SignalDataset, batch_size: int = 64) -> EvalResult:
    feats, logits = infer(model, dataset.samples, batch_size)
    pred = logits.argmax(axis=1)
    acc = accuracy(pred, dataset.labels)
    cm = confusion_matrix(pred, dataset.labels, dataset.num_classes)
    if len(np.unique(dataset.labels)) >= 2:
        sc = scatter_metrics(feats, dataset.labels)
        j1, j2, j2a, capped = sc.j1, sc.j2, sc.j2_alt, sc.capped
    else:
        j1 = j2 = j2a = math.nan
        capped = False
    return EvalResult(acc, j1, j2, j2a, capped, cm, pred, feats)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainReport:
    config: dict
    model_config: dict
    seed: int
    initial_loss: float = math.nan
    loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    final_test_accuracy: float = math.nan
    j1: float = math.nan
    j2: float = math.nan
    j2_alt: float = math.nan
    j1_capped: bool = False
    confusion: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock_s")
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def write_curves(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,train_acc,test_acc\n")
            for i, (l, a, b) in enumerate(zip(self.loss, self.train_acc, self.test_acc), 1):
                fh.write(f"{i},{l!r},{a!r},{b!r}\n")


def train(model: Module, train_set: SignalDataset, test_set: SignalDataset | None, config: TrainConfig,
          on_epoch_end=None, log=None) -> TrainReport:
    """Fit ``model`` and report per-epoch curves plus final eval metrics.

    ``on_epoch_end(epoch, model, report)`` is called after each epoch (1-based).
    Deterministic given the model seed, ``config`` and the data.
    """
    start = time.perf_counter()
    mcfg = getattr(model, "config", None)
    report = TrainReport(asdict(config), asdict(mcfg) if mcfg is not None else {}, config.seed)
    opt = Adam(model.named_parameters(), config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
    x_all, y_all = train_set.samples, train_set.labels
    n = len(y_all)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        total, correct = 0.0, 0
        for bi, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            logits = model(Tensor(x_all[idx][:, None, :]))
            loss = cross_entropy(logits, y_all[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                report.wall_clock_s = time.perf_counter() - start
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch}, batch {bi}", report)
            if epoch == 1 and bi == 0:
                report.initial_loss = lv
            opt.zero_grad()
            backward(loss)
            try:
                opt.step()
            except NumericError as exc:
                report.wall_clock_s = time.perf_counter() - start
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch {bi}", report) from exc
            total += lv * len(idx)
            correct += int(np.count_nonzero(logits.data.argmax(axis=1) == y_all[idx]))
        report.loss.append(total / n)
        report.train_acc.append(100.0 * correct / n)
        if config.recalibrate_bn:
            recalibrate_batchnorm(model, x_all, config.batch_size)
        if test_set is not None:
            _, lg = infer(model, test_set.samples, config.batch_size)
            report.test_acc.append(accuracy(lg.argmax(axis=1), test_set.labels))
        else:
            report.test_acc.append(math.nan)
        if log:
            log(f"epoch {epoch:3d}  loss {report.loss[-1]:.4f}  train {report.train_acc[-1]:6.2f}%  "
                f"test {report.test_acc[-1]:6.2f}%")
        if on_epoch_end:
            on_epoch_end(epoch, model, report)
    if test_set is not None:
        res = evaluate(model, test_set, config.batch_size)
        report.final_test_accuracy = res.accuracy
        report.j1, report.j2, report.j2_alt, report.j1_capped = res.j1, res.j2, res.j2_alt, res.capped
        report.confusion = res.confusion.tolist()
    report.wall_clock_s = time.perf_counter() - start
    return report
