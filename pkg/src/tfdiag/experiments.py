"""Desk-scale experiment recipes shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import PRESETS, make_dataset
from .model import FEMCFormer, ModelConfig
from .train import TrainConfig, TrainReport, train

# reduced model: two blocks, eight embedding channels, everything else at the published defaults
DESK_MODEL = dict(num_blocks=2, embed_channels=8)


def desk_config(seed: int = 0, **overrides) -> ModelConfig:
    kw = dict(DESK_MODEL, num_classes=len(PRESETS["four-class"]), seed=seed)
    kw.update(overrides)
    return ModelConfig(**kw)


def desk_run(snr_db: float = -4.0, epochs: int = 50, seed: int = 0, per_class: int = 100, batch_size: int = 32,
             log=None, **model_overrides) -> tuple[TrainReport, FEMCFormer]:
    """Synthesize the four-class set, train the reduced model, return (report, model)."""
    train_set, test_set = make_dataset(PRESETS["four-class"], per_class, snr_db=snr_db, rng_seed=seed)
    model = FEMCFormer(desk_config(seed, **model_overrides))
    report = train(model, train_set, test_set, TrainConfig(batch_size=batch_size, epochs=epochs, seed=seed),
                   log=log)
    return report, model


@dataclass
class AblationResult:
    snr_db: float
    epochs: int
    seeds: tuple
    accuracy: dict = field(default_factory=dict)  # variant -> per-seed final test accuracy
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accuracy[variant]))


def ablation_sweep(variants=("none", "non_farel"), seeds=(0, 1, 2), snr_db: float = -6.0, epochs: int = 20,
                   per_class: int = 100, log=None) -> AblationResult:
    """Final test accuracy of each variant over several data/model seeds."""
    start = time.perf_counter()
    res = AblationResult(snr_db, epochs, tuple(seeds))
    for variant in variants:
        accs = []
        for s in seeds:
            report, _ = desk_run(snr_db, epochs, s, per_class, ablation=variant)
            accs.append(report.final_test_accuracy)
            if log:
                log(f"{variant:10s} seed {s}: {report.final_test_accuracy:6.2f}%")
        res.accuracy[variant] = accs
    res.seconds = time.perf_counter() - start
    return res
