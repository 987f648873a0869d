"""Synthetic rotating-machinery signals, calibrated noise, normalization and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError

KINDS = ("normal", "outer_race", "inner_race", "gear_chip")


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    char_freq_hz: float = 0.0
    resonance_hz: float = 3000.0
    decay_s: float = 1.5e-3
    amplitude: float = 8.0
    shaft_hz: float = 29.95
    modulation_depth: float = 0.0
    base_amplitude: float = 1.0
    phase_jitter: float = 0.05
    spacing_jitter: float = 0.01

    def validate(self, sample_rate: float) -> None:
        nyq = sample_rate / 2
        if self.kind not in KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}; expected one of {KINDS}")
        if self.decay_s <= 0:
            raise ConfigError(f"decay time constant must be > 0, got {self.decay_s}")
        if self.char_freq_hz >= nyq or self.resonance_hz >= nyq or 3 * self.shaft_hz >= nyq:
            raise ConfigError(f"{self.kind}: frequencies must stay below Nyquist ({nyq} Hz)")
        if self.kind != "normal" and self.char_freq_hz <= 0:
            raise ConfigError(f"{self.kind}: characteristic frequency must be > 0")

    def ringdown_samples(self, sample_rate: float, decades: float = 5.0) -> int:
        """Samples until the impulse envelope has decayed by exp(-decades)."""
        return int(np.ceil(decades * self.decay_s * sample_rate))


PRESETS: dict[str, dict[str, FaultSpec]] = {
    "four-class": {
        "normal": FaultSpec("normal"),
        "outer_race": FaultSpec("outer_race", char_freq_hz=107.36, resonance_hz=3000.0, decay_s=1.5e-3,
                                amplitude=8.0),
        "inner_race": FaultSpec("inner_race", char_freq_hz=162.19, resonance_hz=4200.0, decay_s=1.0e-3,
                                amplitude=8.0, modulation_depth=0.6),
        "gear_chip": FaultSpec("gear_chip", char_freq_hz=29.95, resonance_hz=1500.0, decay_s=3.0e-3,
                               amplitude=12.0),
    },
}


@dataclass
class SignalDataset:
    samples: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    sample_rate_hz: float = 12000.0
    snr_db: float | None = None
    provenance: str = "synthetic"
    impulses: list[np.ndarray] | None = field(default=None, repr=False)
    source_index: np.ndarray | None = field(default=None, repr=False)
    measured_snr_db: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ContractError(f"samples {self.samples.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ContractError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "SignalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            samples=self.samples[idx],
            labels=self.labels[idx],
            impulses=None if self.impulses is None else [self.impulses[i] for i in idx],
            source_index=None if self.source_index is None else self.source_index[idx],
            measured_snr_db=None if self.measured_snr_db is None else self.measured_snr_db[idx],
        )


def gen_fault_signal(spec: FaultSpec, length: int, sample_rate: float, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """One clean vibration window and its impulse onset times in seconds."""
    spec.validate(sample_rate)
    rng = np.random.default_rng(rng_seed)
    t = np.arange(length) / sample_rate
    angle = rng.uniform(0, 2 * np.pi)
    x = np.zeros(length)
    for h, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
        phase = h * angle + rng.normal(0, spec.phase_jitter)
        x += spec.base_amplitude * amp * np.sin(2 * np.pi * h * spec.shaft_hz * t + phase)
    if spec.kind == "normal":
        return x, np.zeros(0)

    period = 1.0 / spec.char_freq_hz
    duration = length / sample_rate
    onsets = []
    tk = rng.uniform(0, period)
    while tk < duration:
        onsets.append(tk)
        tk += period * (1 + rng.uniform(-spec.spacing_jitter, spec.spacing_jitter))
    onsets = np.array(onsets)
    shaft_phase = rng.uniform(0, 2 * np.pi)
    for tk in onsets:
        amp = spec.amplitude
        if spec.kind == "inner_race":
            amp *= 1 + spec.modulation_depth * np.cos(2 * np.pi * spec.shaft_hz * tk + shaft_phase)
        dt = t - tk
        mask = dt >= 0
        x[mask] += amp * np.exp(-dt[mask] / spec.decay_s) * np.sin(2 * np.pi * spec.resonance_hz * dt[mask])
    return x, onsets


def signal_power(x: np.ndarray) -> float:
    """Mean of |v|^2 (complex input allowed)."""
    return float(np.mean(np.abs(np.asarray(x)) ** 2))


def add_noise_snr(x: np.ndarray, snr_db: float, rng_seed) -> np.ndarray:
    """Add white Gaussian noise so that 10*log10(P_signal / P_noise) = snr_db."""
    x = np.asarray(x, dtype=np.float64)
    ps = signal_power(x)
    if ps == 0:
        raise ContractError("SNR is undefined for an all-zero signal")
    pn = ps / 10 ** (snr_db / 10)
    rng = np.random.default_rng(rng_seed)
    return x + rng.normal(0.0, np.sqrt(pn), size=x.shape)


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10 * np.log10(signal_power(clean) / signal_power(np.asarray(noisy) - clean))


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] along the last axis; constant rows map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def stratified_split(labels: np.ndarray, ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class shuffle; round(n_k * ratio) of each class goes to the first split."""
    if not 0 < ratio < 1:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        n = int(round(len(idx) * ratio))
        first.append(idx[:n])
        second.append(idx[n:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def make_dataset(specs: dict[str, FaultSpec] | list[FaultSpec], per_class: int, length: int = 2048,
                 sample_rate: float = 12000.0, snr_db: float | None = None, split_ratio: float = 0.8,
                 rng_seed: int = 0) -> tuple[SignalDataset, SignalDataset]:
    """Generate, corrupt, normalize per sample, then split (train, test) stratified by class.

    Sample ``i`` draws from streams seeded by ``(rng_seed, i)`` so results do not
    depend on generation order.
    """
    if per_class < 2:
        raise ContractError("per_class must be >= 2")
    if isinstance(specs, dict):
        names, specs = list(specs), list(specs.values())
    else:
        names = [s.kind for s in specs]
    for s in specs:
        s.validate(sample_rate)
    samples, labels, impulses, snrs = [], [], [], []
    for k, spec in enumerate(specs):
        for j in range(per_class):
            i = k * per_class + j
            clean, onsets = gen_fault_signal(spec, length, sample_rate, (rng_seed, i, 0))
            if snr_db is not None:
                noisy = add_noise_snr(clean, snr_db, (rng_seed, i, 1))
                snrs.append(measured_snr_db(clean, noisy))
            else:
                noisy = clean
            samples.append(minmax_normalize(noisy))
            labels.append(k)
            impulses.append(onsets)
    full = SignalDataset(np.array(samples), np.array(labels), names, sample_rate, snr_db, "synthetic",
                         impulses, np.arange(len(labels)), np.array(snrs) if snrs else None)
    tr, te = stratified_split(full.labels, split_ratio, (rng_seed, 0xC0FFEE))
    return full.subset(tr), full.subset(te)


# --- CSV -------------------------------------------------------------------

def save_csv(dataset: SignalDataset, path, with_labels: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for row, label in zip(dataset.samples, dataset.labels):
            vals = [repr(float(v)) for v in row]
            wr.writerow(vals + [int(label)] if with_labels else vals)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_csv(path, length: int, has_labels: bool = True, num_classes: int | None = None,
             class_names: list[str] | None = None, sample_rate_hz: float = 12000.0) -> SignalDataset:
    """One sample per row, optional trailing integer label, optional header row."""
    samples, labels = [], []
    width = length + (1 if has_labels else 0)
    with open(path, newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if rownum == 1 and not _is_number(row[0].strip()):
                continue
            if len(row) != width:
                raise ParseError(f"{path}: row {rownum} has {len(row)} fields, expected {width}")
            try:
                vals = [float(c) for c in row[:length]]
            except ValueError as exc:
                raise ParseError(f"{path}: row {rownum}: non-numeric field ({exc})") from None
            samples.append(vals)
            if has_labels:
                tok = row[-1].strip()
                try:
                    lab = int(tok)
                except ValueError:
                    raise ParseError(f"{path}: row {rownum}: label {tok!r} is not an integer") from None
                if lab < 0 or (num_classes is not None and lab >= num_classes):
                    raise ParseError(f"{path}: row {rownum}: label {lab} out of range")
                labels.append(lab)
            else:
                labels.append(0)
    if num_classes is None:
        num_classes = (max(labels) + 1) if labels else 1
    names = class_names or [f"class_{k}" for k in range(num_classes)]
    arr = np.array(samples, dtype=np.float64).reshape(len(samples), length)
    return SignalDataset(arr, np.array(labels, dtype=np.int64), names, sample_rate_hz, None, "csv")
