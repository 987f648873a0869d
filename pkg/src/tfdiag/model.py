"""FE-MCFormer: Fourier embedding, multiscale conv attention, time-frequency
fusion feed-forward and distillation stages, plus ablation variants."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from . import kvconfig
from .errors import ConfigError, DimensionError, ParseError
from .layers import (BatchNorm1d, Conv1d, ConvSpec, Linear, Module, conv_output_length, gelu,
                     maxpool1d, softmax)
from .spectral import SpectralWeight, far_reconstruct
from .tensor import Tensor, add, flatten, hadamard, tensor_from_bytes, tensor_to_bytes

ABLATIONS = ("none", "non_msa", "non_fft", "non_farel")


@dataclass
class ModelConfig:
    """Structural description; defaults reproduce the published layer table."""

    input_length: int = 2048
    in_channels: int = 1
    embed_channels: int = 32
    embed_kernel: int = 63
    num_blocks: int = 4
    mscal_per_block: int = 2
    tffn_per_block: int = 2
    branch_kernels: tuple = (3, 5)
    tffn_expansion: int = 2
    gamma: float = 0.1
    num_classes: int = 4
    classifier_hidden: int = 256
    ablation: str = "none"
    softmax_axis: str = "time"
    distill_kernel: int = 64
    distill_stride: int = 2
    distill_later_kernel: int = 5
    pool_kernel: int = 3
    pool_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        self.ablation = self.ablation.replace("-", "_")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.softmax_axis not in ("time", "channel"):
            raise ConfigError(f"softmax_axis must be 'time' or 'channel', got {self.softmax_axis!r}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        for k in (self.embed_kernel, self.distill_later_kernel, *self.branch_kernels):
            if k % 2 == 0:
                raise ConfigError(f"length-preserving kernels must be odd, got {k}")
        self.branch_kernels = tuple(self.branch_kernels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return kvconfig.build(cls, values)


def shape_chain(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-stage output shapes (without batch axis) implied by the config."""
    chain = []
    c, length = cfg.embed_channels, cfg.input_length
    chain.append(("embedding", (c, length)))
    for i in range(cfg.num_blocks):
        if i == 0:
            length = conv_output_length(length, cfg.distill_kernel, cfg.distill_stride)
        else:
            c *= 2
        length = conv_output_length(length, cfg.pool_kernel, cfg.pool_stride)
        if length < 1:
            raise DimensionError(f"input length {cfg.input_length} too short for {cfg.num_blocks} blocks")
        chain.append((f"distill{i + 1}", (c, length)))
        chain.append((f"block{i + 1}", (c, length)))
    chain.append(("flatten", (c * length,)))
    chain.append(("hidden", (cfg.classifier_hidden,)))
    chain.append(("logits", (cfg.num_classes,)))
    return chain


class FAREL(Module):
    """Wide convolution followed by a learnable spectral filter on its output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, use_filter: bool = True):
        k = cfg.embed_kernel
        self.conv = Conv1d(ConvSpec(cfg.in_channels, cfg.embed_channels, k, padding=(k - 1) // 2), rng)
        self.filter = SpectralWeight(cfg.embed_channels, cfg.input_length) if use_filter else None
        self.gamma = cfg.gamma
        self.length = cfg.input_length

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        if x.shape[-1] != self.length:
            raise DimensionError(f"FAREL expects length {self.length}, got {x.shape[-1]}")
        c = self.conv(x)
        if trace is not None:
            trace["conv"] = c.data
        if self.filter is None:
            return c
        return add(c, far_reconstruct(c, self.filter, self.gamma))


class MSCAL(Module):
    """Multiscale convolutional attention: parallel small-kernel branches gate a 1x1 projection."""

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.proj_in = Conv1d(ConvSpec(channels, channels, 1), rng)
        self.use_attention = cfg.ablation != "non_msa"
        if self.use_attention:
            self.branches = [Conv1d(ConvSpec(channels, channels, k, padding=(k - 1) // 2), rng)
                             for k in cfg.branch_kernels]
            self.fuse = Conv1d(ConvSpec(channels, channels, 1), rng)
        self.proj_out = Conv1d(ConvSpec(channels, channels, 1), rng)
        self.softmax_axis = -1 if cfg.softmax_axis == "time" else 1

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        y1 = self.proj_in(x)
        if self.use_attention:
            y2 = self.branches[0](y1)
            for branch in self.branches[1:]:
                y2 = add(y2, branch(y1))
            attn = softmax(y2, axis=self.softmax_axis)
            if trace is not None:
                trace["attn"] = attn.data
            y3 = add(hadamard(self.fuse(attn), y1), y1)
        else:
            y3 = y1
        return add(self.proj_out(gelu(y3)), x)


class TFFN(Module):
    """Expand, depthwise conv + GELU, spectral reconstruction, squeeze, residual."""

    def __init__(self, channels: int, length: int, cfg: ModelConfig, rng: np.random.Generator):
        wide = channels * cfg.tffn_expansion
        self.expand = Conv1d(ConvSpec(channels, wide, 1), rng)
        self.dw = Conv1d(ConvSpec(wide, wide, 3, padding=1, depthwise=True), rng)
        self.filter = SpectralWeight(wide, length) if cfg.ablation != "non_fft" else None
        # no bias: with gamma = 0 the block must reduce to the identity
        self.squeeze = Conv1d(ConvSpec(wide, channels, 1, bias=False), rng)
        self.gamma = cfg.gamma

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        xdot = gelu(self.dw(self.expand(x)))
        if trace is not None:
            trace["xdot"] = xdot.data
        r = xdot if self.filter is None else far_reconstruct(xdot, self.filter, self.gamma)
        return add(x, self.squeeze(r))


class Distill(Module):
    """Conv -> GELU -> max-pool; halves the sequence length."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig, rng: np.random.Generator, first: bool):
        if first:
            spec = ConvSpec(cin, cout, cfg.distill_kernel, stride=cfg.distill_stride)
        else:
            k = cfg.distill_later_kernel
            spec = ConvSpec(cin, cout, k, padding=(k - 1) // 2)
        self.conv = Conv1d(spec, rng)
        self.pool_kernel = cfg.pool_kernel
        self.pool_stride = cfg.pool_stride

    def forward(self, x: Tensor) -> Tensor:
        return maxpool1d(gelu(self.conv(x)), self.pool_kernel, self.pool_stride)


class MSTFFBlock(Module):
    """Pre-norm block: batchnorm, MSCAL stack, batchnorm, TFFN stack."""

    def __init__(self, channels: int, length: int, cfg: ModelConfig, rng: np.random.Generator):
        self.norm1 = BatchNorm1d(channels)
        self.mscal = [MSCAL(channels, cfg, rng) for _ in range(cfg.mscal_per_block)]
        self.norm2 = BatchNorm1d(channels)
        self.tffn = [TFFN(channels, length, cfg, rng) for _ in range(cfg.tffn_per_block)]

    def forward(self, x: Tensor, trace: dict | None = None, prefix: str = "") -> Tensor:
        h = self.norm1(x)
        for j, layer in enumerate(self.mscal):
            sub = {} if trace is not None else None
            h = layer(h, sub)
            if sub:
                trace[f"{prefix}mscal{j}.attn"] = sub["attn"]
        h = self.norm2(h)
        for layer in self.tffn:
            h = layer(h)
        return h


class FEMCFormer(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        chain = dict(shape_chain(cfg))
        self.embed = FAREL(cfg, rng, use_filter=cfg.ablation != "non_farel")
        self.distills = []
        self.blocks = []
        cin = cfg.embed_channels
        for i in range(cfg.num_blocks):
            c, length = chain[f"distill{i + 1}"]
            self.distills.append(Distill(cin, c, cfg, rng, first=i == 0))
            self.blocks.append(MSTFFBlock(c, length, cfg, rng))
            cin = c
        self.fc1 = Linear(chain["flatten"][0], cfg.classifier_hidden, rng)
        self.fc2 = Linear(cfg.classifier_hidden, cfg.num_classes, rng)

    def forward_features(self, x: Tensor, trace: dict | None = None) -> tuple[Tensor, Tensor]:
        """Return (penultimate features, logits)."""
        if x.ndim != 3 or x.shape[1:] != (self.config.in_channels, self.config.input_length):
            raise DimensionError(
                f"expected input (B, {self.config.in_channels}, {self.config.input_length}), got {x.shape}")
        sub = {} if trace is not None else None
        h = self.embed(x, sub)
        if trace is not None:
            trace["embed.conv"] = sub["conv"]
            trace["embedding"] = h.data
        for i, (distill, block) in enumerate(zip(self.distills, self.blocks)):
            h = distill(h)
            if trace is not None:
                trace[f"distill{i + 1}"] = h.data
            h = block(h, trace, prefix=f"block{i + 1}.")
            if trace is not None:
                trace[f"block{i + 1}"] = h.data
        h = flatten(h)
        feats = self.fc1(h)
        logits = self.fc2(gelu(feats))
        if trace is not None:
            trace["flatten"] = h.data
            trace["hidden"] = feats.data
            trace["logits"] = logits.data
        return feats, logits

    def forward(self, x: Tensor, trace: dict | None = None) -> Tensor:
        return self.forward_features(x, trace)[1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities in eval mode for a (B, L) or (B, 1, L) array."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        was = self.training
        self.eval()
        logits = self.forward(Tensor(x)).data
        self.train(was)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise ConfigError(f"checkpoint is missing {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name not in targets:
                raise ConfigError(f"checkpoint has unexpected entry {name!r}")
            if targets[name].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {targets[name].shape}")
            targets[name][...] = arr


def build_variant(cfg: ModelConfig | None = None, **overrides) -> FEMCFormer:
    """Build the full model or an ablation (``ablation`` in none/non_msa/non_fft/non_farel)."""
    cfg = cfg or ModelConfig()
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return FEMCFormer(cfg)


def gamma_sweep(cfg: ModelConfig | None = None, gammas=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)):
    cfg = cfg or ModelConfig()
    return {g: build_variant(cfg, gamma=g) for g in gammas}


def dump_attention(model: FEMCFormer, x: np.ndarray | Tensor, block_index: int | None = None,
                   layer_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Attention map of one MSCAL layer (0-based indices; default: first layer of the last block).

    Returns ``(raw, averaged)`` where raw is (B, C, L) and averaged is the
    channel mean, (B, L).
    """
    cfg = model.config
    if cfg.ablation == "non_msa":
        raise ConfigError("the non_msa variant has no attention maps")
    if block_index is None:
        block_index = cfg.num_blocks - 1
    if not 0 <= block_index < cfg.num_blocks:
        raise ConfigError(f"block index {block_index} out of range for {cfg.num_blocks} blocks")
    if not 0 <= layer_index < cfg.mscal_per_block:
        raise ConfigError(f"layer index {layer_index} out of range for {cfg.mscal_per_block} MSCAL layers")
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        x = Tensor(x)
    trace: dict = {}
    was = model.training
    model.eval()
    model.forward(x, trace)
    model.train(was)
    raw = trace[f"block{block_index + 1}.mscal{layer_index}.attn"]
    return raw, raw.mean(axis=1)


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"TFDIAG-CKPT 1\n"
_END = b"%%END-CONFIG\n"


def save_checkpoint(path, model: FEMCFormer, extra: dict | None = None) -> None:
    """Text config header followed by (name, tensor) binary records."""
    header = dict(model.config.to_dict())
    for k, v in (extra or {}).items():
        header[f"meta.{k}"] = v
    parts = [_MAGIC, kvconfig.dumps(header).encode(), _END]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(tensor_to_bytes(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_MAGIC) or _END not in buf:
        raise ParseError(f"{path}: not a checkpoint file")
    head_end = buf.index(_END)
    header = kvconfig.loads(buf[len(_MAGIC):head_end].decode())
    offset = head_end + len(_END)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + n].decode()
        offset += n
        state[name], offset = tensor_from_bytes(buf, offset)
    return header, state


def load_checkpoint(path) -> FEMCFormer:
    header, state = read_checkpoint(path)
    cfg = ModelConfig.from_dict({k: v for k, v in header.items() if not k.startswith("meta.")})
    model = FEMCFormer(cfg)
    model.load_state_dict(state)
    return model


# --- FAREL on a generic CNN --------------------------------------------------

class GenericCNN(Module):
    """Small wide-first-kernel CNN; ``use_farel`` adds the spectral filter after the first conv."""

    def __init__(self, input_length: int, num_classes: int, channels: int = 8, first_kernel: int = 64,
                 first_stride: int = 8, use_farel: bool = True, gamma: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.conv1 = Conv1d(ConvSpec(1, channels, first_kernel, stride=first_stride,
                                     padding=(first_kernel - first_stride) // 2), rng)
        l1 = self.conv1.spec.output_length(input_length)
        self.filter = SpectralWeight(channels, l1) if use_farel else None
        self.gamma = gamma
        self.conv2 = Conv1d(ConvSpec(channels, 2 * channels, 3, padding=1), rng)
        l2 = conv_output_length(conv_output_length(l1, 2, 2), 2, 2)
        self.fc = Linear(2 * channels * l2, num_classes, rng)

    def forward_features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (flattened conv features, logits)."""
        h = self.conv1(x)
        if self.filter is not None:
            h = add(h, far_reconstruct(h, self.filter, self.gamma))
        h = maxpool1d(gelu(h), 2, 2)
        h = flatten(maxpool1d(gelu(self.conv2(h)), 2, 2))
        return h, self.fc(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_features(x)[1]
