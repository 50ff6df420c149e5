"""U-shaped segmentation network built from serpentine-window SSM blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .bam import BAM, LayerNorm, MixerConfig, scatter_patches
from .sffu import CBAMAttention, attention_map, fuse, window_fft
from .swtoken import SWToken, TokenizerConfig, X_EXTEND, Y_EXTEND
from .tensor import NonFiniteError, Tensor

# Ablation rows: baseline conv U-Net, +BAM on a fixed grid, +serpentine
# tokenizer, +frequency branch (summed), +attention fusion.
PRESETS = {
    "baseline": dict(use_bam=False, use_swtoken=False, use_freq=False, use_sffu=False),
    "m1": dict(use_bam=True, use_swtoken=False, use_freq=False, use_sffu=False),
    "m2": dict(use_bam=True, use_swtoken=True, use_freq=False, use_sffu=False),
    "m3": dict(use_bam=True, use_swtoken=True, use_freq=True, use_sffu=False),
    "full": dict(use_bam=True, use_swtoken=True, use_freq=True, use_sffu=True),
}


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 16
    L: int = 9
    s: int = 8
    alpha: float = 2.0
    state_dim: int = 8
    expand: int = 2
    conv_width: int = 4
    use_bam: bool = True
    use_swtoken: bool = True
    use_freq: bool = True
    use_sffu: bool = True
    residual: bool = True
    reduction: int = 4
    sa_kernel: int = 7
    input_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stages < 1 or self.base_channels < 1:
            raise ValueError("stages and base_channels must be positive")
        unit = self.s * 2 ** (self.stages - 1)
        if self.input_size % unit:
            raise ValueError(f"input size {self.input_size} must be divisible by s*2^(stages-1) = {unit}")
        if (self.use_swtoken or self.use_freq or self.use_sffu) and not self.use_bam:
            raise ValueError("use_swtoken/use_freq/use_sffu require use_bam")
        if self.use_sffu and not self.use_freq:
            raise ValueError("use_sffu requires use_freq")
        if self.use_sffu and self.base_channels < self.reduction:
            raise ValueError("base_channels smaller than the attention reduction ratio")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        b = 1.0 / math.sqrt(cin * k * k)
        self.params = {"w": Tensor(rng.uniform(-b, b, (cout, cin, k, k)), requires_grad=True),
                       "b": Tensor(np.zeros(cout), requires_grad=True)}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.params["w"], self.params["b"], self.stride, self.padding)


class SWinMambaBlock:
    """Tokenize -> normalize -> aggregate -> scatter, plus the optional frequency branch."""

    def __init__(self, channels: int, stage: int, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        orientation = X_EXTEND if stage % 2 == 0 else Y_EXTEND
        L = cfg.L if cfg.use_swtoken else 1
        self.tok_cfg = TokenizerConfig(L=L, s=cfg.s, alpha=cfg.alpha, orientation=orientation)
        mix = MixerConfig(state_dim=cfg.state_dim, expand=cfg.expand, conv_width=cfg.conv_width)
        self.tokenizer = SWToken(channels, self.tok_cfg, rng, learn_offsets=cfg.use_swtoken)
        self.norm = LayerNorm(channels) if cfg.residual else None
        self.bam = BAM(channels, mix, rng)
        self.bam_freq = BAM(2 * channels, mix, rng) if cfg.use_freq else None
        # the forward window FFT is unnormalized (DC grows as s^2), so the
        # spectrum tokens get their own pre-norm before the frequency BAM
        self.norm_freq = LayerNorm(2 * channels) if cfg.use_freq and cfg.residual else None
        self.attn = (CBAMAttention(channels, rng, cfg.reduction, cfg.sa_kernel)
                     if cfg.use_sffu else None)

    def named_params(self):
        yield from (("tok." + k, v) for k, v in self.tokenizer.params.items())
        if self.norm is not None:
            yield from (("norm." + k, v) for k, v in self.norm.params.items())
        yield from (("bam." + k, v) for k, v in self.bam.params.items())
        if self.bam_freq is not None:
            yield from (("bam_freq." + k, v) for k, v in self.bam_freq.params.items())
        if self.norm_freq is not None:
            yield from (("norm_freq." + k, v) for k, v in self.norm_freq.params.items())
        if self.attn is not None:
            yield from (("sffu." + k, v) for k, v in self.attn.params.items())

    def branches(self, F: Tensor) -> tuple[Tensor, Tensor | None]:
        s = self.cfg.s
        H, W = F.shape[-2:]
        tokens = self.tokenizer(F).tokens
        if self.norm is not None:
            tokens = self.norm(tokens)
        F_spa = scatter_patches(self.bam(tokens), H, W, s)
        F_fre = None
        if self.bam_freq is not None:
            spec = window_fft(tokens, s)
            if self.norm_freq is not None:
                spec = self.norm_freq(spec)
            spec = self.bam_freq(spec)
            F_fre = scatter_patches(window_fft(spec, s, inverse=True), H, W, s)
        return F_spa, F_fre

    def __call__(self, F: Tensor) -> Tensor:
        F_spa, F_fre = self.branches(F)
        if self.attn is not None:
            out = fuse(F_spa, F_fre, self.attn.params, self.cfg.s)
        elif F_fre is not None:
            out = F_spa + F_fre
        else:
            out = F_spa
        return F + out if self.cfg.residual else out


def upsample2(x: Tensor) -> Tensor:
    C, h, w = x.shape
    up = T.broadcast_to(T.reshape(x, (C, h, 1, w, 1)), (C, h, 2, w, 2))
    return T.reshape(up, (C, 2 * h, 2 * w))


class SegmentationModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.layers: dict[str, object] = {}
        ch = config.channels
        for i in range(config.stages):
            if i == 0:
                self.layers["stem"] = Conv(1, ch(0), 3, rng)
            else:
                self.layers[f"down{i}"] = Conv(ch(i - 1), ch(i), 3, rng, stride=2)
            self.layers[f"enc{i}.conv"] = Conv(ch(i), ch(i), 3, rng)
            if config.use_bam:
                self.layers[f"enc{i}.block"] = SWinMambaBlock(ch(i), i, config, rng)
        for i in range(config.stages - 2, -1, -1):
            self.layers[f"dec{i}"] = Conv(ch(i + 1) + ch(i), ch(i), 3, rng)
        self.layers["head"] = Conv(ch(0), 1, 1, rng)
        self.params: dict[str, Tensor] = {}
        for lname, layer in self.layers.items():
            items = layer.named_params() if hasattr(layer, "named_params") else layer.params.items()
            for k, v in items:
                self.params[f"{lname}.{k}"] = v

    def _run(self, name: str, fn, x):
        try:
            return fn(x)
        except NonFiniteError as e:
            raise NonFiniteError(f"layer {name}: {e}") from None

    def __call__(self, image: Tensor) -> Tensor:
        cfg = self.config
        if image.ndim != 3 or image.shape[0] != 1:
            raise ValueError(f"expected a (1, H, W) image, got {image.shape}")
        unit = cfg.s * 2 ** (cfg.stages - 1)
        if image.shape[1] % unit or image.shape[2] % unit:
            raise ValueError(f"image extents {image.shape[1:]} must be divisible by {unit}")
        x = image
        skips = []
        for i in range(cfg.stages):
            first = "stem" if i == 0 else f"down{i}"
            x = T.relu(self._run(first, self.layers[first], x))
            x = T.relu(self._run(f"enc{i}.conv", self.layers[f"enc{i}.conv"], x))
            if cfg.use_bam:
                x = self._run(f"enc{i}.block", self.layers[f"enc{i}.block"], x)
            skips.append(x)
        for i in range(cfg.stages - 2, -1, -1):
            merged = T.concat([upsample2(x), skips[i]], axis=0)
            x = T.relu(self._run(f"dec{i}", self.layers[f"dec{i}"], merged))
        return self._run("head", self.layers["head"], x)

    def block_input(self, image: Tensor, stage: int) -> Tensor:
        """Feature map entering the stage-``stage`` block (after its conv)."""
        if not 0 <= stage < self.config.stages:
            raise ValueError(f"stage must be in [0, {self.config.stages}), got {stage}")
        x = image
        for i in range(stage + 1):
            first = "stem" if i == 0 else f"down{i}"
            x = T.relu(self.layers[first](x))
            x = T.relu(self.layers[f"enc{i}.conv"](x))
            if i < stage and self.config.use_bam:
                x = self.layers[f"enc{i}.block"](x)
        return x

    def stage_extents(self) -> list[int]:
        return [self.config.input_size // 2 ** i for i in range(self.config.stages)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def build_model(config: ModelConfig) -> SegmentationModel:
    return SegmentationModel(config)


def model_forward(model: SegmentationModel, image) -> Tensor:
    return model(image if isinstance(image, Tensor) else Tensor(image))


def segmentation_loss(logits: Tensor, mask) -> Tensor:
    """Mean binary cross-entropy plus (1 - soft Dice) with smoothing 1."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    if m.shape != logits.shape:
        raise ValueError(f"mask shape {m.shape} does not match logits {logits.shape}")
    y = Tensor(m, dtype=logits.dtype)
    bce = T.mean(T.softplus(logits) - logits * y)
    p = T.sigmoid(logits)
    dice = (2.0 * T.tsum(p * y) + 1.0) / (T.tsum(p) + T.tsum(y) + 1.0)
    return bce + (1.0 - dice)


def param_count(model) -> int:
    params = model.params if hasattr(model, "params") else model
    return int(sum(p.size for p in params.values()))
