"""Spatio-temporal 3D-convolutional encoder-decoder for range-image forecasting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConvBlock, ConvSpec, Conv3d, Module, Tensor
from .range_projection import FrameStack, SensorIntrinsics, unproject


@dataclass(frozen=True)
class ArchitectureConfig:
    """Network layout.

    ``channels[l]`` is the width of encoder stage ``l``; the bottleneck keeps
    the last width. ``temporal_reductions[l]`` frames are removed by stage
    ``l``'s downsampling conv; ``temporal_expansions`` (default: mirror of the
    reductions) are added back by the decoder.
    """

    past: int = 5
    future: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 128)
    height_factors: tuple[int, ...] = (2, 2, 2, 2)
    width_factors: tuple[int, ...] = (2, 2, 2, 2)
    temporal_reductions: tuple[int, ...] = (1, 1, 1, 1)
    temporal_expansions: tuple[int, ...] | None = None
    leaky_slope: float = 0.2
    skip_connections: bool = True
    circular_padding: bool = True
    intrinsics: SensorIntrinsics = field(default_factory=SensorIntrinsics)

    def __post_init__(self):
        for name in ("channels", "height_factors", "width_factors", "temporal_reductions"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.temporal_expansions is not None:
            object.__setattr__(self, "temporal_expansions", tuple(int(v) for v in self.temporal_expansions))
        self.validate()

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def expansions(self) -> tuple[int, ...]:
        return self.temporal_reductions if self.temporal_expansions is None else self.temporal_expansions

    @property
    def width_divisor(self) -> int:
        return math.prod(self.width_factors)

    def validate(self) -> None:
        n = self.stages
        if n < 1:
            raise ValueError("channels: need at least one encoder stage")
        for name in ("height_factors", "width_factors", "temporal_reductions"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name}: expected {n} entries (one per stage), got {len(getattr(self, name))}")
        if len(self.expansions) != n:
            raise ValueError(f"temporal_expansions: expected {n} entries, got {len(self.expansions)}")
        if min(self.channels) < 1:
            raise ValueError("channels: every stage needs at least one channel")
        if self.past < 1 or self.future < 1:
            raise ValueError(f"past/future must be >= 1, got P={self.past}, F={self.future}")
        if min(self.height_factors) < 1 or min(self.width_factors) < 1:
            raise ValueError("spatial factors must be >= 1")
        if min(self.temporal_reductions) < 0 or min(self.expansions) < 0:
            raise ValueError("temporal reductions/expansions must be >= 0")
        H, W = self.intrinsics.shape
        if H % math.prod(self.height_factors):
            raise ValueError(f"height_factors: product {math.prod(self.height_factors)} does not divide H={H}")
        if W % self.width_divisor:
            raise ValueError(f"width_factors: product {self.width_divisor} does not divide W={W}")
        bottleneck = self.past - sum(self.temporal_reductions)
        if bottleneck < 1:
            raise ValueError(f"temporal_reductions: P - sum = {bottleneck} < 1")
        if bottleneck + sum(self.expansions) != self.future:
            raise ValueError(
                f"temporal_expansions: bottleneck {bottleneck} + {sum(self.expansions)} != F={self.future}")
        if self.circular_padding:
            w = W
            for f in self.width_factors:
                if w < 2:
                    raise ValueError("circular_padding: a stage has width < 2")
                w //= f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["intrinsics"] = SensorIntrinsics.from_dict(d["intrinsics"])
        for k in ("channels", "height_factors", "width_factors", "temporal_reductions", "temporal_expansions"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def desk(cls, **kw) -> "ArchitectureConfig":
        base = dict(channels=(8, 16, 32, 32), intrinsics=SensorIntrinsics.desk())
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, **kw) -> "ArchitectureConfig":
        return cls(**kw)

    def scaled(self, factor: float) -> "ArchitectureConfig":
        return replace(self, channels=tuple(max(1, int(round(c * factor))) for c in self.channels))


def _same_padding(circular: bool):
    return (("none", 0), ("zero", 1), ("circular" if circular else "zero", 1))


def stage_specs(cfg: ArchitectureConfig) -> dict[str, ConvSpec]:
    """Every convolution of the network, keyed by its parameter prefix."""
    ch = cfg.channels
    pad = _same_padding(cfg.circular_padding)
    specs = {"input": ConvSpec(1, ch[0])}
    for l in range(cfg.stages):
        nxt = ch[min(l + 1, cfg.stages - 1)]
        hf, wf = cfg.height_factors[l], cfg.width_factors[l]
        specs[f"enc.{l}.conv"] = ConvSpec(ch[l], ch[l], (1, 3, 3), 1, pad)
        specs[f"down.{l}.conv"] = ConvSpec(ch[l], nxt, (cfg.temporal_reductions[l] + 1, hf, wf), (1, hf, wf))
        specs[f"up.{l}.conv"] = ConvSpec(nxt, ch[l], (cfg.expansions[l] + 1, hf, wf), (1, hf, wf), transposed=True)
        merge_in = 2 * ch[l] if cfg.skip_connections else ch[l]
        specs[f"merge.{l}.conv"] = ConvSpec(merge_in, ch[l], (1, 3, 3), 1, pad)
    specs["head"] = ConvSpec(ch[0], 2)
    return specs


def expected_parameter_shapes(cfg: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, spec in stage_specs(cfg).items():
        shapes[f"{name}.weight"] = spec.weight_shape
        if not name.endswith(".conv"):
            shapes[f"{name}.bias"] = (spec.out_channels,)
        else:
            block = name[: -len(".conv")]
            shapes[f"{block}.bn.gamma"] = (spec.out_channels,)
            shapes[f"{block}.bn.beta"] = (spec.out_channels,)
    return shapes


def expected_feature_shapes(cfg: ArchitectureConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """(C_l, P_l, H_l, W_l) after every block, from size arithmetic alone."""
    H, W = cfg.intrinsics.shape
    c, t, h, w = cfg.channels[0], cfg.past, H, W
    out = [("input", (c, t, h, w))]
    for l in range(cfg.stages):
        out.append((f"enc.{l}", (c, t, h, w)))
        c = cfg.channels[min(l + 1, cfg.stages - 1)]
        t -= cfg.temporal_reductions[l]
        h //= cfg.height_factors[l]
        w //= cfg.width_factors[l]
        out.append((f"down.{l}", (c, t, h, w)))
    for l in reversed(range(cfg.stages)):
        c = cfg.channels[l]
        t += cfg.expansions[l]
        h *= cfg.height_factors[l]
        w *= cfg.width_factors[l]
        out.append((f"up.{l}", (c, t, h, w)))
        out.append((f"merge.{l}", (c, t, h, w)))
    out.append(("head", (2, t, h, w)))
    return out


@dataclass
class Prediction:
    ranges: Tensor      # (F, H, W) meters
    mask_prob: Tensor   # (F, H, W)

    @property
    def valid(self) -> np.ndarray:
        return self.mask_prob.data > 0.5

    @property
    def masked_ranges(self) -> np.ndarray:
        return np.where(self.valid, self.ranges.data, 0.0).astype(np.float32)


def align_time(skip: Tensor, length: int) -> Tensor:
    """Keep the newest ``length`` frames of a skip tensor, repeating the last if short."""
    t = skip.shape[1]
    if t >= length:
        return skip if t == length else skip[:, t - length:]
    last = skip[:, t - 1:t]
    return ad.concat([skip] + [last] * (length - t), axis=1)


class ForecastModel(Module):
    def __init__(self, config: ArchitectureConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        specs = stage_specs(config)
        slope = config.leaky_slope
        self.input = Conv3d(specs["input"], rng, slope, dtype)
        n = config.stages
        self.enc = [ConvBlock(specs[f"enc.{l}.conv"], rng, slope, dtype) for l in range(n)]
        self.down = [ConvBlock(specs[f"down.{l}.conv"], rng, slope, dtype) for l in range(n)]
        self.up = [ConvBlock(specs[f"up.{l}.conv"], rng, slope, dtype) for l in range(n)]
        self.merge = [ConvBlock(specs[f"merge.{l}.conv"], rng, slope, dtype) for l in range(n)]
        self.head = Conv3d(specs["head"], rng, slope, dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def audit(self) -> list[str]:
        """Parameter names whose shape disagrees with the configuration (empty if consistent)."""
        want = expected_parameter_shapes(self.config)
        got = {name: p.shape for name, p in self.named_parameters()}
        bad = [k for k in want if got.get(k) != want[k]]
        bad += [k for k in got if k not in want]
        return bad

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        cfg = self.config

        def note(name, t):
            if trace is not None:
                trace.append((name, t.shape))
            return t

        x = note("input", self.input(x))
        skips = []
        for l in range(cfg.stages):
            x = note(f"enc.{l}", self.enc[l](x))
            skips.append(x)
            x = note(f"down.{l}", self.down[l](x))
        for l in reversed(range(cfg.stages)):
            x = note(f"up.{l}", self.up[l](x))
            if cfg.skip_connections:
                x = ad.concat([x, align_time(skips[l], x.shape[1])], axis=0)
            x = note(f"merge.{l}", self.merge[l](x))
        return note("head", ad.sigmoid(self.head(x)))


def build(config: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> ForecastModel:
    """Fresh model. float32 is the working precision; float64 serves verification."""
    return ForecastModel(config, seed, dtype)


def compute_stats(frames: np.ndarray) -> tuple[float, float]:
    """Mean and std over every range pixel of the training frames, zeros included."""
    arr = np.asarray(frames, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())
    return mean, (std if std > 0 else 1.0)


def forward(model: ForecastModel, frames: FrameStack | np.ndarray, stats: tuple[float, float],
            mode: str = "eval", trace: list | None = None) -> Prediction:
    cfg = model.config
    data = frames.data if isinstance(frames, FrameStack) else np.asarray(frames)
    want = (cfg.past,) + cfg.intrinsics.shape
    if data.shape != want:
        raise ValueError(f"input shape {data.shape} does not match configured {want}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    mean, std = stats
    x = ((data.astype(np.float64) - mean) / std).astype(model.dtype)[None]
    out = model(Tensor(x), trace)
    intr = cfg.intrinsics
    ranges = out[0] * float(intr.r_max - intr.r_min) + float(intr.r_min)
    return Prediction(ranges, out[1])


def predict_clouds(model: ForecastModel, frames, stats) -> list[np.ndarray]:
    with ad.no_grad():
        pred = forward(model, frames, stats, "eval")
    intr = model.config.intrinsics
    valid = pred.valid
    return [unproject(pred.ranges.data[t], valid[t], intr) for t in range(model.config.future)]


def save_checkpoint(path, model: ForecastModel, stats: tuple[float, float], extra: dict | None = None) -> None:
    meta = {"config": model.config.to_dict(), "stats": [float(stats[0]), float(stats[1])]}
    if extra:
        meta["extra"] = extra
    ad.save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path, config: ArchitectureConfig | None = None):
    """Return (model, stats, extra). ``config``, if given, must match the stored one."""
    state, meta = ad.load_tensors(path)
    stored = ArchitectureConfig.from_dict(meta["config"])
    if config is not None and config != stored:
        raise ValueError(f"{path}: checkpoint architecture {stored} is incompatible with requested {config}")
    model = ForecastModel(stored)
    model.load_state_dict(state)
    return model, tuple(meta["stats"]), meta.get("extra", {})


def checkpoint_path(directory, name: str) -> Path:
    return Path(directory) / f"{name}.pcfm"
