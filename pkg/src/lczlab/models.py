"""FM1-FM4 fusion classifiers and their ablation variants.

A network is built from a declarative :class:`ModelSpec`:

* FM1  hybrid: pixel-level branch + feature-level (element-wise product) branch
* FM1a pixel-level branch only, FM1b feature-level branch only
* FM2/FM2b FM1/FM1b with self- and cross-attention on pooled features
* FM3/FM3a/FM3b FM1/FM1a/FM1b fed Gaussian scale-space stacks
* FM4  weighted late fusion of a SAR U-Net and an MSI CNN
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import MSI_BANDS, SAR_BANDS, BandGroupMap, LabelSpace
from .errors import ConfigurationError, DataError
from .nn import BatchNorm2d, Conv2d, Dense, Module, MultiHeadAttention
from .preprocess import ScaleSpec, multi_scale
from .tensor import Tensor

VARIANTS = ("FM1", "FM1a", "FM1b", "FM2", "FM2b", "FM3", "FM3a", "FM3b", "FM4")
FEATURES = 32
FUSED_FEATURES = 64
HIDDEN = 64
DEFAULT_HEADS = 8
DEFAULT_ALPHA = 0.5
MAX_ABS_INPUT = 1e3


def canonical_variant(name: str) -> str:
    for v in VARIANTS:
        if v.lower() == str(name).lower():
            return v
    raise ConfigurationError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "FM1"
    band_grouping: bool = False
    label_space: LabelSpace = field(default_factory=LabelSpace)
    attention_heads: int | None = None
    scale_spec: ScaleSpec | None = None
    alpha: float | None = None
    num_classes: int | None = None

    def __post_init__(self):
        v = canonical_variant(self.variant)
        object.__setattr__(self, "variant", v)
        if self.attention_heads is not None and not self.uses_attention:
            raise ConfigurationError(f"attention_heads only applies to FM2 variants, not {v}")
        if self.scale_spec is not None and not self.uses_multiscale:
            raise ConfigurationError(f"scale_spec only applies to FM3 variants, not {v}")
        if self.alpha is not None and v != "FM4":
            raise ConfigurationError(f"alpha only applies to FM4, not {v}")
        if self.uses_attention and self.attention_heads is None:
            object.__setattr__(self, "attention_heads", DEFAULT_HEADS)
        if self.uses_attention and (self.attention_heads < 1 or FEATURES % self.attention_heads):
            raise ConfigurationError(
                f"attention width {FEATURES} is not divisible by {self.attention_heads} heads"
            )
        if self.uses_multiscale and self.scale_spec is None:
            object.__setattr__(self, "scale_spec", ScaleSpec())
        if v == "FM4":
            alpha = DEFAULT_ALPHA if self.alpha is None else float(self.alpha)
            if not 0.0 <= alpha <= 1.0:
                raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
            object.__setattr__(self, "alpha", alpha)
        k = self.label_space.num_classes
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", k)
        elif self.num_classes != k:
            raise ConfigurationError(f"num_classes {self.num_classes} inconsistent with label space ({k} classes)")

    @property
    def uses_attention(self) -> bool:
        return self.variant.startswith("FM2")

    @property
    def uses_multiscale(self) -> bool:
        return self.variant.startswith("FM3")

    @property
    def pixel_branch(self) -> bool:
        return self.variant in ("FM1", "FM1a", "FM2", "FM3", "FM3a")

    @property
    def feature_branch(self) -> bool:
        return self.variant in ("FM1", "FM1b", "FM2", "FM2b", "FM3", "FM3b")

    @property
    def per_head_dim(self) -> int | None:
        return FEATURES // self.attention_heads if self.uses_attention else None

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "band_grouping": self.band_grouping,
            "label_mode": self.label_space.mode,
            "source_classes": self.label_space.source_classes,
            "attention_heads": self.attention_heads,
            "kernel_sizes": list(self.scale_spec.kernel_sizes) if self.scale_spec else None,
            "alpha": self.alpha,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(
            variant=d["variant"],
            band_grouping=bool(d["band_grouping"]),
            label_space=LabelSpace(d["label_mode"], int(d["source_classes"])),
            attention_heads=d.get("attention_heads"),
            scale_spec=ScaleSpec(tuple(d["kernel_sizes"])) if d.get("kernel_sizes") else None,
            alpha=d.get("alpha"),
            num_classes=d.get("num_classes"),
        )


# ---------------------------------------------------------------- building blocks


def _split_filters(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + (1 if i < r else 0) for i in range(parts)]


def _group_channels(groups: dict, bands: int, scales: int) -> list[list[int]]:
    """Input-channel indices of each band group inside a scale-major stack."""
    return [[s * bands + b for s in range(scales) for b in idx] for idx in groups.values()]


class ConvBlock(Module):
    """conv 3x3 -> ReLU -> batchnorm -> spatial dropout."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, dtype)
        self.bn = BatchNorm2d(out_ch, dtype)

    def __call__(self, x, net):
        y = self.bn(ops.relu(self.conv(x)), net.mode)
        return ops.spatial_dropout(y, net.dropout_rate, net.mode, net.rng)


class GroupedConvBlock(Module):
    """One :class:`ConvBlock` per channel group; outputs concatenated channel-wise."""

    def __init__(self, groups: list[list[int]] | None, in_ch, out_ch, rng, dtype):
        self.groups = groups
        if groups is None:
            self.blocks = [ConvBlock(in_ch, out_ch, rng, dtype)]
        else:
            sizes = _split_filters(out_ch, len(groups))
            self.blocks = [ConvBlock(len(g), s, rng, dtype) for g, s in zip(groups, sizes)]

    def __call__(self, x, net):
        if self.groups is None:
            return self.blocks[0](x, net)
        return ops.concat_channels([b(ops.take_channels(x, g), net) for b, g in zip(self.blocks, self.groups)])


class FeatureFusion(Module):
    """element-wise product -> conv 64 -> maxpool -> batchnorm -> ReLU -> GAP."""

    def __init__(self, rng, dtype):
        # bias omitted: the following batchnorm cancels it exactly
        self.conv = Conv2d(FEATURES, FUSED_FEATURES, 3, rng, dtype, bias=False)
        self.bn = BatchNorm2d(FUSED_FEATURES, dtype)

    def __call__(self, s1, s2, net):
        y = self.conv(ops.elementwise_mul(s1, s2))
        y = ops.relu(self.bn(ops.maxpool2d(y, 2), net.mode))
        return ops.global_avg_pool(y)


class Head(Module):
    """dense 64 -> ReLU -> dense K -> softmax."""

    def __init__(self, d_in, num_classes, rng, dtype):
        self.hidden = Dense(d_in, HIDDEN, rng, dtype)
        self.out = Dense(HIDDEN, num_classes, rng, dtype)

    def __call__(self, x):
        return ops.softmax(self.out(ops.relu(self.hidden(x))), axis=-1)


# ---------------------------------------------------------------- networks


class FusionNetwork(Module):
    """Base class: holds spec, mode, dropout state and input checks."""

    def __init__(self, spec: ModelSpec, seed: int, dtype, input_size: int):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.input_size = input_size
        self.mode = "train"
        self.dropout_rate = 0.2
        self.rng = np.random.default_rng([seed, 1])

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def train(self) -> "FusionNetwork":
        self.mode = "train"
        return self

    def eval(self) -> "FusionNetwork":
        self.mode = "infer"
        return self

    def reseed(self, seed: int) -> None:
        """Reset the dropout stream."""
        self.rng = np.random.default_rng([seed, 1])

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _inputs(self, sar, msi) -> tuple[Tensor, Tensor]:
        out = []
        for x, bands, name in ((sar, SAR_BANDS, "SAR"), (msi, MSI_BANDS, "MSI")):
            t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
            if t.ndim != 4 or t.shape[1] != bands:
                raise DataError(f"{name} batch must be [N,{bands},H,W], got {t.shape}")
            if not np.isfinite(t.data).all():
                raise DataError(f"{name} batch contains NaN or Inf")
            if t.data.size and np.abs(t.data).max() > MAX_ABS_INPUT:
                raise DataError(f"{name} batch has |values| > {MAX_ABS_INPUT:g}; normalise inputs first")
            out.append(t)
        if out[0].shape[0] != out[1].shape[0] or out[0].shape[2:] != out[1].shape[2:]:
            raise DataError(f"SAR {out[0].shape} and MSI {out[1].shape} batches are not co-registered")
        return out[0], out[1]

    def forward(self, sar, msi) -> Tensor:
        raise NotImplementedError

    def __call__(self, sar, msi) -> Tensor:
        return self.forward(sar, msi)

    def loss(self, sar, msi, targets) -> Tensor:
        return self.loss_and_probs(sar, msi, targets)[0]

    def loss_and_probs(self, sar, msi, targets) -> tuple[Tensor, Tensor]:
        probs = self.forward(sar, msi)
        return ops.cross_entropy_loss(probs, targets), probs

    def predict(self, sar, msi) -> np.ndarray:
        return predict(self.forward(sar, msi))


class HybridNet(FusionNetwork):
    """FM1, FM2 and FM3 families."""

    def __init__(self, spec, seed, dtype=np.float32, input_size=32):
        super().__init__(spec, seed, dtype, input_size)
        rng = np.random.default_rng([seed, 0])
        scales = len(spec.scale_spec.kernel_sizes) if spec.uses_multiscale else 1
        self.scales = scales
        sar_ch, msi_ch = SAR_BANDS * scales, MSI_BANDS * scales
        bmap = BandGroupMap.default() if spec.band_grouping else None
        sar_groups = _group_channels(bmap.sar_groups, SAR_BANDS, scales) if bmap else None
        msi_groups = _group_channels(bmap.msi_groups, MSI_BANDS, scales) if bmap else None
        # the pixel branch sees the SAR stack followed by the MSI stack
        pixel_groups = sar_groups + [[sar_ch + c for c in g] for g in msi_groups] if bmap else None
        width = 0
        if spec.pixel_branch:
            self.pixel = GroupedConvBlock(pixel_groups, sar_ch + msi_ch, FEATURES, rng, dtype)
            width += FEATURES
        if spec.feature_branch:
            self.sar_branch = GroupedConvBlock(sar_groups, sar_ch, FEATURES, rng, dtype)
            self.msi_branch = GroupedConvBlock(msi_groups, msi_ch, FEATURES, rng, dtype)
            if spec.uses_attention:
                h = spec.attention_heads
                self.sar_self_attn = MultiHeadAttention(FEATURES, h, rng, dtype)
                self.msi_self_attn = MultiHeadAttention(FEATURES, h, rng, dtype)
                self.sar_cross_attn = MultiHeadAttention(FEATURES, h, rng, dtype)
                self.msi_cross_attn = MultiHeadAttention(FEATURES, h, rng, dtype)
            self.fusion = FeatureFusion(rng, dtype)
            width += FUSED_FEATURES
        self.head = Head(width, spec.num_classes, rng, dtype)

    def _prepare(self, sar: Tensor, msi: Tensor) -> tuple[Tensor, Tensor]:
        if not self.spec.uses_multiscale:
            return sar, msi
        stacks = [multi_scale(t.data, self.spec.scale_spec) for t in (sar, msi)]
        return Tensor(stacks[0], dtype=self.dtype), Tensor(stacks[1], dtype=self.dtype)

    def _attend(self, s1: Tensor, s2: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = s1.shape

        def to_seq(t):
            return ops.permute(ops.reshape(t, (n, c, h * w)), (0, 2, 1))

        def to_map(t):
            return ops.reshape(ops.permute(t, (0, 2, 1)), (n, c, h, w))

        q1, q2 = to_seq(s1), to_seq(s2)
        q1 = self.sar_self_attn(q1, q1)
        q2 = self.msi_self_attn(q2, q2)
        c1 = self.sar_cross_attn(q1, q2)  # SAR queries on MSI keys/values
        c2 = self.msi_cross_attn(q2, q1)
        return to_map(c1), to_map(c2)

    def forward(self, sar, msi) -> Tensor:
        sar, msi = self._prepare(*self._inputs(sar, msi))
        parts = []
        if self.spec.pixel_branch:
            stacked = ops.concat_channels([sar, msi])
            parts.append(ops.global_avg_pool(self.pixel(stacked, self)))
        if self.spec.feature_branch:
            f1 = self.sar_branch(sar, self)
            f2 = self.msi_branch(msi, self)
            if self.spec.uses_attention:
                f1, f2 = self._attend(ops.maxpool2d(f1, 2), ops.maxpool2d(f2, 2))
            parts.append(self.fusion(f1, f2, self))
        vec = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        return self.head(vec)


class UNetLevel(Module):
    """conv 3x3 (no bias) -> batchnorm -> ReLU, optionally per band group."""

    def __init__(self, in_ch, out_ch, rng, dtype, groups=None):
        self.groups = groups
        if groups is None:
            self.convs = [Conv2d(in_ch, out_ch, 3, rng, dtype, bias=False)]
        else:
            self.convs = [
                Conv2d(len(g), s, 3, rng, dtype, bias=False) for g, s in zip(groups, _split_filters(out_ch, len(groups)))
            ]
        self.bn = BatchNorm2d(out_ch, dtype)

    def __call__(self, x, mode):
        if self.groups is None:
            y = self.convs[0](x)
        else:
            y = ops.concat_channels([c(ops.take_channels(x, g)) for c, g in zip(self.convs, self.groups)])
        return ops.relu(self.bn(y, mode))


class UNetClassifier(Module):
    """Two-level U-Net with skip concatenation, then GAP and a dense head."""

    def __init__(self, in_ch, num_classes, rng, dtype, groups=None):
        self.enc1 = UNetLevel(in_ch, 32, rng, dtype, groups)
        self.enc2 = UNetLevel(32, 64, rng, dtype)
        self.bottleneck = UNetLevel(64, 64, rng, dtype)
        self.dec2 = UNetLevel(64 + 64, 64, rng, dtype)
        self.dec1 = UNetLevel(64 + 32, 32, rng, dtype)
        self.head = Head(32, num_classes, rng, dtype)

    def __call__(self, x, mode):
        e1 = self.enc1(x, mode)
        e2 = self.enc2(ops.maxpool2d(e1, 2), mode)
        b = self.bottleneck(ops.maxpool2d(e2, 2), mode)
        d2 = self.dec2(ops.concat_channels([ops.upsample_nearest(b, 2), e2]), mode)
        d1 = self.dec1(ops.concat_channels([ops.upsample_nearest(d2, 2), e1]), mode)
        return self.head(ops.global_avg_pool(d1))


class VanillaCNN(Module):
    """conv 32 -> pool -> conv 64 -> pool -> flatten -> dense 64 -> softmax."""

    def __init__(self, in_ch, num_classes, input_size, rng, dtype, groups=None):
        self.groups = groups
        if groups is None:
            self.conv1 = [Conv2d(in_ch, 32, 3, rng, dtype)]
        else:
            self.conv1 = [Conv2d(len(g), s, 3, rng, dtype) for g, s in zip(groups, _split_filters(32, len(groups)))]
        self.conv2 = Conv2d(32, 64, 3, rng, dtype)
        side = input_size // 4
        self.head = Head(64 * side * side, num_classes, rng, dtype)

    def __call__(self, x):
        if self.groups is None:
            y = self.conv1[0](x)
        else:
            y = ops.concat_channels([c(ops.take_channels(x, g)) for c, g in zip(self.conv1, self.groups)])
        y = ops.maxpool2d(ops.relu(y), 2)
        y = ops.maxpool2d(ops.relu(self.conv2(y)), 2)
        return self.head(ops.reshape(y, (y.shape[0], -1)))


class LateFusionNet(FusionNetwork):
    """FM4: ``alpha * p_unet(SAR) + (1 - alpha) * p_cnn(MSI)``."""

    def __init__(self, spec, seed, dtype=np.float32, input_size=32):
        super().__init__(spec, seed, dtype, input_size)
        if input_size % 4:
            raise ConfigurationError(f"FM4 needs an input size divisible by 4, got {input_size}")
        rng = np.random.default_rng([seed, 0])
        bmap = BandGroupMap.default() if spec.band_grouping else None
        sar_groups = [list(g) for g in bmap.sar_groups.values()] if bmap else None
        msi_groups = [list(g) for g in bmap.msi_groups.values()] if bmap else None
        self.unet = UNetClassifier(SAR_BANDS, spec.num_classes, rng, dtype, sar_groups)
        self.cnn = VanillaCNN(MSI_BANDS, spec.num_classes, input_size, rng, dtype, msi_groups)
        self.alpha = spec.alpha

    def branch_probs(self, sar, msi) -> tuple[Tensor, Tensor]:
        sar, msi = self._inputs(sar, msi)
        if sar.shape[2:] != (self.input_size, self.input_size):
            raise DataError(f"FM4 was built for {self.input_size}x{self.input_size} inputs, got {sar.shape[2:]}")
        return self.unet(sar, self.mode), self.cnn(msi)

    def combine(self, p: Tensor, q: Tensor, alpha: float | None = None) -> Tensor:
        a = self.alpha if alpha is None else float(alpha)
        return ops.add(ops.scale(p, a), ops.scale(q, 1.0 - a))

    def forward(self, sar, msi) -> Tensor:
        return self.combine(*self.branch_probs(sar, msi))

    def loss_and_probs(self, sar, msi, targets) -> tuple[Tensor, Tensor]:
        # branches share no parameters, so the summed loss trains each independently
        p, q = self.branch_probs(sar, msi)
        loss = ops.add(ops.cross_entropy_loss(p, targets), ops.cross_entropy_loss(q, targets))
        return loss, self.combine(p, q)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32, input_size: int = 32) -> FusionNetwork:
    if spec.variant == "FM4":
        return LateFusionNet(spec, seed, dtype, input_size)
    return HybridNet(spec, seed, dtype, input_size)


def forward(net: FusionNetwork, sar, msi) -> Tensor:
    return net.forward(sar, msi)


def predict(probs) -> np.ndarray:
    """Class index per row; exact ties go to the lowest index."""
    return ops.argmax_rows(probs)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: FusionNetwork, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = list(net.named_parameters())
    buffers = list(net.named_buffers())
    manifest = {
        "format": "lczlab-checkpoint",
        "version": "1.0",
        "spec": net.spec.to_json(),
        "seed": net.seed,
        "input_size": net.input_size,
        "dtype": "float32",
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in buffers],
    }
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in [p.data for _, p in params] + [b for _, b in buffers]
    )
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> FusionNetwork:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    spec = ModelSpec.from_json(manifest["spec"])
    net = build(spec, seed=int(manifest["seed"]), input_size=int(manifest["input_size"]))
    blob = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4")
    targets = [p.data for _, p in net.named_parameters()] + [b for _, b in net.named_buffers()]
    entries = manifest["parameters"] + manifest["buffers"]
    if len(entries) != len(targets):
        raise ConfigurationError(f"{path}: checkpoint lists {len(entries)} arrays, model has {len(targets)}")
    offset = 0
    for entry, arr in zip(entries, targets):
        if tuple(entry["shape"]) != arr.shape:
            raise ConfigurationError(f"{path}: {entry['name']} has shape {entry['shape']}, model expects {arr.shape}")
        size = arr.size
        if offset + size > blob.size:
            raise ConfigurationError(f"{path}: params.bin is truncated")
        arr[...] = blob[offset : offset + size].reshape(arr.shape)
        offset += size
    if offset != blob.size:
        raise ConfigurationError(f"{path}: params.bin has {blob.size - offset} trailing values")
    return net.eval()
