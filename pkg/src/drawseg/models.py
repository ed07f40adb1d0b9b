"""The eight ablation networks and their checkpoint format.

Two families, four attention modes each:

* unet -- VGG-style encoder (3x3 conv + ReLU stacks, 2x2 max pool between
  levels), per-level skip blocks, bilinear-upsampling decoder whose final
  feature width equals the base width, then a 3x3 + 1x1 head.
* cnn  -- a resolution-preserving stack of 3x3 conv + ReLU blocks with the
  same optional attention / dual-pool attachments mid-stack, same head.

Parameters are He-uniform initialised (zero biases) from a seed, in a
fixed construction order which is also the checkpoint serialisation order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .cbam import CbamBlock, build_cbam, cbam_forward, cbam_parameters, he_uniform
from .skipfuse import SkipBlockParams, build_skip_block, skip_forward, skip_parameters
from .tensor import Tensor

FAMILIES = ("unet", "cnn")
MODE_NAMES = {(False, False): "Base", (True, False): "Base+Ave",
              (False, True): "Base+CBAM", (True, True): "Base+Ave+CBAM"}


@dataclass(frozen=True)
class ModelVariant:
    family: str
    ave: bool
    cbam: bool

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def row_name(self) -> str:
        return MODE_NAMES[(self.ave, self.cbam)]

    @property
    def cli_name(self) -> str:
        suffix = {(False, False): "base", (True, False): "ave",
                  (False, True): "cbam", (True, True): "full"}[(self.ave, self.cbam)]
        return f"{self.family}-{suffix}"

    @staticmethod
    def parse(name: str) -> "ModelVariant":
        try:
            family, suffix = name.split("-")
            ave, cbam = {"base": (False, False), "ave": (True, False),
                         "cbam": (False, True), "full": (True, True)}[suffix]
        except (ValueError, KeyError):
            raise ValueError(
                f"unknown variant {name!r}; expected <unet|cnn>-<base|ave|cbam|full>") from None
        return ModelVariant(family, ave, cbam)


ALL_VARIANTS = tuple(ModelVariant(f, a, c)
                     for f in FAMILIES
                     for a, c in ((False, False), (True, False), (False, True), (True, True)))


@dataclass(frozen=True)
class EncoderConfig:
    """Widths and depth of the backbone.

    Desk default is depth 4 / base 8; the full-scale shape is depth 5 /
    base 64 with convs_per_block (2, 2, 3, 3, 3), whose widths reproduce
    the familiar 64-128-256-512-512 ladder via the 8x cap.
    """
    depth: int = 4
    base_width: int = 8
    in_channels: int = 1
    convs_per_block: Optional[tuple] = None
    width_cap: int = 8            # widths cap at base_width * width_cap
    cbam_reduction: int = 4
    spatial_width: int = 2
    cnn_blocks: int = 6           # cnn family: conv blocks in the stack
    cnn_attach_after: int = 3     # cnn family: attention/dual-pool insertion point

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        resolved = tuple(self.convs_per_block) if self.convs_per_block else tuple([2] * self.depth)
        if len(resolved) != self.depth:
            raise ValueError(
                f"convs_per_block needs {self.depth} entries, got {len(resolved)}")
        object.__setattr__(self, "convs_per_block", resolved)
        if not 1 <= self.cnn_attach_after <= self.cnn_blocks:
            raise ValueError("cnn_attach_after must lie within the block stack")

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** i, self.base_width * self.width_cap)
                for i in range(self.depth)]

    def convs(self) -> tuple:
        return self.convs_per_block

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


class _ParamStore:
    """Ordered parameter registry; registration order defines checkpoints."""

    def __init__(self):
        self.named: list[tuple[str, Tensor]] = []
        self.encoder_names: set[str] = set()

    def add(self, name: str, t: Tensor, encoder: bool) -> Tensor:
        t.name = name
        self.named.append((name, t))
        if encoder:
            self.encoder_names.add(name)
        return t

    def add_many(self, pairs, encoder: bool):
        for name, t in pairs:
            self.add(name, t, encoder)


def _conv_pair(rng, cin, cout, k, dtype):
    w = Tensor(he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return w, b


class _ConvStack:
    """n_convs x (3x3 same conv + ReLU)."""

    def __init__(self, rng, cin, cout, n_convs, dtype, store, prefix, encoder):
        self.layers = []
        for i in range(n_convs):
            w, b = _conv_pair(rng, cin if i == 0 else cout, cout, 3, dtype)
            store.add(f"{prefix}.conv{i}.w", w, encoder)
            store.add(f"{prefix}.conv{i}.b", b, encoder)
            self.layers.append((w, b))

    def forward(self, x: Tensor) -> Tensor:
        for w, b in self.layers:
            x = T.relu(T.conv2d(x, w, b))
        return x


class SegModel:
    """One of the eight variants; maps N-Cin-H-W images to N-K-H-W logits."""

    def __init__(self, variant: ModelVariant, enc: EncoderConfig, num_classes: int, seed: int,
                 dtype=T.TRAIN32):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.variant = variant
        self.enc = enc
        self.num_classes = num_classes
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.frozen = False
        self._store = _ParamStore()
        rng = np.random.default_rng(seed)
        if variant.family == "unet":
            self._build_unet(rng)
        else:
            self._build_cnn(rng)

    # -- construction -------------------------------------------------

    def _build_unet(self, rng):
        enc, dtype = self.enc, self.dtype
        widths = enc.widths()
        convs = enc.convs()
        self.encoder_stacks = []
        cin = enc.in_channels
        for lvl in range(enc.depth):
            stack = _ConvStack(rng, cin, widths[lvl], convs[lvl], dtype,
                               self._store, f"enc.l{lvl}", encoder=True)
            self.encoder_stacks.append(stack)
            cin = widths[lvl]

        self.skip_blocks: list[SkipBlockParams] = []
        for lvl in range(enc.depth - 1):
            block = build_skip_block(widths[lvl], widths[lvl + 1],
                                     self.variant.ave, self.variant.cbam, rng, dtype,
                                     enc.cbam_reduction, enc.spatial_width)
            self._store.add_many(skip_parameters(block, prefix=f"skip.l{lvl}"), encoder=False)
            self.skip_blocks.append(block)

        self.decoder_stacks = []
        for lvl in range(enc.depth - 2, -1, -1):
            stack = _ConvStack(rng, widths[lvl + 1] + widths[lvl], widths[lvl], 2, dtype,
                               self._store, f"dec.l{lvl}", encoder=False)
            self.decoder_stacks.append(stack)

        self._build_head(rng, widths[0])
        self.decoder_final_width = widths[0]

    def _build_cnn(self, rng):
        enc, dtype = self.enc, self.dtype
        w = enc.base_width
        self.cnn_stacks = []
        cin = enc.in_channels
        for i in range(enc.cnn_blocks):
            stack = _ConvStack(rng, cin, w, 1, dtype, self._store, f"cnn.b{i}", encoder=True)
            self.cnn_stacks.append(stack)
            cin = w

        self.cnn_branch = None
        self.cnn_fuse = None
        if self.variant.ave:
            branch = _ConvStack(rng, w, w, 2, dtype, self._store, "cnn.ave", encoder=False)
            fw, fb = _conv_pair(rng, 2 * w, w, 1, dtype)
            self._store.add("cnn.ave_fuse.w", fw, encoder=False)
            self._store.add("cnn.ave_fuse.b", fb, encoder=False)
            self.cnn_branch, self.cnn_fuse = branch, (fw, fb)

        self.cnn_attention: Optional[CbamBlock] = None
        if self.variant.cbam:
            self.cnn_attention = build_cbam(w, rng, enc.cbam_reduction, enc.spatial_width, dtype)
            self._store.add_many(cbam_parameters(self.cnn_attention, prefix="cnn.cbam"),
                                 encoder=False)

        self._build_head(rng, w)
        self.decoder_final_width = w

    def _build_head(self, rng, width):
        w1, b1 = _conv_pair(rng, width, width, 3, self.dtype)
        w2, b2 = _conv_pair(rng, width, self.num_classes, 1, self.dtype)
        self._store.add("head.conv3.w", w1, encoder=False)
        self._store.add("head.conv3.b", b1, encoder=False)
        self._store.add("head.conv1.w", w2, encoder=False)
        self._store.add("head.conv1.b", b2, encoder=False)
        self.head = ((w1, b1), (w2, b2))

    # -- forward ------------------------------------------------------

    def _check_input(self, x: Tensor):
        n, c, h, w = x.shape
        if c != self.enc.in_channels:
            raise T.ShapeError(
                f"model expects {self.enc.in_channels} input channels, got {c}")
        if self.variant.family == "unet":
            d = self.enc.divisor
            if h % d or w % d:
                raise T.ShapeError(
                    f"input {h}x{w} must be divisible by 2^(depth-1) = {d} for depth {self.enc.depth}")
        elif self.variant.ave and (h % 2 or w % 2):
            raise T.ShapeError(
                f"input {h}x{w} must be divisible by 2 for the dual-pool branch")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        if self.variant.family == "unet":
            return self._forward_unet(x)
        return self._forward_cnn(x)

    def _forward_unet(self, x: Tensor) -> Tensor:
        feats = []
        y = x
        for lvl, stack in enumerate(self.encoder_stacks):
            if lvl > 0:
                y = T.max_pool2d(y)
            y = stack.forward(y)
            feats.append(y)

        laterals = []
        for lvl, block in enumerate(self.skip_blocks):
            laterals.append(skip_forward(feats[lvl], feats[lvl + 1], block))

        y = feats[-1]
        for stack, lvl in zip(self.decoder_stacks, range(self.enc.depth - 2, -1, -1)):
            y = T.upsample2x(y, mode="bilinear")
            y = stack.forward(T.concat_channels(y, laterals[lvl]))
        return self._head_forward(y)

    def _forward_cnn(self, x: Tensor) -> Tensor:
        y = x
        for i, stack in enumerate(self.cnn_stacks):
            y = stack.forward(y)
            if i + 1 == self.enc.cnn_attach_after:
                if self.cnn_branch is not None:
                    side = self.cnn_branch.forward(T.avg_pool2d(y))
                    side = T.upsample2x(side, mode="bilinear")
                    fw, fb = self.cnn_fuse
                    y = T.conv2d(T.concat_channels(y, side), fw, fb)
                if self.cnn_attention is not None:
                    y = cbam_forward(y, self.cnn_attention)
        return self._head_forward(y)

    def _head_forward(self, y: Tensor) -> Tensor:
        (w1, b1), (w2, b2) = self.head
        return T.conv2d(T.relu(T.conv2d(y, w1, b1)), w2, b2)

    # -- parameters ---------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._store.named]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._store.named)

    def trainable_parameters(self) -> list[Tensor]:
        if not self.frozen:
            return self.parameters()
        return [t for name, t in self._store.named if name not in self._store.encoder_names]

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)

    def count_params(self) -> int:
        return sum(t.data.size for t in self.parameters())


def set_encoder_frozen(model: SegModel, frozen: bool) -> None:
    model.set_frozen(frozen)


def build_model(variant: ModelVariant, enc: EncoderConfig, num_classes: int,
                seed: int, dtype=T.TRAIN32) -> SegModel:
    return SegModel(variant, enc, num_classes, seed, dtype)


# ---------------------------------------------------------------------------
# checkpoints: "SEGM" magic, version, variant flags, config ints, K,
# convs-per-block list, parameter count, then raw little-endian float32
# data in construction order (layout documented in the README)

_MAGIC = b"SEGM"
_VERSION = 1
_HEADER = struct.Struct("<4sI12I")


def save_checkpoint(model: SegModel, path) -> None:
    enc = model.enc
    header = _HEADER.pack(
        _MAGIC, _VERSION,
        FAMILIES.index(model.variant.family), int(model.variant.ave), int(model.variant.cbam),
        enc.depth, enc.base_width, enc.in_channels, enc.width_cap,
        enc.cbam_reduction, enc.spatial_width, enc.cnn_blocks, enc.cnn_attach_after,
        model.num_classes)
    convs = struct.pack(f"<{enc.depth}I", *enc.convs())
    flat = np.concatenate([t.data.astype("<f4").reshape(-1) for t in model.parameters()])
    count = struct.pack("<Q", flat.size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(convs)
        f.write(count)
        f.write(flat.tobytes())


def load_checkpoint(path) -> SegModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"checkpoint truncated at byte {len(raw)}: header needs {_HEADER.size}")
    magic, version, fam, ave, cbam, depth, base, cin, cap, red, sw, blocks, attach, k = \
        _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = _HEADER.size
    convs = struct.unpack_from(f"<{depth}I", raw, off)
    off += 4 * depth
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    expected = off + 4 * count
    if len(raw) != expected:
        raise ValueError(f"checkpoint payload is {len(raw)} bytes, expected {expected}")

    variant = ModelVariant(FAMILIES[fam], bool(ave), bool(cbam))
    enc = EncoderConfig(depth=depth, base_width=base, in_channels=cin,
                        convs_per_block=tuple(convs), width_cap=cap,
                        cbam_reduction=red, spatial_width=sw,
                        cnn_blocks=blocks, cnn_attach_after=attach)
    model = build_model(variant, enc, k, seed=0)
    if model.count_params() != count:
        raise ValueError(
            f"checkpoint holds {count} parameters, model wants {model.count_params()}")
    flat = np.frombuffer(raw, dtype="<f4", offset=off)
    pos = 0
    for t in model.parameters():
        n = t.data.size
        t.data = flat[pos:pos + n].astype(model.dtype).reshape(t.data.shape)
        pos += n
    return model
