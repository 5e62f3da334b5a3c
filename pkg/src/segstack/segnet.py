"""Symmetric encoder-decoder network builder.

The encoder stacks conv+BN+ReLU units with a 2x2 max pool closing each
block; the decoder mirrors the blocks in reverse, opening each with an
unpool fed by the matching encoder pool mask (last mask out first). The
final decoder convolution is the prediction head, which emits k class
channels with no BN/ReLU; a plain network is simply a one-branch head.

"full" follows the VGG-16 convolutional plan, 13 encoder convolutions
and 13 decoder convolutions counting the head. "mini" is a two-block
reduction with identical wiring for desk-scale runs. Both come out of
the same builder loop.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tenio
from .errors import CheckpointError, ConfigError, ShapeError, SpecError
from .multikernel import (MultiKernelHead, branch_outputs, forward_multikernel,
                          make_head)
from .nnops import BNState, ConvParams, batchnorm, conv2d, he_fill, maxpool2, unpool2
from .tensor import Tensor, mean_n, relu

FULL_WIDTHS = (64, 128, 256, 512, 512)
FULL_CONV_COUNTS = (2, 2, 3, 3, 3)
MINI_WIDTHS = (16, 32)
MINI_CONV_COUNTS = (2, 2)


@dataclass
class ConvUnit:
    name: str
    params: ConvParams
    bn: BNState
    group: str


@dataclass
class NetworkSpec:
    in_channels: int
    k: int
    widths: "tuple[int, ...]"
    conv_counts: "tuple[int, ...]"
    scale_name: str
    enc_blocks: "list[list[ConvUnit]]"
    dec_blocks: "list[list[ConvUnit]]"  # execution order: mirror of last block first
    head: MultiKernelHead

    @property
    def depth(self) -> int:
        return len(self.widths)

    def with_head(self, head: MultiKernelHead) -> "NetworkSpec":
        if head.in_channels != self.head.in_channels or head.out_channels != self.k:
            raise SpecError(
                f"replacement head wants {head.in_channels}->{head.out_channels}, "
                f"network provides {self.head.in_channels}->{self.k}")
        return replace(self, head=head)


def build_segnet(k: int, scale: str = "full", widths=None, conv_counts=None,
                 in_channels: int = 3, head_scales=(3,), bias: bool = True,
                 dtype=np.float32) -> NetworkSpec:
    """Parameters start at zero; apply init_he (and optionally an encoder
    checkpoint) before use."""
    if k < 2:
        raise SpecError(f"need at least 2 classes, got {k}")
    if scale == "full":
        widths = FULL_WIDTHS if widths is None else tuple(widths)
        conv_counts = FULL_CONV_COUNTS if conv_counts is None else tuple(conv_counts)
    elif scale == "mini":
        widths = MINI_WIDTHS if widths is None else tuple(widths)
        conv_counts = MINI_CONV_COUNTS if conv_counts is None else tuple(conv_counts)
    else:
        raise SpecError(f"unknown scale {scale!r}, expected 'full' or 'mini'")
    if not widths:
        raise SpecError("width plan is empty")
    if len(widths) != len(conv_counts):
        raise SpecError(f"width plan {widths} does not pair with conv counts "
                        f"{conv_counts}")
    if any(c < 1 for c in conv_counts) or any(w < 1 for w in widths):
        raise SpecError("widths and conv counts must be positive")

    def unit(name, ic, oc, group):
        return ConvUnit(name, ConvParams.zeros(ic, oc, 3, bias=bias, dtype=dtype),
                        BNState.create(oc, dtype=dtype), group)

    enc_blocks = []
    prev = in_channels
    for bi, (w, cnt) in enumerate(zip(widths, conv_counts), start=1):
        enc_blocks.append([unit(f"enc.b{bi}.c{ci}", prev if ci == 0 else w, w,
                                "encoder") for ci in range(cnt)])
        prev = w

    dec_blocks = []
    for bi in range(len(widths), 0, -1):
        w, cnt = widths[bi - 1], conv_counts[bi - 1]
        if bi >= 2:
            target = widths[bi - 2]
            block = [unit(f"dec.b{bi}.c{ci}", w, w if ci < cnt - 1 else target,
                          "decoder") for ci in range(cnt)]
        else:
            # final block: all convs keep width, the head is its last conv
            block = [unit(f"dec.b{bi}.c{ci}", w, w, "decoder")
                     for ci in range(cnt - 1)]
        dec_blocks.append(block)

    head = make_head(widths[0], k, scales=head_scales, bias=bias, dtype=dtype)
    return NetworkSpec(in_channels, k, widths, conv_counts, scale, enc_blocks,
                       dec_blocks, head)


def _units(spec: NetworkSpec):
    for block in spec.enc_blocks:
        yield from block
    for block in spec.dec_blocks:
        yield from block


def init_he(spec: NetworkSpec, seed: int) -> None:
    """He-normal conv weights, zero biases, deterministic under seed."""
    rng = np.random.default_rng(seed)
    for u in _units(spec):
        he_fill(u.params, rng)
    for b in spec.head.branches:
        he_fill(b, rng)


def _apply_unit(h: Tensor, u: ConvUnit, mode: str, route) -> Tensor:
    return relu(batchnorm(conv2d(h, u.params, route=route), u.bn, mode))


def forward_parts(spec: NetworkSpec, x: Tensor, mode: str = "train",
                  route=None):
    """Returns (logits, trunk features, per-branch logits)."""
    if x.ndim != 4:
        raise ShapeError(f"input must be 4-D, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects "
                         f"{spec.in_channels}")
    div = 2 ** spec.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by "
                         f"{div} for {spec.depth} pooling levels")
    masks = []
    h = x
    for block in spec.enc_blocks:
        for u in block:
            h = _apply_unit(h, u, mode, route)
        h, m = maxpool2(h)
        masks.append(m)
    for block in spec.dec_blocks:
        h = unpool2(h, masks.pop())
        for u in block:
            h = _apply_unit(h, u, mode, route)
    branches = branch_outputs(spec.head, h, route=route)
    return mean_n(branches), h, branches


def forward(spec: NetworkSpec, x: Tensor, mode: str = "train", route=None) -> Tensor:
    logits, _, _ = forward_parts(spec, x, mode, route)
    return logits


# ---------------------------------------------------------------------------
# Parameter access and checkpoints


def named_parameters(spec: NetworkSpec) -> "list[tuple[str, Tensor, str]]":
    out = []
    for u in _units(spec):
        for suffix, t in u.params.tensors():
            out.append((f"{u.name}.{suffix}", t, u.group))
        for suffix, t in u.bn.tensors():
            out.append((f"{u.name}.{suffix}", t, u.group))
    for bname, b in zip(spec.head.branch_names(), spec.head.branches):
        for suffix, t in b.tensors():
            out.append((f"head.{bname}.{suffix}", t, "head"))
    return out


def _buffer_entries(spec: NetworkSpec):
    """(name, BNState, attr, group) for non-gradient state."""
    for u in _units(spec):
        yield f"{u.name}.bn.running_mean", u.bn, "running_mean", u.group
        yield f"{u.name}.bn.running_var", u.bn, "running_var", u.group
        yield f"{u.name}.bn.initialized", u.bn, "initialized", u.group


@dataclass
class ParamGroup:
    role: str
    lr_multiplier: float
    params: "list[tuple[str, Tensor]]" = field(default_factory=list)


def param_groups(spec: NetworkSpec, ratio: float = 1.0) -> "list[ParamGroup]":
    """Encoder multiplier = ratio, decoder and head = 1. Ratio 0 freezes
    the encoder exactly: frozen parameters are skipped, not scaled."""
    if ratio < 0:
        raise ConfigError(f"learning-rate ratio must be >= 0, got {ratio}")
    named = named_parameters(spec)
    groups = [ParamGroup("encoder", float(ratio)),
              ParamGroup("decoder", 1.0),
              ParamGroup("head", 1.0)]
    by_role = {g.role: g for g in groups}
    for name, t, role in named:
        by_role[role].params.append((name, t))
    return groups


def save_checkpoint(spec: NetworkSpec, dirpath) -> None:
    entries = [(name, t.data, group)
               for name, t, group in named_parameters(spec)]
    for name, bn, attr, group in _buffer_entries(spec):
        if attr == "initialized":
            arr = np.asarray(1.0 if bn.initialized else 0.0)
        else:
            arr = getattr(bn, attr)
        entries.append((name, arr, group))
    tenio.save_bundle(dirpath, entries)


def _stage(bundle, name, want_shape):
    entry = bundle.get(name)
    if entry is None:
        return None
    if entry.array.shape != tuple(want_shape):
        raise CheckpointError(
            f"{name}: checkpoint shape {entry.array.shape}, network expects "
            f"{tuple(want_shape)}")
    return entry.array


def load_checkpoint(spec: NetworkSpec, dirpath) -> None:
    """Full restore. Validates every name and shape before touching any
    parameter, so a bad bundle leaves the network untouched."""
    bundle = tenio.load_bundle(dirpath)
    staged = []
    for name, t, _ in named_parameters(spec):
        arr = _stage(bundle, name, t.shape)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        staged.append((t, arr))
    buf_staged = []
    for name, bn, attr, _ in _buffer_entries(spec):
        arr = _stage(bundle, name, () if attr == "initialized"
                     else getattr(bn, attr).shape)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing buffer {name}")
        buf_staged.append((bn, attr, arr))
    known = {n for n, _, _ in named_parameters(spec)}
    known.update(n for n, _, _, _ in _buffer_entries(spec))
    extra = [n for n in bundle if n not in known]
    if extra:
        raise CheckpointError(f"checkpoint has unknown entries: {extra[:5]}")
    for t, arr in staged:
        t.data[...] = arr.astype(t.dtype, copy=False)
    for bn, attr, arr in buf_staged:
        if attr == "initialized":
            bn.initialized = bool(arr)
        else:
            getattr(bn, attr)[...] = arr.astype(np.float64, copy=False)


def load_encoder_checkpoint(spec: NetworkSpec, dirpath) -> None:
    """Overwrite encoder parameters and statistics from a bundle (a full
    checkpoint works; its decoder entries are ignored). Decoder and head
    stay untouched. All-or-nothing: validation precedes any mutation."""
    bundle = tenio.load_bundle(dirpath)
    staged, missing = [], []
    for name, t, group in named_parameters(spec):
        if group != "encoder":
            continue
        arr = _stage(bundle, name, t.shape)
        if arr is None:
            missing.append(name)
        else:
            staged.append((t, arr))
    buf_staged = []
    for name, bn, attr, group in _buffer_entries(spec):
        if group != "encoder":
            continue
        arr = _stage(bundle, name, () if attr == "initialized"
                     else getattr(bn, attr).shape)
        if arr is None:
            missing.append(name)
        else:
            buf_staged.append((bn, attr, arr))
    if missing:
        raise CheckpointError(
            f"missing encoder parameters: {missing[:5]}"
            + (f" and {len(missing) - 5} more" if len(missing) > 5 else ""))
    for t, arr in staged:
        t.data[...] = arr.astype(t.dtype, copy=False)
    for bn, attr, arr in buf_staged:
        if attr == "initialized":
            bn.initialized = bool(arr)
        else:
            getattr(bn, attr)[...] = arr.astype(np.float64, copy=False)
