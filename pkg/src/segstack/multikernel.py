"""Multi-kernel prediction head: parallel same-padding convolutions of
distinct sizes whose outputs are averaged with weight exactly 1/S.

Averaging the branch outputs makes the head equivalent to averaging an
ensemble of S single-branch models that share the trunk, so a plain
single-conv head is just the S = 1 case.
"""

import bisect
from dataclasses import dataclass

import numpy as np

from .errors import SpecError
from .nnops import ConvParams, conv2d, cross_entropy_loss, he_fill, same_padding
from .tensor import Tensor, mean_n


@dataclass
class MultiKernelHead:
    """Branches kept in ascending kernel-size order; the reduction order
    is fixed by that ordering so repeated forwards are bit-identical."""

    branches: "list[ConvParams]"

    def __post_init__(self):
        if not self.branches:
            raise SpecError("multi-kernel head needs at least one branch")
        first = self.branches[0]
        sizes = []
        for b in self.branches:
            kh, kw = b.ksize
            if kh != kw:
                raise SpecError(f"head branches use square kernels, got {b.ksize}")
            p = same_padding(kh)
            if b.padding != (p, p) or b.stride != 1:
                raise SpecError(
                    f"head branch of size {kh} must use same-padding stride 1, "
                    f"got padding {b.padding} stride {b.stride}")
            if (b.in_channels, b.out_channels) != (first.in_channels,
                                                   first.out_channels):
                raise SpecError(
                    f"head branches disagree on channels: "
                    f"{(b.in_channels, b.out_channels)} vs "
                    f"{(first.in_channels, first.out_channels)}")
            sizes.append(kh)
        if sizes != sorted(sizes):
            raise SpecError(f"head branches must be ascending by size, got {sizes}")

    @property
    def scales(self) -> "tuple[int, ...]":
        return tuple(b.ksize[0] for b in self.branches)

    @property
    def in_channels(self) -> int:
        return self.branches[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.branches[0].out_channels

    def branch_names(self) -> "list[str]":
        """Stable serialization names: s3, s5, ... (s5_2 for a duplicate)."""
        seen: "dict[int, int]" = {}
        names = []
        for size in self.scales:
            seen[size] = seen.get(size, 0) + 1
            names.append(f"s{size}" if seen[size] == 1 else f"s{size}_{seen[size]}")
        return names


def make_head(in_channels: int, k: int, scales=(3, 5, 7), bias: bool = True,
              dtype=np.float32) -> MultiKernelHead:
    """Zero-weight head; call he_fill per branch (or init the whole net)."""
    if len(set(scales)) != len(scales):
        raise SpecError(f"duplicate kernel sizes in {tuple(scales)}; "
                        "use extend_with_scale(allow_duplicate=True) instead")
    branches = [ConvParams.zeros(in_channels, k, s, bias=bias, dtype=dtype)
                for s in sorted(scales)]
    return MultiKernelHead(branches)


def branch_outputs(head: MultiKernelHead, x: Tensor, route=None) -> "list[Tensor]":
    return [conv2d(x, b, route=route) for b in head.branches]


def forward_multikernel(head: MultiKernelHead, x: Tensor, route=None) -> Tensor:
    """(1/S) sum of branch convolutions, ascending kernel size."""
    return mean_n(branch_outputs(head, x, route=route))


def multikernel_loss(branch_logits, labels) -> Tensor:
    """Cross entropy of the branch-averaged logits.

    Shares the code path of cross_entropy_loss on the averaged logits,
    so the two are identical to the bit, not just within tolerance.
    """
    outs = list(branch_logits)
    if not outs:
        raise SpecError("multikernel_loss needs at least one branch output")
    return cross_entropy_loss(mean_n(outs), labels)


def extend_with_scale(head: MultiKernelHead, new_kernel_size: int,
                      rng: np.random.Generator,
                      allow_duplicate: bool = False) -> MultiKernelHead:
    """New head with one extra He-initialized branch; existing branch
    parameter tensors are shared, not copied, so they stay bit-unchanged
    and any optimizer state attached to them remains valid."""
    same_padding(new_kernel_size)  # rejects even sizes
    if new_kernel_size in head.scales and not allow_duplicate:
        raise SpecError(f"kernel size {new_kernel_size} already present in "
                        f"{head.scales}")
    proto = head.branches[0]
    new = ConvParams.zeros(head.in_channels, head.out_channels, new_kernel_size,
                           bias=proto.bias is not None,
                           dtype=proto.weight.dtype)
    he_fill(new, rng)
    pos = bisect.bisect_right([s for s in head.scales], new_kernel_size)
    branches = list(head.branches)
    branches.insert(pos, new)
    return MultiKernelHead(branches)
