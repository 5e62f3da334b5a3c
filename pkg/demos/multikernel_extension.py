"""Grow a trained multi-kernel head by one scale without disturbing it.

The prediction head averages parallel convolutions of different kernel
sizes. A new size can be added later: the old branches are shared (not
copied) and frozen while only the fresh branch trains.
"""

import tempfile
from pathlib import Path

import numpy as np

from segstack import (ParamGroup, TrainConfig, build_segnet, extend_with_scale,
                      init_he, named_parameters, pixel_accuracy, train_segnet)
from segstack.datapipe import synth_dataset


def main():
    root = Path(tempfile.mkdtemp(prefix="segstack-mk-"))
    tiles = synth_dataset(seed=3, n_tiles=16, size=64)
    dataset = [(irrg.data, labels) for irrg, comp, labels in tiles]

    net = build_segnet(k=5, scale="mini", in_channels=3, head_scales=(3, 5))
    init_he(net, seed=42)
    train_segnet(net, dataset, TrainConfig(epochs=16, batch_size=4, seed=5),
                 root / "base")
    print(f"base head scales {net.head.scales}, "
          f"acc {pixel_accuracy(net, dataset):.3f}")

    old = {name: t.data.copy() for name, t, g in named_parameters(net)
           if g == "head"}
    old_ids = {id(t) for _, t, g in named_parameters(net) if g == "head"}

    net.head = extend_with_scale(net.head, 7, np.random.default_rng(99))
    frozen, fresh = [], []
    for name, t, _ in named_parameters(net):
        is_new = name.startswith("head.") and id(t) not in old_ids
        (fresh if is_new else frozen).append((name, t))
    groups = [ParamGroup("frozen", 0.0, frozen),
              ParamGroup("new_branch", 1.0, fresh)]
    print(f"extended to {net.head.scales}; training "
          f"{len(fresh)} tensors, {len(frozen)} frozen")

    train_segnet(net, dataset, TrainConfig(epochs=8, batch_size=4, seed=6),
                 root / "extended", groups=groups)
    print(f"after branch fine-tune: acc {pixel_accuracy(net, dataset):.3f}")

    untouched = all(np.array_equal(old[name], t.data)
                    for name, t, g in named_parameters(net)
                    if g == "head" and name in old)
    print(f"pre-extension branches bit-identical: {untouched}")


if __name__ == "__main__":
    main()
