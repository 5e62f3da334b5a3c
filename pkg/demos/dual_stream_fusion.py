"""Fuse two modality streams by averaging plus a learned residual term.

Trains one network on IRRG tiles and one on the composite (dsm/ndsm/ndvi)
tiles, then fine-tunes a small corrector that nudges the averaged
probability maps. The corrector learns at a much lower rate than the
streams did: the residual term is meant to stay small.
"""

import tempfile
from pathlib import Path

from segstack import (TrainConfig, build_segnet, fusion_pixel_accuracy,
                      init_corrector, init_he, make_corrector,
                      measure_fusion_stats, pixel_accuracy, train_fusion,
                      train_segnet)
from segstack.datapipe import synth_dataset


def main():
    root = Path(tempfile.mkdtemp(prefix="segstack-fusion-"))
    tiles = synth_dataset(seed=3, n_tiles=16, size=64)
    irrg = [(a.data, y) for a, b, y in tiles]
    comp = [(b.data, y) for a, b, y in tiles]
    dual = [(a.data, b.data, y) for a, b, y in tiles]
    cfg = TrainConfig(epochs=36, batch_size=4, seed=5)

    stream_a = build_segnet(k=5, scale="mini", in_channels=3)
    init_he(stream_a, seed=42)
    train_segnet(stream_a, irrg, cfg, root / "irrg")
    print(f"irrg stream acc {pixel_accuracy(stream_a, irrg):.3f}")

    stream_b = build_segnet(k=5, scale="mini", in_channels=3)
    init_he(stream_b, seed=43)
    train_segnet(stream_b, comp, cfg, root / "comp")
    print(f"composite stream acc {pixel_accuracy(stream_b, comp):.3f}")

    corr_in = stream_a.head.in_channels + stream_b.head.in_channels
    corr = make_corrector(in_channels=corr_in, k=5)
    init_corrector(corr, seed=44)
    print(f"zero-init corrector = plain averaging: "
          f"acc {fusion_pixel_accuracy(stream_a, stream_b, corr, dual):.3f}")

    fine = TrainConfig(base_lr=1e-5, epochs=6, batch_size=4, seed=6)
    train_fusion(stream_a, stream_b, corr, dual, fine, root / "fused")
    acc = fusion_pixel_accuracy(stream_a, stream_b, corr, dual)
    stats, corr_mag, avg_mag = measure_fusion_stats(stream_a, stream_b,
                                                    corr, dual)
    print(f"fused acc {acc:.3f}")
    print(f"max-channel activation: averaged {stats.m_avg:.3f} "
          f"+/- {stats.s_avg:.3f}, correction {stats.m_corr:.3f} "
          f"+/- {stats.s_corr:.3f}")
    print(f"mean |correction| {corr_mag:.4f} stays below "
          f"mean |average| {avg_mag:.4f}: {corr_mag < avg_mag}")


if __name__ == "__main__":
    main()
