"""SGD training with per-group learning rates, run manifests, and the
desk-scale training loops for the plain, multi-kernel, branch-extension
and dual-stream fusion variants.

Determinism contract: with a fixed config (including seed) and dataset,
single-threaded runs write bit-identical manifests and checkpoints. To
keep that true the manifest holds no timestamps and only paths relative
to the run directory, and every random draw comes from one generator
seeded by the config.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tenio
from .errors import ConfigError, DivergenceError, TrainingError
from .fusion import (CorrectorSpec, StreamOutput, fuse_average, fuse_residual,
                     fusion_stats)
from .multikernel import multikernel_loss
from .nnops import IGNORE_LABEL, cross_entropy_loss, softmax_channels
from .segnet import (NetworkSpec, ParamGroup, forward_parts,
                     named_parameters, param_groups, save_checkpoint)
from .tensor import Tensor, backward, no_grad

MANIFEST_NAME = "manifest.json"
CHECKPOINT_DIR = "checkpoint"
LOSS_VARIANTS = ("avg", "branch")  # algebraically identical code paths


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    lr_ratio: float = 1.0
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    patch: int = 64
    stride: int = 64
    loss_variant: str = "avg"
    decay_factor: float = 0.1
    plateau_patience: int = 0  # 0 disables the plateau decay

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.lr_ratio < 0:
            raise ConfigError(f"lr_ratio must be >= 0, got {self.lr_ratio}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("epochs", "batch_size", "patch", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}, "
                              f"got {self.loss_variant!r}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got "
                              f"{self.decay_factor}")
        if self.plateau_patience < 0:
            raise ConfigError("plateau_patience must be >= 0")


class SGD:
    """v <- momentum*v + grad; p <- p - lr_group*v, lr_group = base_lr *
    group multiplier. Groups with multiplier 0 are skipped outright, so
    frozen parameters stay bit-identical and carry no velocity."""

    def __init__(self, groups, base_lr: float, momentum: float):
        self.groups = groups
        self.base_lr = float(base_lr)
        self.momentum = float(momentum)
        self._vel = {}
        for g in groups:
            if g.lr_multiplier == 0:
                continue
            for name, t in g.params:
                self._vel[id(t)] = np.zeros_like(t.data)

    def step(self) -> None:
        for g in self.groups:
            if g.lr_multiplier == 0:
                for _, t in g.params:
                    t.grad = None
                continue
            lr = self.base_lr * g.lr_multiplier
            for name, t in g.params:
                if t.grad is None:
                    raise TrainingError(f"missing gradient on {name}; was "
                                        "backward() run for this step?")
                v = self._vel[id(t)]
                v *= self.momentum
                v += t.grad
                t.data -= lr * v
                t.grad = None


class _LastGoodGuard:
    """In-memory copy of the state that produced the most recent finite
    loss. Epoch checkpoints alone are not enough: an epoch can end with
    finite losses while its final step already pushed the parameters
    somewhere that only the next forward reveals as broken."""

    def __init__(self):
        self._tensors = []
        self._bn = []
        self._state = None

    def track_spec(self, spec) -> None:
        from .segnet import _buffer_entries
        self._tensors += [t for _, t, _ in named_parameters(spec)]
        self._bn += [(bn, attr) for _, bn, attr, _ in _buffer_entries(spec)]

    def track_tensors(self, named) -> None:
        self._tensors += [t for _, t in named]

    def update(self) -> None:
        self._state = ([t.data.copy() for t in self._tensors],
                       [np.copy(getattr(bn, attr)) if attr != "initialized"
                        else bn.initialized for bn, attr in self._bn])

    def restore(self) -> None:
        if self._state is None:
            return
        arrays, stats = self._state
        for t, arr in zip(self._tensors, arrays):
            t.data[...] = arr
        for (bn, attr), val in zip(self._bn, stats):
            setattr(bn, attr, val)


def _chunks(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _crop(rng, x, y, patch):
    h, w = y.shape
    if (h, w) == (patch, patch):
        return x, y
    if h < patch or w < patch:
        raise ConfigError(f"tile {h}x{w} smaller than patch {patch}")
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    return (x[:, top:top + patch, left:left + patch],
            y[top:top + patch, left:left + patch])


def _batch_accuracy(logit_data, labels):
    pred = logit_data.argmax(axis=1)
    valid = labels != IGNORE_LABEL
    return int((pred == labels)[valid].sum()), int(valid.sum())


def _write_manifest(out_dir, manifest) -> None:
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _finish(out_dir, manifest, status):
    manifest["status"] = status
    _write_manifest(out_dir, manifest)


def _run_epochs(config: TrainConfig, dataset, step_fn, save_fn, guard,
                out_dir, manifest) -> dict:
    """Shared epoch loop: shuffling, patch sampling, plateau decay,
    divergence handling, checkpointing and the manifest write."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    save_fn()  # params at init are the first "last good" state
    lr = config.base_lr
    best = np.inf
    stall = 0
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        loss_sum, n_batches, correct, pixels = 0.0, 0, 0, 0
        for idx in _chunks(order, config.batch_size):
            batch = [dataset[i] for i in idx]
            loss_val, c, p = step_fn(batch, rng, lr)
            if not np.isfinite(loss_val):
                guard.restore()
                save_fn()
                manifest["epochs"] = log
                _finish(out_dir, manifest, "diverged")
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}; last good checkpoint "
                    f"kept at {os.path.join(out_dir, CHECKPOINT_DIR)}")
            loss_sum += loss_val
            n_batches += 1
            correct += c
            pixels += p
        mean_loss = loss_sum / n_batches
        log.append({"epoch": epoch, "loss": mean_loss,
                    "accuracy": correct / max(pixels, 1), "lr": lr})
        if config.plateau_patience:
            if mean_loss < best - 1e-9:
                best, stall = mean_loss, 0
            else:
                stall += 1
                if stall >= config.plateau_patience:
                    lr *= config.decay_factor
                    stall = 0
        save_fn()
    manifest["epochs"] = log
    _finish(out_dir, manifest, "complete")
    return manifest


def train_segnet(spec: NetworkSpec, dataset, config: TrainConfig, out_dir,
                 groups=None, manifest_extra=None) -> dict:
    """Train one network on (input, labels) pairs and write
    out_dir/checkpoint plus out_dir/manifest.json.

    ``groups`` overrides the Table-1-style encoder/decoder split (used by
    the branch-extension protocol to freeze everything but new params).
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    if groups is None:
        groups = param_groups(spec, config.lr_ratio)
    opt = SGD(groups, config.base_lr, config.momentum)
    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    guard = _LastGoodGuard()
    guard.track_spec(spec)

    def step_fn(batch, rng, lr):
        opt.base_lr = lr
        xs, ys = [], []
        for x, y in batch:
            cx, cy = _crop(rng, x, y, config.patch)
            xs.append(cx)
            ys.append(cy)
        xt = Tensor(np.stack(xs))
        labels = np.stack(ys)
        logits, _, branches = forward_parts(spec, xt, mode="train")
        if config.loss_variant == "branch":
            loss = multikernel_loss(branches, labels)
        else:
            loss = cross_entropy_loss(logits, labels)
        val = float(loss.item())
        if np.isfinite(val):
            guard.update()
            backward(loss)
            opt.step()
        c, p = _batch_accuracy(logits.data, labels)
        return val, c, p

    manifest = {
        "config": asdict(config),
        "k": spec.k,
        "scale": spec.scale_name,
        "head_scales": list(spec.head.scales),
        "group_multipliers": {g.role: g.lr_multiplier for g in groups},
        "checkpoint": CHECKPOINT_DIR,
    }
    manifest.update(manifest_extra or {})
    return _run_epochs(config, dataset, step_fn,
                       lambda: save_checkpoint(spec, ckpt_dir), guard,
                       out_dir, manifest)


def save_corrector(corr: CorrectorSpec, dirpath) -> None:
    tenio.save_bundle(dirpath, [(name, t.data, "corrector")
                                for name, t in corr.tensors()])


def load_corrector(corr: CorrectorSpec, dirpath) -> None:
    bundle = tenio.load_bundle(dirpath)
    staged = []
    for name, t in corr.tensors():
        entry = bundle.get(name)
        if entry is None:
            raise TrainingError(f"corrector checkpoint is missing {name}")
        if entry.array.shape != t.shape:
            raise TrainingError(f"{name}: checkpoint shape {entry.array.shape},"
                                f" corrector expects {t.shape}")
        staged.append((t, entry.array))
    for t, arr in staged:
        t.data[...] = arr.astype(t.dtype, copy=False)


def _stream_forward(spec, x, train_stream: bool):
    if train_stream:
        logits, feats, _ = forward_parts(spec, x, mode="train")
        return softmax_channels(logits), feats
    with no_grad():
        logits, feats, _ = forward_parts(spec, x, mode="eval")
        return softmax_channels(logits), feats


def train_fusion(spec_a: NetworkSpec, spec_b: NetworkSpec,
                 corr: CorrectorSpec, dataset, config: TrainConfig, out_dir,
                 unfreeze_streams: bool = False, manifest_extra=None) -> dict:
    """Residual-correction training on (input_a, input_b, labels) triples.

    Streams run frozen in eval mode by default; the corrector is the only
    trainable part, so it starts at the averaging baseline (zero final
    layer) and learns corrections on top of it. Frozen streams therefore
    need initialized batchnorm statistics, i.e. they should come from
    trained checkpoints.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    groups = [ParamGroup("corrector", 1.0, list(corr.tensors()))]
    if unfreeze_streams:
        for tag, spec in (("a", spec_a), ("b", spec_b)):
            for g in param_groups(spec, config.lr_ratio):
                g.role = f"stream_{tag}.{g.role}"
                groups.append(g)
    opt = SGD(groups, config.base_lr, config.momentum)
    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    guard = _LastGoodGuard()
    guard.track_tensors(corr.tensors())
    if unfreeze_streams:
        guard.track_spec(spec_a)
        guard.track_spec(spec_b)

    def step_fn(batch, rng, lr):
        # one crop window per sample, shared by both co-registered streams
        opt.base_lr = lr
        xa, xb, ys = [], [], []
        for a, b, y in batch:
            h, w = y.shape
            if (h, w) == (config.patch, config.patch):
                top = left = 0
            else:
                top = int(rng.integers(0, h - config.patch + 1))
                left = int(rng.integers(0, w - config.patch + 1))
            sl = np.s_[top:top + config.patch, left:left + config.patch]
            xa.append(a[(slice(None),) + sl])
            xb.append(b[(slice(None),) + sl])
            ys.append(y[sl])
        labels = np.stack(ys)
        pa, fa = _stream_forward(spec_a, Tensor(np.stack(xa)), unfreeze_streams)
        pb, fb = _stream_forward(spec_b, Tensor(np.stack(xb)), unfreeze_streams)
        fused = fuse_residual([StreamOutput(pa, fa), StreamOutput(pb, fb)], corr)
        loss = cross_entropy_loss(fused, labels)
        val = float(loss.item())
        if np.isfinite(val):
            guard.update()
            backward(loss)
            opt.step()
        c, p = _batch_accuracy(fused.data, labels)
        return val, c, p

    def save_fn():
        save_corrector(corr, ckpt_dir)
        if unfreeze_streams:
            save_checkpoint(spec_a, os.path.join(out_dir, "stream_a"))
            save_checkpoint(spec_b, os.path.join(out_dir, "stream_b"))

    manifest = {
        "config": asdict(config),
        "k": spec_a.k,
        "variant": "fusion",
        "unfreeze_streams": unfreeze_streams,
        "checkpoint": CHECKPOINT_DIR,
    }
    manifest.update(manifest_extra or {})
    return _run_epochs(config, dataset, step_fn, save_fn, guard, out_dir,
                       manifest)


# ---------------------------------------------------------------------------
# Whole-dataset measurements (used by acceptance checks and the CLI)


def pixel_accuracy(spec: NetworkSpec, dataset, mode: str = "eval",
                   batch_size: int = 8) -> float:
    correct = pixels = 0
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = dataset[i:i + batch_size]
            x = Tensor(np.stack([b[0] for b in batch]))
            labels = np.stack([b[1] for b in batch])
            logits, _, _ = forward_parts(spec, x, mode=mode)
            c, p = _batch_accuracy(logits.data, labels)
            correct += c
            pixels += p
    return correct / max(pixels, 1)


def fusion_pixel_accuracy(spec_a, spec_b, corr, dataset,
                          batch_size: int = 8) -> float:
    correct = pixels = 0
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = dataset[i:i + batch_size]
            xa = Tensor(np.stack([b[0] for b in batch]))
            xb = Tensor(np.stack([b[1] for b in batch]))
            labels = np.stack([b[2] for b in batch])
            pa, fa = _stream_forward(spec_a, xa, False)
            pb, fb = _stream_forward(spec_b, xb, False)
            fused = fuse_residual([StreamOutput(pa, fa),
                                   StreamOutput(pb, fb)], corr)
            c, p = _batch_accuracy(fused.data, labels)
            correct += c
            pixels += p
    return correct / max(pixels, 1)


def measure_fusion_stats(spec_a, spec_b, corr, dataset,
                         batch_size: int = 8):
    """FusionStats over a batch of triples, plus the mean magnitudes the
    small-correction check compares."""
    from .fusion import forward_corrector
    from .tensor import concat_channels
    avg_parts, cor_parts = [], []
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = dataset[i:i + batch_size]
            xa = Tensor(np.stack([b[0] for b in batch]))
            xb = Tensor(np.stack([b[1] for b in batch]))
            pa, fa = _stream_forward(spec_a, xa, False)
            pb, fb = _stream_forward(spec_b, xb, False)
            avg = fuse_average([StreamOutput(pa, fa), StreamOutput(pb, fb)])
            correction = forward_corrector(corr, concat_channels([fa, fb]))
            avg_parts.append(avg.data)
            cor_parts.append(correction.data)
    avg = np.concatenate(avg_parts)
    cor = np.concatenate(cor_parts)
    stats = fusion_stats(avg, cor)
    return stats, float(np.abs(cor).mean()), float(np.abs(avg).mean())
