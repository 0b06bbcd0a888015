"""AdaMax optimization of the kernel network."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, SampleRecord, augment_sample, stack_samples
from .errors import ShapeError, TrainingError
from .net import save_checkpoint
from .synth import batch_loss

log = logging.getLogger(__name__)


class AdaMax:
    """AdaMax with the infinity-norm accumulator.

    Elements whose accumulator is still zero (no gradient seen yet) are left
    untouched instead of being divided by an epsilon.
    """

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.u = {k: np.zeros_like(p) for k, p in self.params.items()}

    def step(self, grads):
        for k, p in self.params.items():
            if grads[k].shape != p.shape:
                raise ShapeError(f"gradient for {k} has dims {list(grads[k].shape)}, expected {list(p.shape)}")
        self.t += 1
        coef = self.lr / (1 - self.beta1 ** self.t)
        for k, p in self.params.items():
            g = grads[k]
            m, u = self.m[k], self.u[k]
            m[...] = self.beta1 * m + (1 - self.beta1) * g
            u[...] = np.maximum(self.beta2 * u, np.abs(g))
            nz = u > 0
            p[nz] = p[nz] - coef * m[nz] / u[nz]


def adamax_step(state, params, grads):
    """Functional form: applies one update in place and returns ``(params, state)``."""
    state.params = params
    state.step(grads)
    return params, state


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 128
    seed: int = 0
    lam: float = 1.0
    validation_fraction: float = 0.1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    lr_final: float | None = None  # linear decay target; None keeps lr constant

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2 for batch norm, got {self.batch_size}")

    def lr_at(self, step):
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        return self.lr + (self.lr_final - self.lr) * (step - 1) / (self.steps - 1)


@dataclass
class TrainResult:
    net: object
    history: list = field(default_factory=list)  # (step, loss, color, grad)
    validation: tuple | None = None


def _patches(records):
    if isinstance(records, DatasetManifest):
        records = records.load_records()
    return [r.patches if isinstance(r, SampleRecord) else np.asarray(r) for r in records], \
        [getattr(r, "source", str(i)) for i, r in enumerate(records)]


def split_validation(n, fraction):
    """Train indices and the held-out tail of manifest order."""
    n_val = int(round(n * fraction)) if n > 1 else 0
    return list(range(n - n_val)), list(range(n - n_val, n))


def format_log_line(step, loss, color, grad):
    return f"step {step} loss {loss:.6f} color {color:.6f} grad {grad:.6f}"


def train_loop(net, records, config, on_log=None):
    """Train ``net`` in place on ``records`` (a manifest, SampleRecords or raw patch groups).

    Each step draws a batch with replacement, augments every sample, averages
    the per-sample losses and applies one AdaMax update. ``on_log`` receives
    one formatted line per step.
    """
    patches, names = _patches(records)
    if not patches:
        raise TrainingError("empty dataset")
    train_idx, val_idx = split_validation(len(patches), config.validation_fraction)
    rng = np.random.default_rng(config.seed)
    params = dict(net.parameters())
    opt = AdaMax(params, config.lr, config.beta1, config.beta2)
    result = TrainResult(net)
    dtype = net.dtype
    for step in range(1, config.steps + 1):
        batch = [train_idx[i] for i in rng.integers(0, len(train_idx), config.batch_size)]
        samples = [augment_sample(patches[i], net.config, rng) for i in batch]
        x, p1, p2, color, grads = (a.astype(dtype, copy=False) for a in stack_samples(samples))
        kernel = net.forward(x, train=True)
        (total, ec, eg), d_kernel = batch_loss(p1, p2, kernel, color, grads, config.lam)
        loss = float(total.mean())
        if not np.isfinite(loss):
            bad = [names[batch[i]] for i in np.flatnonzero(~np.isfinite(total))] or [names[i] for i in batch]
            raise TrainingError(f"non-finite loss at step {step}; samples {bad}")
        net.backward(d_kernel / len(batch))
        opt.lr = config.lr_at(step)
        opt.step(net.gradients())
        entry = (step, loss, float(ec.mean()), float(eg.mean()))
        result.history.append(entry)
        if on_log is not None:
            on_log(format_log_line(*entry))
        if config.checkpoint_every and config.checkpoint_path and step % config.checkpoint_every == 0:
            save_checkpoint(net, config.checkpoint_path)
    if val_idx:
        result.validation = validate(net, [patches[i] for i in val_idx], config.lam)
    return result


def validate(net, records, lam=1.0, chunk=256):
    """Mean colour loss and mean total loss in infer phase with centred, unflipped crops."""
    patches, _ = _patches(records)
    if not patches:
        raise ValueError("validation needs at least one sample")
    ec_sum = total_sum = 0.0
    for start in range(0, len(patches), chunk):
        samples = [augment_sample(p, net.config, None, augment=False)
                   for p in patches[start:start + chunk]]
        x, p1, p2, color, grads = (a.astype(net.dtype, copy=False) for a in stack_samples(samples))
        kernel = net.forward(x, train=False)
        (total, ec, _), _ = batch_loss(p1, p2, kernel, color, grads, lam, with_grad=False)
        ec_sum += float(ec.sum())
        total_sum += float(total.sum())
    return ec_sum / len(patches), total_sum / len(patches)
