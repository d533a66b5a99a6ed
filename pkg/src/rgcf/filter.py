"""The gradient-classification filter.

A small ReLU net with a sigmoid head takes a flat gradient with the scalar
training loss appended as the final input coordinate and outputs the
probability that the gradient is Byzantine. It is trained online, one
(gradient, loss) example per step, inside a simulated parameter-server run
with one honest and one Byzantine worker; the simulated server applies only
the ground-truth-honest gradients, so the filter learns from an optimally
trained trajectory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .attacks import RANDOM_GAUSSIAN, AttackSpec, apply_attack
from .core import SID_SERVER_INIT, GradientReport, Provenance, RngStream, param_vector
from .data import Dataset, sample_minibatch
from .models import (
    AdamState,
    Architecture,
    ServerModel,
    ShapeMismatchError,
    adam_init,
    adam_step,
    apply_update,
    init_params,
    mlp_backward,
    mlp_forward,
    unflatten,
)

PRED_CLAMP = 1e-7

MAGIC = b"RGCF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FilterNet:
    """Classifier over (gradient, loss) inputs: (d+1) -> 64 -> 32 -> 1.

    With normalize=True (the default) the gradient block of the input is
    rescaled to norm sqrt(d) before the net sees it, so classification
    depends on the gradient's direction rather than its magnitude; the
    scalar loss passes through unscaled. normalize=False feeds the raw
    gradient.
    """

    d: int
    params: np.ndarray
    adam: AdamState
    hidden: tuple[int, ...] = (64, 32)
    threshold: float = 0.5
    normalize: bool = True

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.d + 1, *self.hidden, 1)

    def __post_init__(self):
        expected = Architecture(self.d + 1, self.hidden, 1).param_count
        if self.params.shape != (expected,):
            raise ShapeMismatchError(f"filter params {self.params.shape} != expected ({expected},)")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0,1)")


def filter_init(
    d: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (64, 32),
    lr: float = 0.002,
    threshold: float = 0.5,
    normalize: bool = True,
) -> FilterNet:
    arch = Architecture(d + 1, hidden, 1)
    params = init_params(arch, rng)
    return FilterNet(
        d=d,
        params=params,
        adam=adam_init(arch.param_count, lr=lr),
        hidden=hidden,
        threshold=threshold,
        normalize=normalize,
    )


def _filter_input(filt: FilterNet, grad: np.ndarray, loss: float) -> np.ndarray:
    if grad.shape != (filt.d,):
        raise ShapeMismatchError(f"gradient length {grad.shape} != filter d {filt.d}")
    if not np.isfinite(loss):
        raise ValueError("loss must be finite")
    if filt.normalize:
        norm = np.linalg.norm(grad)
        if norm > 0:
            grad = grad * (np.sqrt(filt.d) / norm)
    return np.concatenate([grad, [loss]])[None, :]


def filter_forward(filt: FilterNet, grad: np.ndarray, loss: float) -> float:
    """Probability in (0,1) that the gradient is Byzantine.

    This is the per-decision hot path (one call per transferred gradient),
    so it builds the padded input in place and runs 1-D matvecs instead of
    going through the batched training-path forward.
    """
    if grad.shape != (filt.d,):
        raise ShapeMismatchError(f"gradient length {grad.shape} != filter d {filt.d}")
    if not np.isfinite(loss):
        raise ValueError("loss must be finite")
    x = np.empty(filt.d + 1)
    norm = np.linalg.norm(grad) if filt.normalize else 0.0
    if filt.normalize and norm > 0:
        np.multiply(grad, np.sqrt(filt.d) / norm, out=x[: filt.d])
    else:
        x[: filt.d] = grad
    x[filt.d] = loss
    layers = unflatten(filt.params, filt.layer_sizes)
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return float(1.0 / (1.0 + np.exp(-a[0])))


def classify(filt: FilterNet, grad: np.ndarray, loss: float) -> int:
    """1 = reject (Byzantine), 0 = accept. The threshold boundary rejects."""
    return 1 if filter_forward(filt, grad, loss) >= filt.threshold else 0


def filter_loss(pred: float, label: int, p: float) -> float:
    """Weighted binary cross-entropy (negative log-likelihood); the
    Byzantine class is up-weighted by p."""
    if p <= 0:
        raise ValueError("p must be positive")
    q = min(max(pred, PRED_CLAMP), 1.0 - PRED_CLAMP)
    if label == 1:
        return -p * np.log(q)
    return -np.log(1.0 - q)


def filter_gradient(
    filt: FilterNet, report: GradientReport, label: int, p: float
) -> tuple[np.ndarray, float]:
    """Gradient of the single-example weighted BCE w.r.t. the filter's own
    parameters, plus the loss value."""
    x = _filter_input(filt, report.gradient, report.loss)
    z, acts = mlp_forward(filt.params, filt.layer_sizes, x)
    pred = 1.0 / (1.0 + np.exp(-z[0, 0]))
    loss = filter_loss(pred, label, p)
    q = min(max(pred, PRED_CLAMP), 1.0 - PRED_CLAMP)
    # dL/dq through the clamp, then sigmoid derivative at the raw pred.
    dq = -p / q if label == 1 else 1.0 / (1.0 - q)
    dz = np.array([[dq * pred * (1.0 - pred)]])
    return mlp_backward(filt.params, filt.layer_sizes, acts, dz), loss


def filter_train_step(
    filt: FilterNet, report: GradientReport, label: int, p: float
) -> tuple[FilterNet, float]:
    """One Adam update on the single-example weighted BCE.

    Returns the updated filter and the pre-update loss value.
    """
    grad, loss = filter_gradient(filt, report, label, p)
    adam, new_params = adam_step(filt.adam, filt.params, grad)
    return replace(filt, params=param_vector(new_params), adam=adam), loss


@dataclass(frozen=True)
class FilterTrainConfig:
    episodes: int = 1
    steps_per_episode: int = 500
    positive_weight: float = 10.0
    filter_lr: float = 0.002
    server_lr: float = 0.01
    batch_size: int = 128
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(RANDOM_GAUSSIAN, 1.0))
    threshold: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if min(self.episodes, self.steps_per_episode, self.batch_size) < 0:
            raise ValueError("episodes/steps/batch_size must be non-negative")
        if min(self.positive_weight, self.filter_lr, self.server_lr) <= 0:
            raise ValueError("positive_weight and learning rates must be positive")


@dataclass
class FilterTrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    running_accuracy: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    server_losses: list[float] = field(default_factory=list)


# Stream ids split off the experiment seed; fixed so adding streams never
# perturbs existing ones.
_SID_FILTER_INIT = 10
_SID_SERVER_INIT = SID_SERVER_INIT
_SID_WORKER_PICK = 12
_SID_BATCH = 13
_SID_ATTACK = 14


def train_filter(
    cfg: FilterTrainConfig,
    local_data: Dataset,
    server_arch: Architecture,
    seed: int,
) -> tuple[FilterNet, FilterTrainLog]:
    """Simulation-based training: one honest and one Byzantine worker,
    sampled with equal probability each step. The simulated server is
    updated with the ground-truth label (drop every Byzantine gradient),
    not the filter's prediction, so filter quality cannot disturb the
    server trajectory it learns from."""
    if local_data.size < 1:
        raise ValueError("local_data must be nonempty")
    d = server_arch.param_count
    filt = filter_init(
        d,
        RngStream(seed, _SID_FILTER_INIT).generator(),
        lr=cfg.filter_lr,
        threshold=cfg.threshold,
        normalize=cfg.normalize,
    )
    init_rng = RngStream(seed, _SID_SERVER_INIT).generator()
    pick_rng = RngStream(seed, _SID_WORKER_PICK).generator()
    batch_rng = RngStream(seed, _SID_BATCH).generator()
    attack_rng = RngStream(seed, _SID_ATTACK).generator()

    log = FilterTrainLog()
    correct = 0
    step = 0
    for _episode in range(cfg.episodes):
        params = init_params(server_arch, init_rng)
        for _t in range(cfg.steps_per_episode):
            byz = int(pick_rng.integers(0, 2))
            batch = sample_minibatch(local_data, cfg.batch_size, batch_rng)
            report = models.backward(ServerModel(server_arch, params), batch)
            if byz:
                attacked = apply_attack(cfg.attack, report.gradient, attack_rng)
                report = GradientReport(
                    gradient=param_vector(attacked),
                    loss=report.loss,
                    provenance=Provenance(True, cfg.attack.kind),
                )
            params = apply_update(params, report.gradient, cfg.server_lr, byz)
            predicted = classify(filt, report.gradient, report.loss)
            filt, loss = filter_train_step(filt, report, byz, cfg.positive_weight)
            step += 1
            correct += int(predicted == byz)
            log.steps.append(step)
            log.losses.append(loss)
            log.running_accuracy.append(correct / step)
            log.labels.append(byz)
            log.predictions.append(predicted)
            log.server_losses.append(report.loss)
    return filt, log


def save_filter(filt: FilterNet, path: str) -> None:
    """Versioned binary format: magic, version, d, layer sizes, threshold,
    then little-endian float64 weights in canonical flattening order."""
    sizes = filt.layer_sizes
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, filt.d))
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(struct.pack("<d", filt.threshold))
        f.write(struct.pack("<B", int(filt.normalize)))
        f.write(np.asarray(filt.params, dtype="<f8").tobytes())


def load_filter(path: str) -> FilterNet:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a filter file (bad magic)")
        version, d = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (n_sizes,) = struct.unpack("<I", f.read(4))
        sizes = struct.unpack(f"<{n_sizes}I", f.read(4 * n_sizes))
        (threshold,) = struct.unpack("<d", f.read(8))
        (normalize,) = struct.unpack("<B", f.read(1))
        count = Architecture(sizes[0], sizes[1:-1], sizes[-1]).param_count
        params = np.frombuffer(f.read(8 * count), dtype="<f8")
        if params.shape != (count,):
            raise ValueError(f"{path}: truncated weight block")
    return FilterNet(
        d=d,
        params=param_vector(params),
        adam=adam_init(count),
        hidden=tuple(sizes[1:-1]),
        threshold=threshold,
        normalize=bool(normalize),
    )
