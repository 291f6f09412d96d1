"""Training with early stopping, batched evaluation, checkpoint IO, and
parameter accounting."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import WindowedDataset
from .metrics import MetricsReport, evaluate
from .model import AFDGCN, config_from_dict, config_to_dict
from .optim import Adam
from .tensor import Tensor, TensorError, backward, checked_mode, fresh_tape, no_grad, smooth_l1_loss


class DivergenceError(RuntimeError):
    """Training loss went non-finite; aborted with diagnostics."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters with their standard defaults."""

    batch_size: int = 64
    max_epochs: int = 300
    lr: float = 0.003
    patience: int = 15
    seed: int = 0
    loss: str = "smooth_l1"
    monitor: str = "val_mae"
    mask_threshold: float = 0.0
    grad_clip: float = 0.0  # 0 disables clipping
    precision: str = "double"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TensorError("batch_size must be >= 1")
        if self.precision not in ("double", "single"):
            raise TensorError(f"precision must be double or single, got {self.precision!r}")
        if not 0 < self.patience < self.max_epochs:
            raise TensorError(
                f"patience must lie in (0, max_epochs), got {self.patience} vs {self.max_epochs}")
        if self.loss != "smooth_l1":
            raise TensorError(f"unsupported loss: {self.loss}")
        if self.monitor != "val_mae":
            raise TensorError(f"unsupported early-stopping monitor: {self.monitor}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("epoch,train_loss,val_mae,seconds\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.train_loss:.17g},{r.val_mae:.17g},{r.seconds:.3f}\n")

    @property
    def best_val_mae(self) -> float:
        for r in self.records:
            if r.epoch == self.best_epoch:
                return r.val_mae
        return float("inf")


def predict(model: AFDGCN, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Evaluation-mode forward over all windows, without taping."""
    outs = []
    with no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            outs.append(model.forward(Tensor(inputs[lo:lo + batch_size])).data)
    return np.concatenate(outs, axis=0)


def evaluate_split(model: AFDGCN, ds: WindowedDataset,
                   mask_threshold: float = 0.0) -> MetricsReport:
    """Metrics on one split in original units."""
    pred_norm = predict(model, ds.inputs)
    pred = pred_norm * ds.stats.std[0] + ds.stats.mean[0]
    return evaluate(pred, ds.targets_original(), mask_threshold)


def _clip_gradients(params, max_norm: float) -> None:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor


def train(model: AFDGCN, datasets: dict[str, WindowedDataset],
          config: TrainConfig) -> TrainLog:
    """Minibatch training with best-on-validation early stopping.

    Shuffling and dropout draws come from one seeded generator, so a given
    (seed, config, data) triple always produces the same log and the same
    final parameters. The model is left holding the best-validation weights.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    train_ds, val_ds = datasets["train"], datasets["val"]
    n = train_ds.n_windows
    log = TrainLog()
    best_val = float("inf")
    best_params: list[np.ndarray] | None = None
    stale = 0

    with fresh_tape(), checked_mode(False):
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            loss_sum = 0.0
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                x = Tensor(train_ds.inputs[idx])
                y = Tensor(train_ds.targets[idx])
                pred = model.forward(x, training=True, rng=rng)
                loss = smooth_l1_loss(pred, y)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch}, batch {lo // config.batch_size}")
                backward(loss)
                if config.grad_clip > 0:
                    _clip_gradients(params, config.grad_clip)
                opt.step()
                opt.zero_grad()
                loss_sum += value * len(idx)
            train_loss = loss_sum / n
            val_mae = evaluate_split(model, val_ds, config.mask_threshold).mae
            seconds = time.perf_counter() - t0
            log.records.append(EpochRecord(epoch, train_loss, val_mae, seconds))
            if val_mae < best_val:
                best_val = val_mae
                log.best_epoch = epoch
                best_params = [p.data.copy() for p in params]
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

    if best_params is not None:
        for p, data in zip(params, best_params):
            p.data = data
    return log


def count_parameters(model: AFDGCN) -> tuple[int, dict[str, int]]:
    """Total trainable elements and the per-module breakdown."""
    return model.parameter_count()


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, config manifest, named float64 blobs

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1
ADJACENCY_BLOB = "graph.predefined_adjacency"


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def save_checkpoint(path, model: AFDGCN) -> None:
    """Write the versioned container documented in the README: a key = value
    manifest of the model config followed by named little-endian float64
    blobs (every parameter, plus the pre-defined adjacency when present)."""
    manifest = "".join(f"{k} = {v}\n" for k, v in sorted(config_to_dict(model.config).items()))
    blobs: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in model.named_parameters()]
    if model.graph.predefined_adjacency is not None:
        blobs.append((ADJACENCY_BLOB, model.graph.predefined_adjacency))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        raw = manifest.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            nraw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nraw)))
            fh.write(nraw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse the container into (config key-values, named arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", blob[8:12])
    pos = 12
    manifest = blob[pos:pos + mlen].decode("utf-8")
    pos += mlen
    (n_blobs,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        (nlen,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        shape = struct.unpack(f"<{ndim}I", blob[pos:pos + 4 * ndim])
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", offset=pos,
                                     count=count).reshape(shape).astype(np.float64)
        pos += count * 8
    config: dict[str, str] = {}
    for line in manifest.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config, arrays


def load_checkpoint(path) -> AFDGCN:
    """Rebuild the model from a checkpoint; parameters load bit-exactly."""
    config_kv, arrays = read_checkpoint(path)
    config = config_from_dict(config_kv)
    adjacency = arrays.get(ADJACENCY_BLOB)
    if adjacency is not None and adjacency.shape != (config.n_nodes, config.n_nodes):
        raise CheckpointError(
            f"{path}: {ADJACENCY_BLOB} has shape {adjacency.shape}, expected "
            f"({config.n_nodes}, {config.n_nodes})")
    try:
        model = AFDGCN(config, adjacency=adjacency, seed=0)
    except TensorError as e:
        raise CheckpointError(f"{path}: checkpoint config is inconsistent: {e}") from e
    for name, tensor in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    return model


def checkpoint(mode: str, path, model: AFDGCN | None = None):
    """save or load a model container."""
    if mode == "save":
        if model is None:
            raise CheckpointError("checkpoint save needs a model")
        save_checkpoint(path, model)
        return model
    if mode == "load":
        return load_checkpoint(path)
    raise CheckpointError(f"unknown checkpoint mode: {mode}")
