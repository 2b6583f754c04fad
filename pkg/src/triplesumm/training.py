"""AdamW, cosine schedule, the training loop and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .metrics import evaluate
from .model import ModelConfig, compute_loss, forward_record

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    total_steps: int | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    select_best: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: dict
    v: dict
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: set = field(default_factory=set)

    @classmethod
    def create(cls, params: dict, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            betas=tuple(betas), eps=eps, weight_decay=weight_decay,
            no_decay={k for k in params if _exempt_from_decay(k)},
        )


def _exempt_from_decay(name: str) -> bool:
    parts = name.split(".")
    return parts[0] == "lme" or any(p.startswith("ln") for p in parts[:-1])


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float) -> None:
    """One in-place AdamW update; missing gradients count as zero."""
    b1, b2 = state.betas
    for k, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        data = p.data
        if state.weight_decay and k not in state.no_decay:
            data *= data.dtype.type(1.0 - lr * state.weight_decay)
        m, v = state.m[k], state.v[k]
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(data.dtype, copy=False)


def cosine_lr_at(step: int, total_steps: int, base_lr: float = 1e-4, min_lr: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    val_tau: float | None = None
    val_rho: float | None = None


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_tau: float | None = None

    @property
    def losses(self) -> list:
        return [e.loss for e in self.epochs]

    def to_json(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "best_val_tau": self.best_val_tau}

    @classmethod
    def from_json(cls, d: dict) -> "History":
        return cls([EpochLog(**e) for e in d["epochs"]], d.get("best_epoch"), d.get("best_val_tau"))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    state: OptimState
    history: History


def _snapshot(params: dict) -> dict:
    return {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in params.items()}


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(train_records, model_config: ModelConfig, params: dict, train_config: TrainConfig,
          val_records=None, state: OptimState | None = None, history: History | None = None,
          best_params: dict | None = None, stop_after: int | None = None, on_epoch=None) -> TrainResult:
    """Minimize the summed squared error over ``train_records``.

    Shuffling and dropout draw from generators keyed on (seed, epoch, step),
    so a run resumed from a checkpoint at an epoch boundary retraces the
    uninterrupted one. ``stop_after`` ends the call after that many epochs of
    this invocation; ``on_epoch(epoch, result)`` runs after every epoch.
    """
    records = list(train_records)
    if not records:
        raise ValueError("training split is empty")
    for r in records:
        if r.gt is None:
            raise ValueError(f"training record {r.id} has no ground truth")
    tc = train_config
    n_batches = math.ceil(len(records) / tc.batch_size)
    total = tc.total_steps or tc.epochs * n_batches
    state = state or OptimState.create(params, tc.betas, tc.eps, tc.weight_decay)
    history = history or History()
    best_params = best_params if best_params is not None else _snapshot(params)
    start_epoch = state.t // n_batches
    if state.t % n_batches:
        raise CheckpointError("optimizer state is not at an epoch boundary")

    ran = 0
    for epoch in range(start_epoch, tc.epochs):
        if stop_after is not None and ran >= stop_after:
            break
        order = epoch_order(tc.seed, epoch, len(records))
        losses = []
        lr = tc.lr
        for b in range(n_batches):
            batch = [records[i] for i in order[b * tc.batch_size:(b + 1) * tc.batch_size]]
            for p in params.values():
                p.grad = None
            for j, rec in enumerate(batch):
                rng = np.random.default_rng([tc.seed, epoch, b, j])
                out = forward_record(model_config, params, rec, training=True, rng=rng)
                loss = compute_loss(out.scores, rec.gt)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss on {rec.id} at epoch {epoch}")
                loss.backward()
                losses.append(value)
            scale = 1.0 / len(batch)
            grads = {k: (None if p.grad is None else p.grad * scale) for k, p in params.items()}
            lr = cosine_lr_at(min(state.t, total), total, tc.lr, tc.min_lr)
            adamw_step(params, grads, state, lr)
        for p in params.values():
            p.grad = None

        entry = EpochLog(epoch, float(np.mean(losses)), lr)
        if val_records:
            report = evaluate(model_config, params, val_records)
            entry.val_tau, entry.val_rho = report.kendall_tau, report.spearman_rho
            if tc.select_best and entry.val_tau is not None and (
                    history.best_val_tau is None or entry.val_tau > history.best_val_tau):
                history.best_val_tau, history.best_epoch = entry.val_tau, epoch
                best_params = _snapshot(params)
        elif tc.select_best:
            history.best_epoch = epoch
            best_params = _snapshot(params)
        history.epochs.append(entry)
        log.info("epoch %d loss %.6f lr %.3g val_tau %s", epoch, entry.loss, lr, entry.val_tau)
        ran += 1
        result = TrainResult(params, best_params, state, history)
        if on_epoch is not None:
            on_epoch(epoch, result)
    return TrainResult(params, best_params, state, history)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    state: OptimState | None
    step: int
    meta: dict


def save_checkpoint(path, config: ModelConfig, params: dict, state: OptimState | None = None,
                    meta: dict | None = None) -> None:
    """Write params (and optimizer moments) as raw little-endian float32 tensors."""
    tensors = [(k, p.data) for k, p in params.items()]
    opt = None
    if state is not None:
        tensors += [(f"adam.m/{k}", a) for k, a in state.m.items()]
        tensors += [(f"adam.v/{k}", a) for k, a in state.v.items()]
        opt = {"betas": list(state.betas), "eps": state.eps, "weight_decay": state.weight_decay,
               "no_decay": sorted(state.no_decay)}
    header = json.dumps({"config": config.to_dict(), "optimizer": opt, "meta": meta or {}},
                        sort_keys=True).encode()
    step = state.t if state is not None else 0
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), bytes.fromhex(config.config_hash()),
             struct.pack("<QI", step, len(header)), header, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path, expected_config)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc


def _parse_checkpoint(buf: bytes, path, expected_config) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[6:38].hex()
    step, hlen = struct.unpack_from("<QI", buf, 38)
    off = 50
    header = json.loads(buf[off:off + hlen])
    off += hlen
    config = ModelConfig.from_dict(header["config"])
    if config.config_hash() != digest:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_config is not None and expected_config.config_hash() != digest:
        raise CheckpointError(f"{path}: config hash mismatch (checkpoint {digest[:12]}, "
                              f"expected {expected_config.config_hash()[:12]})")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        if off + 4 * size > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after tensor directory")

    params = {k: Tensor(a, requires_grad=True, name=k) for k, a in arrays.items() if "/" not in k}
    state = None
    opt = header.get("optimizer")
    if opt is not None:
        state = OptimState(
            m={k: arrays[f"adam.m/{k}"] for k in params},
            v={k: arrays[f"adam.v/{k}"] for k in params},
            t=int(step), betas=tuple(opt["betas"]), eps=opt["eps"], weight_decay=opt["weight_decay"],
            no_decay=set(opt["no_decay"]),
        )
    return Checkpoint(config, params, state, int(step), header.get("meta", {}))
