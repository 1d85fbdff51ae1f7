"""Maximum-likelihood training and checkpoint persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import CheckpointError, DataError, NumericalError, TrainingError
from .masking import MaskDistribution, make_rng, sample_mask
from .model import MODES, ACFlow, LossConfig

log = logging.getLogger(__name__)

MAGIC = b"ACFW"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # multiplicative, applied after every epoch
    grad_clip: float = 5.0
    mask_distribution: MaskDistribution = field(default_factory=MaskDistribution)
    lam: float = 1.0
    seed: int = 0
    mode: str = "conditional"
    patience: int = 20
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if isinstance(self.mask_distribution, str):
            self.mask_distribution = MaskDistribution.parse(self.mask_distribution)

    def digest(self):
        d = asdict(self)
        d["mask_distribution"] = str(self.mask_distribution)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return self.t, [m.copy() for m in self.m], [v.copy() for v in self.v]

    def restore(self, state):
        self.t, m, v = state
        self.m = [a.copy() for a in m]
        self.v = [a.copy() for a in v]


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def masks_for_mode(mode, m_data, dist, rng):
    """Observed and non-missing masks for one batch under a training mode."""
    if mode == "conditional":
        m = np.ones_like(m_data)
        return sample_mask(dist, m, rng), m
    if mode == "conditional_missing":
        return sample_mask(dist, m_data, rng), m_data
    b = sample_mask(dist, m_data, rng)
    return np.zeros_like(b), (m_data & (1 - b)).astype(np.uint8)


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_nll, valid_nll, lr):
        self.rows.append({"epoch": epoch, "train_nll": train_nll, "valid_nll": valid_nll, "lr": lr})

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "valid_nll", "lr"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _validation_nll(model, x, m_data, b, m):
    if len(x) == 0:
        return float("nan")
    lp = []
    for start in range(0, len(x), 2048):
        sl = slice(start, start + 2048)
        lp.append(model.cond_log_prob(x[sl], b[sl], m[sl], standardized=True))
    return float(-np.mean(np.concatenate(lp)))


def train(model, dataset, cfg, progress=None):
    """Fit ``model`` on ``dataset.train``; returns ``(model, history)``.

    The parameters with the best validation NLL are restored at the end.  A
    non-finite loss aborts the epoch, restores the epoch-start state and halves
    the learning rate; a second occurrence raises :class:`TrainingError`.
    """
    history = History()
    if cfg.epochs <= 0:
        return model, history
    x_train, m_train = dataset.split("train")
    x_valid, m_valid = dataset.split("valid")
    if cfg.mode == "conditional" and not (np.all(m_train) and np.all(m_valid)):
        raise DataError("training data has missing values; use mode 'conditional_missing' or 'marginal'")
    model.set_standardizer(*dataset.standardizer())
    model.mode = cfg.mode
    model.names = list(dataset.names)

    rng = make_rng(cfg.seed)
    valid_b, valid_m = masks_for_mode(cfg.mode, m_valid, cfg.mask_distribution, make_rng(cfg.seed + 1))
    params = [p for p in model.parameters() if p.trainable]
    opt = Adam(params, lr=cfg.learning_rate)
    loss_cfg = LossConfig(cfg.lam)
    best = (float("inf"), model.state_dict(), 0)
    failures = 0
    steps = 0
    stale = 0
    n = len(x_train)

    for epoch in range(1, cfg.epochs + 1):
        snapshot = (model.state_dict(), opt.state())
        order = rng.permutation(n)
        total, count, diverged = 0.0, 0, False
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            b, m = masks_for_mode(cfg.mode, m_train[idx], cfg.mask_distribution, rng)
            try:
                loss = model.loss(x_train[idx], b, m, loss_cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(value)
                model.zero_grad()
                dc.backward(loss)
                grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)
                if not grads_ok:
                    raise FloatingPointError("non-finite gradient")
            except (FloatingPointError, NumericalError) as exc:
                failures += 1
                log.warning("epoch %d: non-finite loss (%s); restoring epoch start", epoch, exc)
                if failures > 1:
                    raise TrainingError(
                        f"loss diverged twice (epoch {epoch}, step {steps}, lr {opt.lr:g}): {exc}"
                    ) from exc
                model.load_state_dict(snapshot[0])
                opt.restore(snapshot[1])
                opt.lr *= 0.5
                diverged = True
                break
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            total += value * len(idx)
            count += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        if diverged:
            continue
        valid_nll = _validation_nll(model, x_valid, m_valid, valid_b, valid_m)
        train_nll = total / max(count, 1)
        history.append(epoch, train_nll, valid_nll, opt.lr)
        if progress is not None:
            progress(history.rows[-1])
        score = valid_nll if math.isfinite(valid_nll) else train_nll
        if score < best[0]:
            best = (score, model.state_dict(), epoch)
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience or (cfg.max_steps is not None and steps >= cfg.max_steps):
            break
        opt.lr *= cfg.lr_decay

    model.load_state_dict(best[1])
    model.training_info = {
        "epoch": best[2],
        "best_valid_nll": best[0],
        "config_digest": cfg.digest(),
        "mode": cfg.mode,
    }
    return model, history


# checkpoints


def _pack_tensor(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def serialize(model):
    info = getattr(model, "training_info", {})
    header = {
        "descriptor": model.descriptor,
        "mode": model.mode,
        "names": list(model.names),
        "epoch": info.get("epoch", 0),
        "best_valid_nll": info.get("best_valid_nll"),
        "config_digest": info.get("config_digest", ""),
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = dict(sorted(model.state_dict().items()))
    tensors["standardizer.shift"] = model.shift
    tensors["standardizer.std"] = model.std
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(name, arr) for name, arr in tensors.items()]
    return b"".join(parts)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize(model))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an ACFlow checkpoint (bad magic bytes)")
    version, text_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(text_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    try:
        model = ACFlow(header["descriptor"])
        model.set_standardizer(tensors.pop("standardizer.shift"), tensors.pop("standardizer.std"))
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its architecture: {exc}") from exc
    model.mode = header.get("mode", "conditional")
    model.names = header.get("names") or model.names
    model.training_info = {
        "epoch": header.get("epoch", 0),
        "best_valid_nll": header.get("best_valid_nll"),
        "config_digest": header.get("config_digest", ""),
        "mode": model.mode,
    }
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
