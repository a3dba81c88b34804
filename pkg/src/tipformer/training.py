"""BCE objective, RAdam + LookAhead, the training loop and TPFC checkpoints.

Optimizers work on one flat float32 vector: on construction every parameter's
``data`` is rebound to a view into that vector, so a step is a handful of
vectorized numpy operations regardless of how many tensors the model has.

TPFC layout (little-endian)::

    b"TPFC" | u32 version=1 | u32 header_len | header (UTF-8 JSON) |
    float32 payloads in manifest order (parameters, then optimizer state)
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tipformer import autodiff as ad
from tipformer.data import DatasetSplit, InteractionPair
from tipformer.embeddings import Featurizer
from tipformer.errors import ConfigError, FormatError, NumericError, UsageError
from tipformer.model import ModelConfig, TipFormer, init_params

PROB_EPS = 1e-7
TPFC_MAGIC = b"TPFC"
TPFC_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    batch_size: int = 1
    dropout_rate: float = 0.2
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.lookahead_k < 1:
            raise ConfigError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_alpha must lie in (0, 1]")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------- loss


def bce_loss(p: ad.Tensor, y) -> ad.Tensor:
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].

    ``p`` may hold a single probability or a batch; the batch form is summed.
    """
    return ad.bce(p, y, PROB_EPS)


def bce_value(p: float, y: int) -> float:
    pc = min(max(p, PROB_EPS), 1 - PROB_EPS)
    return -(y * math.log(pc) + (1 - y) * math.log(1 - pc))


# ---------------------------------------------------------------- optimizers


@dataclass
class RAdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def radam_step(theta: np.ndarray, grad: np.ndarray, state: RAdamState, config: TrainConfig) -> None:
    """One in-place rectified-Adam update of ``theta``."""
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    state.t += 1
    t = state.t
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**t)
    rho_inf = 2 / (1 - b2) - 1
    b2t = b2**t
    rho_t = rho_inf - 2 * t * b2t / (1 - b2t)
    if rho_t > 4:
        r_t = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        v_hat = state.v / (1 - b2t)
        theta -= (lr * r_t) * m_hat / (np.sqrt(v_hat) + config.eps)
    else:
        theta -= lr * m_hat


def lookahead_sync(theta: np.ndarray, slow: np.ndarray, alpha: float) -> None:
    """Move slow weights toward the fast ones and reset the fast weights onto them."""
    if alpha == 1.0:
        slow[...] = theta
    else:
        slow += alpha * (theta - slow)
    theta[...] = slow


def flatten_parameters(params: Sequence[ad.Tensor]) -> np.ndarray:
    """Copy parameters into one float32 vector and rebind each ``data`` to a view of it."""
    flat = np.concatenate([p.data.reshape(-1) for p in params]).astype(np.float32)
    offset = 0
    for p in params:
        n = p.data.size
        p.data = flat[offset:offset + n].reshape(p.data.shape)
        offset += n
    return flat


class Optimizer:
    """RAdam inner steps wrapped by LookAhead, over a flat parameter vector."""

    def __init__(self, params: Sequence[ad.Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.theta = flatten_parameters(self.params)
        self.radam = RAdamState(np.zeros_like(self.theta), np.zeros_like(self.theta))
        self.slow = self.theta.copy()
        self.inner_steps = 0

    def gather_grad(self) -> np.ndarray:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise UsageError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        return np.concatenate([p.grad.reshape(-1) for p in self.params]).astype(np.float32, copy=False)

    def step(self) -> None:
        radam_step(self.theta, self.gather_grad(), self.radam, self.config)
        self.inner_steps += 1
        if self.inner_steps == self.config.lookahead_k:
            lookahead_sync(self.theta, self.slow, self.config.lookahead_alpha)
            self.inner_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"optimizer.m": self.radam.m.copy(), "optimizer.v": self.radam.v.copy(), "optimizer.slow": self.slow.copy()}

    def state_meta(self) -> dict:
        return {"t": self.radam.t, "inner_steps": self.inner_steps}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.radam.m[...] = arrays["optimizer.m"]
        self.radam.v[...] = arrays["optimizer.v"]
        self.slow[...] = arrays["optimizer.slow"]
        self.radam.t = int(meta["t"])
        self.inner_steps = int(meta["inner_steps"])


# ---------------------------------------------------------------- training loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{self.seconds:.3f}"


@dataclass
class FitResult:
    model: TipFormer
    optimizer: Optimizer
    log: list[EpochLog]
    best_epoch: int
    best_val_loss: float
    optimizer_snapshot: tuple[dict, dict] | None = field(default=None, repr=False)

    def best_metadata(self) -> dict:
        return {"epoch": self.best_epoch, "val_loss": self.best_val_loss}


def mean_loss(model: TipFormer, pairs: Sequence[InteractionPair], feats: Featurizer) -> float:
    total = 0.0
    for pair in pairs:
        p = model.predict(feats.toxin(pair.toxin_id), feats.protein(pair.protein_id))
        total += bce_value(p, pair.label)
    return total / len(pairs)


def fit(
    split: DatasetSplit,
    model: TipFormer,
    config: TrainConfig,
    feats: Featurizer,
    log_callback=None,
) -> FitResult:
    """Train with batch size 1 and keep the weights with the lowest validation loss.

    On return ``model`` holds the best weights. The run is a pure function
    of (split, initial weights, config, seed).
    """
    if not split.train or not split.validation:
        raise UsageError("fit needs non-empty train and validation partitions")
    model.config = dataclasses.replace(model.config, dropout_rate=config.dropout_rate)
    model.rng = np.random.default_rng([config.seed, 1])
    optimizer = Optimizer(model.parameters(), config)
    order_rng = np.random.default_rng([config.seed, 2])
    train = list(split.train)

    best_val, best_epoch = math.inf, 0
    best_arrays = model.state_arrays()
    best_rng = model.rng.bit_generator.state
    best_opt = (optimizer.state_arrays(), optimizer.state_meta())
    log: list[EpochLog] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for i in order_rng.permutation(len(train)):
            pair = train[i]
            optimizer.zero_grad()
            prob, _ = model.forward(feats.toxin(pair.toxin_id), feats.protein(pair.protein_id), train=True)
            loss = bce_loss(prob, pair.label)
            value = float(loss.data)
            if not math.isfinite(value) or not np.isfinite(prob.data).all():
                raise NumericError(
                    f"non-finite loss at epoch {epoch} on pair {pair.toxin_id}/{pair.protein_id}: "
                    f"prob={prob.data!r} loss={value!r} max|theta|={float(np.abs(optimizer.theta).max())}"
                )
            ad.backward(loss)
            optimizer.step()
            total += value
        val_loss = mean_loss(model, split.validation, feats)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        entry = EpochLog(epoch, total / len(train), val_loss, time.perf_counter() - start)
        log.append(entry)
        if log_callback is not None:
            log_callback(entry)
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_arrays = model.state_arrays()
            best_rng = model.rng.bit_generator.state
            best_opt = (optimizer.state_arrays(), optimizer.state_meta())
        else:
            stale += 1
            if stale >= config.patience:
                break
    for name, p in model.params.items():
        p.data[...] = best_arrays[name]
    model.rng.bit_generator.state = best_rng
    optimizer.load_state(*best_opt)
    return FitResult(model, optimizer, log, best_epoch, best_val, best_opt)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: TipFormer
    train_config: TrainConfig | None = None
    best: dict | None = None
    optimizer_arrays: dict[str, np.ndarray] | None = None
    optimizer_meta: dict | None = None

    def restore_optimizer(self, config: TrainConfig | None = None) -> Optimizer:
        opt = Optimizer(self.model.parameters(), config or self.train_config or TrainConfig())
        if self.optimizer_arrays is not None:
            opt.load_state(self.optimizer_arrays, self.optimizer_meta or {"t": 0, "inner_steps": 0})
        return opt


def save_checkpoint(
    model: TipFormer,
    path: str | Path,
    optimizer: Optimizer | None = None,
    train_config: TrainConfig | None = None,
    best: dict | None = None,
) -> None:
    arrays = [(name, p.data) for name, p in model.params.items()]
    state = list(optimizer.state_arrays().items()) if optimizer is not None else []
    header = {
        "format": "tipformer-checkpoint",
        "model_config": model.config.to_dict(),
        "model_seed": model.seed,
        "train_config": train_config.to_dict() if train_config else None,
        "parameters": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "state": [{"name": n, "shape": list(a.shape)} for n, a in state],
        "optimizer": optimizer.state_meta() if optimizer is not None else None,
        "rng_state": model.rng.bit_generator.state,
        "best": best,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TPFC_MAGIC + struct.pack("<II", TPFC_VERSION, len(raw)) + raw)
        for _, a in arrays + state:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: file not found") from None
    if len(buf) < 12 or buf[:4] != TPFC_MAGIC:
        raise FormatError(f"{path}: bad magic, not a TPFC checkpoint")
    version, header_len = struct.unpack("<II", buf[4:12])
    if version != TPFC_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if 12 + header_len > len(buf):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[12:12 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
        manifest = header["parameters"]
        state_manifest = header.get("state") or []
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from None

    expected = init_params(config, 0)
    names = [e["name"] for e in manifest]
    if names != list(expected):
        raise FormatError(f"{path}: parameter manifest does not match the model configuration")
    for entry in manifest:
        want = expected[entry["name"]].shape
        if tuple(entry["shape"]) != want:
            raise FormatError(f"{path}: parameter {entry['name']} has shape {tuple(entry['shape'])}, expected {want}")
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in manifest + state_manifest]
    payload = buf[12 + header_len:]
    if len(payload) != 4 * sum(sizes):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, manifest needs {4 * sum(sizes)}")

    values = np.frombuffer(payload, dtype="<f4")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry, size in zip(manifest + state_manifest, sizes):
        arrays[entry["name"]] = values[offset:offset + size].reshape(entry["shape"]).astype(np.float32)
        offset += size

    params = {n: ad.Tensor(arrays[n], requires_grad=True, name=n) for n in names}
    model = TipFormer(config, seed=header.get("model_seed", 0), params=params)
    try:
        model.rng.bit_generator.state = header["rng_state"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad RNG state ({exc})") from None
    train_cfg = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else None
    opt_arrays = {e["name"]: arrays[e["name"]] for e in state_manifest} or None
    return Checkpoint(model, train_cfg, header.get("best"), opt_arrays, header.get("optimizer"))


def write_log(log: Sequence[EpochLog], path: str | Path) -> None:
    Path(path).write_text(
        "epoch\ttrain_loss\tval_loss\tseconds\n" + "".join(e.tsv() + "\n" for e in log), encoding="utf-8"
    )
