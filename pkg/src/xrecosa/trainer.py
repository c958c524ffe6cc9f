"""Teacher-forced training with AdamW, gradient clipping and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import Batch
from .errors import ContractError, CorruptionError, NumericError, VersionError
from .model import ModelConfig, ParamSet, XReCoSa
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay")}


def adamw_step(state: AdamWState, params, grads, lr: Optional[float] = None) -> None:
    """One AdamW update in place, with weight decay decoupled from the gradient.

    ``p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``; the decay acts on the pre-update value.
    Every gradient is checked before any parameter moves.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    decay = 1.0 - lr * state.weight_decay
    for name in params:
        p, g = params[name], grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data * decay - lr * update).astype(p.data.dtype, copy=False)


class AdamW:
    """Optimizer wrapper reading gradients straight from a :class:`ParamSet`."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, warmup_steps: int = 0):
        self.params = params
        self.state = AdamWState(lr, betas[0], betas[1], eps, weight_decay)
        self.warmup_steps = warmup_steps

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.state.lr * min(1.0, (self.state.t + 1) / self.warmup_steps)
        return self.state.lr

    def step(self) -> None:
        adamw_step(self.state, self.params, self.params.grads(), lr=self.current_lr())

    def zero_grad(self) -> None:
        self.params.zero_grad()


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale every gradient in place so the global L2 norm is at most ``max_norm``; returns the scale."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    arrays = list(grads.values()) if isinstance(grads, dict) else list(grads)
    arrays = [a.grad if isinstance(a, Tensor) else a for a in arrays]
    arrays = [a for a in arrays if a is not None]
    norm = math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for a in arrays:
        a *= scale
    return scale


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip_norm: Optional[float] = 1.0
    seed: int = 0
    validate_every: int = 1
    checkpoint_dir: Optional[str] = None
    precision: str = "f64"
    warmup_steps: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.validate_every <= 0:
            raise ContractError("epochs, batch_size and validate_every must be positive")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            self.grad_clip_norm = None


@dataclass
class EpochStats:
    mean_loss: float
    tokens: int
    steps: int
    seconds: float

    @property
    def tokens_per_s(self) -> float:
        return self.tokens / self.seconds if self.seconds > 0 else float("inf")


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_step(model: XReCoSa, batch: Batch, optimizer: AdamW, cfg: TrainConfig) -> float:
    """forward -> loss -> backward -> clip -> AdamW -> tape reset. Returns the batch loss."""
    tape = T.get_tape()
    tape.reset()
    optimizer.zero_grad()
    rng = _step_rng(cfg.seed, optimizer.state.t) if model.cfg.dropout > 0 else None
    loss = model.loss(batch, rng=rng)
    value = float(loss.data)
    if not math.isfinite(value):
        tape.reset()
        raise NumericError(f"loss is {value}")
    T.backward(loss)
    tape.reset()
    if cfg.grad_clip_norm:
        clip_grad_norm([model.params[n] for n in model.params], cfg.grad_clip_norm)
    optimizer.step()
    return value


def train_epoch(model: XReCoSa, batches: Sequence[Batch], optimizer: AdamW, cfg: TrainConfig) -> EpochStats:
    """Train once over ``batches`` in the given order; the mean loss is token-weighted."""
    start = time.perf_counter()
    total, tokens = 0.0, 0
    for i, batch in enumerate(batches):
        try:
            loss = train_step(model, batch, optimizer, cfg)
        except NumericError as exc:
            raise NumericError(f"batch {i}: {exc}") from exc
        total += loss * batch.num_tokens
        tokens += batch.num_tokens
    return EpochStats(total / max(tokens, 1), tokens, len(batches), time.perf_counter() - start)


def evaluate_nll(model: XReCoSa, batches: Sequence[Batch]) -> float:
    """Token-weighted mean NLL without recording gradients."""
    total, tokens = 0.0, 0
    with T.no_grad():
        for b in batches:
            total += float(model.loss(b).data) * b.num_tokens
            tokens += b.num_tokens
    return total / max(tokens, 1)


def epoch_order(n_batches: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1_000_003, epoch]).permutation(n_batches)


class Trainer:
    """Step-indexed training loop.

    Batch order for epoch ``e`` depends only on ``(seed, e)``, so training can resume
    from any global step and follow the same trajectory as an uninterrupted run.
    """

    def __init__(self, model: XReCoSa, cfg: TrainConfig, optimizer: Optional[AdamW] = None,
                 log: Optional[Callable[[str], None]] = None, vocab_hash: str = ""):
        self.model = model
        self.cfg = cfg
        self.optimizer = optimizer or AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                                            warmup_steps=cfg.warmup_steps)
        self.log = log or logger.info
        self.vocab_hash = vocab_hash
        self.best_dev = math.inf
        self.history: List[dict] = []

    @property
    def step(self) -> int:
        return self.optimizer.state.t

    def run_steps(self, batches: Sequence[Batch], n_steps: int) -> List[float]:
        """Advance ``n_steps`` optimiser steps from the current global step."""
        losses = []
        n = len(batches)
        for _ in range(n_steps):
            epoch, offset = divmod(self.step, n)
            batch = batches[epoch_order(n, self.cfg.seed, epoch)[offset]]
            losses.append(train_step(self.model, batch, self.optimizer, self.cfg))
        return losses

    def fit(self, batches: Sequence[Batch], dev_batches: Optional[Sequence[Batch]] = None) -> List[dict]:
        n = len(batches)
        if n == 0:
            raise ContractError("no training batches")
        total_steps = self.cfg.epochs * n
        if self.cfg.max_steps is not None:
            total_steps = min(total_steps, self.cfg.max_steps)
        while self.step < total_steps:
            epoch, offset = divmod(self.step, n)
            todo = min(n - offset, total_steps - self.step)
            order = epoch_order(n, self.cfg.seed, epoch)[offset: offset + todo]
            try:
                stats = train_epoch(self.model, [batches[i] for i in order], self.optimizer, self.cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, {exc}") from exc
            record = {"epoch": epoch + 1, "step": self.step, "train_nll": stats.mean_loss,
                      "tokens_per_s": stats.tokens_per_s}
            if dev_batches and ((epoch + 1) % self.cfg.validate_every == 0 or self.step >= total_steps):
                record["dev_nll"] = evaluate_nll(self.model, dev_batches)
            self.history.append(record)
            self.log(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()))
            self._maybe_checkpoint(record)
        return self.history

    def _maybe_checkpoint(self, record: dict) -> None:
        if not self.cfg.checkpoint_dir:
            return
        root = Path(self.cfg.checkpoint_dir)
        manifest = {"train": asdict(self.cfg), "history": self.history}
        save_checkpoint(root / "last", self.model, self.optimizer, manifest, self.vocab_hash)
        score = record.get("dev_nll", record["train_nll"])
        if score < self.best_dev:
            self.best_dev = score
            save_checkpoint(root / "best", self.model, self.optimizer, manifest, self.vocab_hash)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _tensor_index(arrays: Dict[str, np.ndarray]):
    index, offset = {}, 0
    for name in sorted(arrays):
        a = arrays[name]
        nbytes = a.size * a.dtype.itemsize
        index[name] = {"offset": offset, "length": nbytes, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str}
        offset += nbytes
    return index


def save_checkpoint(path, model: XReCoSa, optimizer: Optional[AdamW] = None, manifest: Optional[dict] = None,
                    vocab_hash: str = "") -> None:
    """Write ``manifest.json`` and a single little-endian ``tensors.bin`` blob into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": model.params[n].data for n in model.params}
    opt_meta = None
    if optimizer is not None:
        st = optimizer.state
        for n in st.m:
            arrays[f"adam_m/{n}"] = st.m[n]
            arrays[f"adam_v/{n}"] = st.v[n]
        opt_meta = {**st.hyper(), "t": st.t, "warmup_steps": optimizer.warmup_steps}
    index = _tensor_index(arrays)
    blob = b"".join(np.ascontiguousarray(arrays[n], dtype=np.dtype(index[n]["dtype"])).tobytes() for n in sorted(arrays))
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": model.cfg.to_dict(),
        "step": optimizer.state.t if optimizer else (manifest or {}).get("step", 0),
        "vocab_hash": vocab_hash,
        "optimizer": opt_meta,
        "tensors": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": manifest or {},
    }
    tmp = path / "tensors.bin.tmp"
    tmp.write_bytes(blob)
    tmp.replace(path / "tensors.bin")
    (path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path, expected_vocab_hash: Optional[str] = None, expected_config: Optional[ModelConfig] = None):
    """Return ``(model, optimizer, manifest)``; ``optimizer`` is None if none was saved."""
    path = Path(path)
    try:
        meta = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"checkpoint {path} is incomplete: {exc.filename} missing") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"checkpoint format {meta.get('format')} != supported {CHECKPOINT_FORMAT}")
    if hashlib.sha256(blob).hexdigest() != meta["blob_sha256"]:
        raise CorruptionError(f"tensor blob in {path} fails its sha256 check")
    if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
        raise VersionError(f"checkpoint vocab hash {meta['vocab_hash'][:12]} != expected {expected_vocab_hash[:12]}")
    cfg = ModelConfig.from_dict(meta["model"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        diff = {k for k, v in cfg.to_dict().items() if expected_config.to_dict()[k] != v}
        raise VersionError(f"checkpoint model config differs in {sorted(diff)}")

    arrays = {}
    for name, info in meta["tensors"].items():
        raw = blob[info["offset"]: info["offset"] + info["length"]]
        dt = np.dtype(info["dtype"])
        arrays[name] = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(info["shape"])

    params = ParamSet({n[len("param/"):]: Tensor(a, dtype=a.dtype.type) for n, a in arrays.items() if n.startswith("param/")})
    model = XReCoSa(cfg, params)
    optimizer = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        optimizer = AdamW(params, lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"],
                          weight_decay=o["weight_decay"], warmup_steps=o.get("warmup_steps", 0))
        optimizer.state.t = o["t"]
        for n, a in arrays.items():
            if n.startswith("adam_m/"):
                optimizer.state.m[n[len("adam_m/"):]] = a
            elif n.startswith("adam_v/"):
                optimizer.state.v[n[len("adam_v/"):]] = a
    return model, optimizer, meta
