"""Multi-stage training: per-stage pretraining, end-to-end fine-tuning, Adam, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ShapeRecord, _atomic_write
from .model import (DensePCRModel, ModelConfig, decode_sparse, dense_reconstruct, encode_image,
                    forward_pyramid)
from .pointset import chamfer, emd_approx

log = logging.getLogger(__name__)

PHASES = ("stage1", "stage2", "stage3", "finetune")
PHASE_SCOPES = {
    "stage1": ("encoder", "sparse_decoder"),
    "stage2": ("dense_stage2",),
    "stage3": ("dense_stage3",),
    "finetune": ("encoder", "sparse_decoder", "dense_stage2", "dense_stage3"),
}
CKPT_MAGIC = b"DPCRCKPT"
CKPT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised before applying an update whose loss was not finite.

    ``state`` still holds the last finite parameters.
    """

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    lambdas: tuple = (1.0, 1.0, 1.0)
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    stage3_iters: int = 2000
    finetune_iters: int = 2000
    emd_eps: float = 0.01
    seed: int = 0
    preset: str = "paper"
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.lambdas) != 3 or any(not lam >= 0 for lam in self.lambdas):
            raise ValueError("lambdas must be three non-negative weights")
        for name in ("stage1_iters", "stage2_iters", "stage3_iters", "finetune_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = cls(learning_rate=1e-3, batch_size=8, stage1_iters=2000, stage2_iters=300,
                   stage3_iters=150, finetune_iters=300, preset="desk", checkpoint_every=250)
        return replace(base, **overrides)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "desk":
            return cls.desk(**overrides)
        if name == "paper":
            return cls.paper(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    def iters(self, phase: str) -> int:
        return getattr(self, f"{phase}_iters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lambdas"] = tuple(d["lambdas"])
        return cls(**d)


@dataclass
class TrainState:
    model: DensePCRModel
    moments_m: dict
    moments_v: dict
    param_steps: dict  # Adam step count per parameter
    phase_steps: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    history: list = field(default_factory=list)  # (phase, step, total, emd, cd2, cd3)

    @classmethod
    def fresh(cls, model: DensePCRModel) -> "TrainState":
        names = list(model.params)
        return cls(model,
                   {n: np.zeros_like(model[n].data) for n in names},
                   {n: np.zeros_like(model[n].data) for n in names},
                   {n: 0 for n in names})

    @property
    def step(self) -> int:
        return sum(self.phase_steps.values())


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, name: str = "parameter") -> None:
    """One bias-corrected Adam update, in place; ``t`` is the 1-based step count."""
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"{name}: parameter, gradient and moment shapes disagree")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for {name}")
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def loss_stage1(pred, gt, eps: float = 0.01) -> T.Tensor:
    """Earth mover's distance of the sparse prediction (frozen auction assignment)."""
    value, _ = emd_approx(pred, gt, eps=eps)
    return value


def loss_dense(pred, gt) -> T.Tensor:
    return chamfer(pred, gt)


def _items(shapes: Sequence[ShapeRecord], phase: str) -> list[tuple[int, int]]:
    if phase in ("stage2", "stage3"):
        return [(i, 0) for i in range(len(shapes))]
    return [(i, v) for i, s in enumerate(shapes) for v in range(len(s.images))]


def batch_for(tcfg: TrainConfig, phase: str, step: int, items: list) -> list:
    """Batch drawn from (seed, phase, step) alone, so a resumed run sees the same data."""
    rng = np.random.default_rng([tcfg.seed, PHASES.index(phase), step])
    k = min(tcfg.batch_size, len(items))
    return [items[i] for i in rng.choice(len(items), size=k, replace=False)]


def phase_loss(model: DensePCRModel, shapes: Sequence[ShapeRecord], batch, phase: str,
               tcfg: TrainConfig) -> tuple[T.Tensor, tuple]:
    """Mean batch loss for one phase; call inside an active tape to get gradients."""
    total = None
    parts = np.zeros(3)
    lam1, lam2, lam3 = tcfg.lambdas
    for shape_idx, view in batch:
        rec = shapes[shape_idx]
        sparse, mid, dense = rec.gt
        if phase == "stage1":
            loss = loss_stage1(decode_from_image(model, rec.images[view]), sparse, tcfg.emd_eps)
            parts[0] += loss.item()
        elif phase == "stage2":
            loss = loss_dense(dense_reconstruct(sparse, model, 2), mid)
            parts[1] += loss.item()
        elif phase == "stage3":
            loss = loss_dense(dense_reconstruct(mid, model, 3), dense)
            parts[2] += loss.item()
        else:
            pc1, pc2, pc3 = forward_pyramid(rec.images[view], model)
            e, c2, c3 = loss_stage1(pc1, sparse, tcfg.emd_eps), loss_dense(pc2, mid), loss_dense(pc3, dense)
            parts += (e.item(), c2.item(), c3.item())
            loss = T.add(T.add(T.scale(e, lam1), T.scale(c2, lam2)), T.scale(c3, lam3))
        total = loss if total is None else T.add(total, loss)
    inv = 1.0 / len(batch)
    return T.scale(total, inv), tuple(parts * inv)


def decode_from_image(model: DensePCRModel, image) -> T.Tensor:
    return decode_sparse(encode_image(image, model), model)


def train_phase(state: TrainState, shapes: Sequence[ShapeRecord], tcfg: TrainConfig, phase: str,
                iters: Optional[int] = None,
                on_checkpoint: Optional[Callable[[TrainState], None]] = None,
                log_file=None) -> TrainState:
    """Run ``phase`` until it has completed ``iters`` steps (resumes from ``state``)."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    iters = tcfg.iters(phase) if iters is None else iters
    items = _items(shapes, phase)
    if not items:
        raise ValueError("no training data")
    model = state.model
    names = [n for scope in PHASE_SCOPES[phase] for n in model.names(scope)]
    while state.phase_steps[phase] < iters:
        step = state.phase_steps[phase]
        batch = batch_for(tcfg, phase, step, items)
        for t in model.params.values():
            t.grad = None
        with T.tape():
            loss, parts = phase_loss(model, shapes, batch, phase, tcfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{phase} step {step}: non-finite loss {value}", state)
            T.backward(loss)
        del loss  # drop the tape before the next forward pass
        for n in names:
            p = model[n]
            if p.grad is None:
                continue
            state.param_steps[n] += 1
            adam_step(p.data, p.grad, state.moments_m[n], state.moments_v[n],
                      state.param_steps[n], tcfg.learning_rate, n)
        state.phase_steps[phase] = step + 1
        state.history.append((phase, step, value) + tuple(float(x) for x in parts))
        if log_file is not None:
            log_file.write(format_log_line(state.history[-1]) + "\n")
            log_file.flush()
        if tcfg.log_every and step % tcfg.log_every == 0:
            log.info("%s step %d loss %.6g", phase, step, value)
        if on_checkpoint is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state


LOG_HEADER = "phase step total emd_sparse cd_mid cd_dense"


def format_log_line(entry) -> str:
    phase, step, total, e, c2, c3 = entry
    return f"{phase} {step} {total!r} {e!r} {c2!r} {c3!r}"


def pretrain_stage(stage_id: int, shapes: Sequence[ShapeRecord], tcfg: TrainConfig,
                   state: Optional[TrainState] = None, model_cfg: Optional[ModelConfig] = None,
                   **kwargs) -> TrainState:
    """Stage 1 learns image -> sparse cloud under EMD; stages 2 and 3 learn one
    upsampling step from the ground truth of the previous resolution under Chamfer."""
    if stage_id not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage_id}")
    if state is None:
        state = TrainState.fresh(DensePCRModel.init(model_cfg or ModelConfig.from_preset(tcfg.preset),
                                                    tcfg.seed))
    return train_phase(state, shapes, tcfg, f"stage{stage_id}", **kwargs)


def finetune_end_to_end(state: TrainState, shapes: Sequence[ShapeRecord], tcfg: TrainConfig,
                        **kwargs) -> TrainState:
    return train_phase(state, shapes, tcfg, "finetune", **kwargs)


# ---------------------------------------------------------------- checkpoints

def _config_hash(model_cfg: ModelConfig, tcfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": tcfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def checkpoint_bytes(state: TrainState, tcfg: TrainConfig) -> bytes:
    model = state.model
    tensors, blobs, offset = [], [], 0
    groups = (("param", model.state()), ("adam_m", state.moments_m), ("adam_v", state.moments_v))
    for kind, arrays in groups:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": f"{kind}/{name}", "shape": list(arr.shape), "offset": offset,
                            "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {
        "format": "densepcr-checkpoint",
        "version": CKPT_VERSION,
        "config_hash": _config_hash(model.cfg, tcfg),
        "model_config": model.cfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "param_steps": state.param_steps,
        "phase_steps": state.phase_steps,
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)


def save_checkpoint(path, state: TrainState, tcfg: TrainConfig) -> None:
    _atomic_write(Path(path), checkpoint_bytes(state, tcfg))


def read_checkpoint_header(path) -> tuple[dict, int]:
    """Parse and validate the header; returns it with the offset of the tensor data."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a densepcr checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version mismatch (file {version}, expected {CKPT_VERSION})")
    try:
        header = json.loads(raw[20:20 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version mismatch in header")
    return header, 20 + hlen


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    header, base = read_checkpoint_header(path)
    raw = Path(path).read_bytes()
    model_cfg = ModelConfig.from_dict(header["model_config"])
    tcfg = TrainConfig.from_dict(header["train_config"])
    if _config_hash(model_cfg, tcfg) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    arrays: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        kind, name = entry["name"].split("/", 1)
        start = base + entry["offset"]
        chunk = raw[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arrays[kind][name] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    model = DensePCRModel(model_cfg, {n: T.Tensor(a, requires_grad=True) for n, a in arrays["param"].items()})
    state = TrainState(model, arrays["adam_m"], arrays["adam_v"],
                       {k: int(v) for k, v in header["param_steps"].items()},
                       {k: int(v) for k, v in header["phase_steps"].items()})
    return state, tcfg
