"""Loss, training loop, evaluation and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .metrics import psnr, ssim
from .model import ArchConfig, STGDNet, param_shapes, prepare_inputs
from .optim import OptimState, adamw_step, cosine_lr
from .sensor import CVSSample, augment_td_tail, transform_sample
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_VERSION = 1


class NumericError(FloatingPointError):
    """Training produced a non-finite value."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-8
    epochs: int = 10
    steps: int | None = None        # overrides epochs when set
    batch_size: int = 4
    crop: int | None = None         # random training crops (multiple of the pyramid factor)
    seed: int = 0
    td_tail_augment: bool = False
    td_tail_prob: float = 0.5
    geometric_augment: bool = False  # random quarter turns and mirrors per sample and epoch
    lambda_psnr: float = 0.5
    eps_loss: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if min(self.lr_max, self.weight_decay, self.eps_loss) < 0 or self.lr_min < 0:
            raise ValueError("rates must be non-negative")
        if not 0 < self.lambda_psnr <= 1:
            raise ValueError("lambda_psnr must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    model: STGDNet
    history: list[tuple[int, float, float]] = field(default_factory=list)
    state: OptimState | None = None


def psnr_loss(pred: Tensor, gt, lam: float = 0.5, eps: float = 1e-8) -> Tensor:
    """Negative weighted PSNR: ``-lam * 10 * log10(1 / (MSE + eps))``."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt_t.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt_t.shape}")
    mse = T.mean(T.square(pred - gt_t))
    return T.scale(T.log(T.add_scalar(mse, eps)), lam * 10.0 / math.log(10.0))


# ---------------------------------------------------------------- batching

def _batches(dataset: Sequence[CVSSample], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(dataset))
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(dataset[i].N, []).append(int(i))
    batches = [idx[s : s + batch_size] for idx in groups.values()
               for s in range(0, len(idx), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def steps_per_epoch(dataset: Sequence[CVSSample], batch_size: int) -> int:
    counts: dict[int, int] = {}
    for s in dataset:
        counts[s.N] = counts.get(s.N, 0) + 1
    return sum(-(-c // batch_size) for c in counts.values())


def _crop_arrays(arrays, crop: int, rng: np.random.Generator):
    h, w = arrays[0].shape[-2:]
    if crop >= h and crop >= w:
        return arrays
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return [a[..., y : y + crop, x : x + crop] for a in arrays]


def make_batch(samples: Sequence[CVSSample], multiple: int, crop: int | None = None,
               rng: np.random.Generator | None = None):
    """Network inputs and target ``(b, sd, tds, gt)`` for equal-N samples."""
    b, sd, tds = prepare_inputs(samples, multiple)
    gt = np.stack([s.gt[s.gt_index].transpose(2, 0, 1) for s in samples]).astype(np.float32)
    gt = np.pad(gt, [(0, 0), (0, 0), (0, b.shape[2] - gt.shape[2]), (0, b.shape[3] - gt.shape[3])],
                mode="reflect")
    if crop:
        if crop % multiple:
            raise ValueError(f"crop {crop} must be a multiple of {multiple}")
        per = []
        for i in range(len(samples)):
            per.append(_crop_arrays([b[i], sd[i], gt[i]] + [t[i] for t in tds], crop, rng))
        b = np.stack([p[0] for p in per])
        sd = np.stack([p[1] for p in per])
        gt = np.stack([p[2] for p in per])
        tds = [np.stack([p[3 + j] for p in per]) for j in range(len(tds))]
    return b, sd, tds, gt


# ---------------------------------------------------------------- training

def train(dataset: Sequence[CVSSample], config: TrainConfig, arch: ArchConfig = ArchConfig(),
          model: STGDNet | None = None, state: OptimState | None = None) -> TrainResult:
    """Optimise STGDNet on ``dataset`` with AdamW and a cosine schedule.

    Passing ``model`` and ``state`` resumes: the step counter continues from
    ``state.t`` up to the configured total.
    """
    if not dataset:
        raise ValueError("empty dataset")
    model = model or STGDNet(arch)
    arch = model.arch
    state = state or OptimState(lr=config.lr_max, weight_decay=config.weight_decay,
                                betas=config.betas, eps=config.adam_eps)
    per_epoch = steps_per_epoch(dataset, config.batch_size)
    total = config.steps if config.steps is not None else config.epochs * per_epoch
    if total < 1:
        raise ValueError("nothing to train: zero steps")
    rng = np.random.default_rng(config.seed)
    history: list[tuple[int, float, float]] = []
    step = 0
    epoch = 0
    while step < total:
        epoch_data = list(dataset)
        if config.td_tail_augment:
            for i, s in enumerate(epoch_data):
                if s.tail_td.shape[0] and rng.random() < config.td_tail_prob:
                    m = int(rng.integers(1, min(3, s.tail_td.shape[0]) + 1))
                    epoch_data[i] = augment_td_tail(s, m=m)
        if config.geometric_augment:
            for i, s in enumerate(epoch_data):
                epoch_data[i] = transform_sample(s, int(rng.integers(4)), bool(rng.integers(2)))
        for batch_ids in _batches(epoch_data, config.batch_size, rng):
            if step >= total:
                break
            crop_rng = rng if config.crop else None
            batch = make_batch([epoch_data[i] for i in batch_ids], arch.multiple,
                               config.crop, crop_rng)
            step += 1
            if step <= state.t:
                continue  # resumed run: replay the data stream up to the saved step
            lr = cosine_lr(step - 1, total, config.lr_max, config.lr_min)
            loss = _train_step(model, state, batch, lr, config)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}, "
                                   f"samples {batch_ids})")
            history.append((step, lr, loss))
            if step % 50 == 0 or step == total:
                log.info("step %d/%d lr %.3g loss %.4f", step, total, lr, loss)
        epoch += 1
    return TrainResult(model, history, state)


def _train_step(model: STGDNet, state: OptimState, batch, lr: float, config: TrainConfig) -> float:
    b, sd, tds, gt = batch
    for p in model.params.values():
        p.grad = None
    pred = model.forward(Tensor(b), Tensor(sd), [Tensor(t) for t in tds], clamp=False)
    loss = psnr_loss(pred, gt, config.lambda_psnr, config.eps_loss)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    loss.backward()
    adamw_step({k: p.data for k, p in model.params.items()},
               {k: p.grad for k, p in model.params.items()}, state, lr=lr)
    return value


# ---------------------------------------------------------------- evaluation

def evaluate(model: STGDNet, samples: Sequence[CVSSample], td_override=None) -> list[dict]:
    """Per-sample PSNR/SSIM of the restoration and of the blurred input against GT.

    ``td_override`` may map a sample index to a replacement TD stack.
    """
    rows = []
    for i, s in enumerate(samples):
        td = None if td_override is None else td_override.get(i)
        restored = model.restore(s, k=s.gt_index, td_seq=td)
        gt = s.gt[s.gt_index]
        rows.append({
            "psnr": psnr(restored, gt),
            "ssim": ssim(restored, gt),
            "blur_psnr": psnr(s.blur, gt),
            "blur_ssim": ssim(s.blur, gt),
        })
    return rows


def aggregate(rows: Sequence[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


# ---------------------------------------------------------------- checkpoints

def _write_container(path: Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_container(path: Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path: str | Path, model: STGDNet, state: OptimState | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``path`` (weights), ``path.json`` (arch + metadata) and, with a state, ``path.optim``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_container(path, {k: p.data for k, p in model.params.items()})
    meta = {"arch": asdict(model.arch), "format_version": CKPT_VERSION}
    if state is not None:
        moments = {f"m/{k}": v for k, v in state.m.items()}
        moments.update({f"v/{k}": v for k, v in state.v.items()})
        _write_container(path.with_suffix(path.suffix + ".optim"), moments)
        meta["optim"] = {"t": state.t, "lr": state.lr, "weight_decay": state.weight_decay,
                         "betas": list(state.betas), "eps": state.eps}
    if extra:
        meta.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path, expected: ArchConfig | None = None,
                    with_state: bool = False):
    """Load a model (and optionally its optimizer state).

    Raises ``CheckpointError`` on truncation, version or architecture mismatch.
    """
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing architecture file {meta_path}") from exc
    arch = ArchConfig.from_dict(meta["arch"])
    if expected is not None and expected != arch:
        diff = {k: (v, getattr(arch, k)) for k, v in asdict(expected).items()
                if getattr(arch, k) != v}
        raise CheckpointError(f"architecture mismatch (expected, found): {diff}")
    arrays = _read_container(path)
    shapes = param_shapes(arch)
    if set(arrays) != set(shapes):
        missing = sorted(set(shapes) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(shapes))[:3]
        raise CheckpointError(f"architecture mismatch: missing {missing}, unexpected {extra}")
    for k, shape in shapes.items():
        if arrays[k].shape != shape:
            raise CheckpointError(f"architecture mismatch: {k} has {arrays[k].shape}, "
                                  f"expected {shape}")
    params = {k: Tensor(arrays[k], requires_grad=True, name=k) for k in shapes}
    model = STGDNet(arch, params)
    if not with_state:
        return model
    state = None
    if "optim" in meta:
        o = meta["optim"]
        moments = _read_container(path.with_suffix(path.suffix + ".optim"))
        state = OptimState(lr=o["lr"], weight_decay=o["weight_decay"], betas=tuple(o["betas"]),
                           eps=o["eps"], t=int(o["t"]),
                           m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
                           v={k[2:]: v for k, v in moments.items() if k.startswith("v/")})
    return model, state
