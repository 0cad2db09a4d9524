"""Loss, deep-supervision aggregation, Adam, the epoch loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from paanet import tensor as T
from paanet.metrics import evaluate
from paanet.model import ModelConfig, audit_params, forward, init_params, parameter_shapes
from paanet.tensor import Tensor, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

MAGIC = b"PAAN"
CHECKPOINT_VERSION = 1
IOU_SMOOTH = 1.0
LOG_CLAMP = 1e-7


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


# ----------------------------------------------------------------------------
# loss


def _as_mask(gt, like: Tensor) -> np.ndarray:
    arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if arr.shape != like.shape:
        raise ValueError(f"ground truth shape {arr.shape} != prediction shape {like.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("ground truth must be binary (values 0 or 1)")
    return arr.astype(np.float64)


def bce_term(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy over every pixel, logs clamped at LOG_CLAMP."""
    return float(-np.mean(y * np.log(np.maximum(p, LOG_CLAMP)) + (1.0 - y) * np.log(np.maximum(1.0 - p, LOG_CLAMP))))


def _soft_iou(p, y):
    axes = tuple(range(1, p.ndim))
    inter = (p * y).sum(axis=axes)
    union = p.sum(axis=axes) + y.sum(axis=axes) - inter
    return inter, union


def iou_term(p: np.ndarray, y: np.ndarray) -> float:
    """1 - smoothed soft IoU, per image, averaged over the batch."""
    inter, union = _soft_iou(p, y)
    return float(np.mean(1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)))


def bce_iou_loss(pred: Tensor, gt) -> Tensor:
    """Equal-weight BCE + smoothed soft-IoU loss for an N x 1 x H x W map.

    BCE is the mean over all pixels; the IoU term is computed per image and
    averaged over the batch.
    """
    y = _as_mask(gt, pred)
    p = pred.data.astype(np.float64)
    n = p.shape[0]

    p_lo = np.maximum(p, LOG_CLAMP)
    q_lo = np.maximum(1.0 - p, LOG_CLAMP)
    inter, union = _soft_iou(p, y)
    loss = bce_term(p, y) + iou_term(p, y)

    def grad_fn(g):
        scale = float(g)
        d_bce = (-y / p_lo * (p > LOG_CLAMP) + (1.0 - y) / q_lo * ((1.0 - p) > LOG_CLAMP)) / p.size
        num = (inter + IOU_SMOOTH).reshape((n,) + (1,) * (p.ndim - 1))
        den = (union + IOU_SMOOTH).reshape(num.shape)
        d_iou = -(y * den - num * (1.0 - y)) / den**2 / n
        return ((scale * (d_bce + d_iou)).astype(pred.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=pred.dtype), (pred,), grad_fn)


def loss_terms(outputs, gt) -> list:
    return [(name, bce_iou_loss(m, gt)) for name, m in outputs.supervised_maps()]


def total_loss(outputs, gt) -> Tensor:
    """Uniform mean of the pair loss over every deeply supervised map."""
    terms = loss_terms(outputs, gt)
    for name, term in terms:
        if not math.isfinite(term.item()):
            raise NonFiniteLossError(f"non-finite loss in supervised map {name!r}: {term.item()}")
    return T.stack_mean([t for _, t in terms])


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            u={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[:3]}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = p.grad
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        u = state.u[k] = b2 * state.u[k] + (1.0 - b2) * (g * g)
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(u / bc2) + cfg.adam_eps)
        p.data = (p.data - step).astype(np.float32)


# ----------------------------------------------------------------------------
# checkpoints
#
# b"PAAN" | u32 version | u32 header_len | header (key = value lines)
# | u32 record_count | records (u32 path_len, path, tensor) sorted by path
# | u32 crc32 of everything before it


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam: AdamState
    epoch: int = 0
    rng_state: dict | None = None
    best_dsc: float = -1.0
    version: int = CHECKPOINT_VERSION


class CheckpointError(ValueError):
    pass


def _config_lines(ckpt: Checkpoint) -> str:
    cfg = ckpt.model_config
    rows = [
        ("in_channels", str(cfg.in_channels)),
        ("encoder_channels", ",".join(str(c) for c in cfg.encoder_channels)),
        ("dense_layers", str(cfg.dense_layers)),
        ("growth", str(cfg.growth)),
        ("num_blocks", str(cfg.num_blocks)),
        ("input_size", f"{cfg.input_size[0]},{cfg.input_size[1]}"),
        ("epoch", str(ckpt.epoch)),
        ("adam_t", str(ckpt.adam.t)),
        ("best_dsc", repr(float(ckpt.best_dsc))),
        ("rng_state", json.dumps(ckpt.rng_state, sort_keys=True)),
    ]
    return "".join(f"{k} = {v}\n" for k, v in rows)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = _config_lines(ckpt).encode("utf-8")
    records = {f"param.{k}": v.data for k, v in ckpt.params.items()}
    records.update({f"adam.m.{k}": v for k, v in ckpt.adam.m.items()})
    records.update({f"adam.u.{k}": v for k, v in ckpt.adam.u.items()})
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header, struct.pack("<I", len(records))]
    for path in sorted(records):
        name = path.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name + tensor_to_bytes(records[path]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a PAANet checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = buf[12 : 12 + hlen].decode("utf-8")
        fields = dict(line.split(" = ", 1) for line in header.splitlines() if line)
        cfg = ModelConfig(
            in_channels=int(fields["in_channels"]),
            encoder_channels=tuple(int(c) for c in fields["encoder_channels"].split(",")),
            dense_layers=int(fields["dense_layers"]),
            growth=int(fields["growth"]),
            num_blocks=int(fields["num_blocks"]),
            input_size=tuple(int(s) for s in fields["input_size"].split(",")),
        )
        epoch = int(fields["epoch"])
        adam_t = int(fields["adam_t"])
        best = float(fields["best_dsc"])
        rng_state = json.loads(fields["rng_state"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

    offset = 12 + hlen
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    records = {}
    end = len(buf) - 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = tensor_from_bytes(buf[:end], offset)
        records[name] = arr
    if offset != end:
        raise CheckpointError(f"{end - offset} trailing bytes after tensor records")

    params = {k[len("param.") :]: Tensor(v, requires_grad=True) for k, v in records.items() if k.startswith("param.")}
    try:
        audit_params(params, cfg)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match its embedded config: {exc}") from exc
    adam = AdamState(
        m={k[len("adam.m.") :]: v for k, v in records.items() if k.startswith("adam.m.")},
        u={k[len("adam.u.") :]: v for k, v in records.items() if k.startswith("adam.u.")},
        t=adam_t,
    )
    if set(adam.m) != set(params) or set(adam.u) != set(params):
        raise CheckpointError("Adam moments do not cover the parameter set")
    # canonical construction order, so iteration matches a freshly built model
    order = list(parameter_shapes(cfg))
    params = {k: params[k] for k in order}
    adam.m = {k: adam.m[k] for k in order}
    adam.u = {k: adam.u[k] for k in order}
    return Checkpoint(cfg, params, adam, epoch=epoch, rng_state=rng_state, best_dsc=best, version=version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# training loop


def stack_batch(samples) -> tuple:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return Tensor(images), masks


def predict(params: dict, cfg: ModelConfig, samples, batch_size: int = 8) -> list:
    """Prediction maps (numpy, 1 x H x W each) for a list of samples, no graph."""
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            images, _ = stack_batch(samples[i : i + batch_size])
            out = forward(images, params, cfg)
            preds.extend(out.prediction.data)
    return preds


def evaluate_samples(params, cfg, samples, threshold=0.5, batch_size=8):
    preds = predict(params, cfg, samples, batch_size)
    return evaluate(preds, [s.mask for s in samples], threshold)


def _log_line(epoch: int, train_loss: float, report) -> str:
    vals = [report.dsc, report.miou, report.recall, report.precision] if report else [float("nan")] * 4
    return "\t".join([str(epoch), f"{train_loss:.6f}"] + [f"{v:.6f}" for v in vals])


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_samples,
    val_samples=(),
    out_dir=None,
    resume: Checkpoint | None = None,
    on_epoch=None,
):
    """Run the epoch loop; returns (last Checkpoint, list of log lines).

    Each epoch visits a seeded permutation of ``train_samples`` in batches,
    then scores ``val_samples``. With ``out_dir`` set, ``last.ckpt``,
    ``best.ckpt`` (highest validation DSC) and ``train.log`` are written there.
    """
    train_samples = list(train_samples)
    val_samples = list(val_samples)
    if not train_samples:
        raise ValueError("training split is empty")

    rng = np.random.default_rng(train_cfg.seed)
    if resume is None:
        params = init_params(model_cfg, rng)
        adam = AdamState.zeros_like(params)
        start, best = 1, -1.0
    else:
        if resume.model_config != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        params, adam = resume.params, resume.adam
        rng.bit_generator.state = resume.rng_state
        start, best = resume.epoch + 1, resume.best_dsc

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train.log" if out_dir is not None else None
    if log_path is not None and resume is None:
        log_path.write_text("")

    lines = []
    ckpt = resume
    for epoch in range(start, train_cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        losses = []
        for i in range(0, len(order), train_cfg.batch_size):
            batch = [train_samples[j] for j in order[i : i + train_cfg.batch_size]]
            images, masks = stack_batch(batch)
            for p in params.values():
                p.grad = None
            outputs = forward(images, params, model_cfg)
            loss = total_loss(outputs, masks)
            T.backward(loss)
            adam_step(params, adam, train_cfg)
            losses.append(loss.item())
        train_loss = float(np.mean(losses))

        report = evaluate_samples(params, model_cfg, val_samples, train_cfg.threshold) if val_samples else None
        line = _log_line(epoch, train_loss, report)
        lines.append(line)
        logger.info("epoch %s", line)

        improved = report is not None and report.dsc > best
        if improved:
            best = report.dsc
        ckpt = Checkpoint(
            model_cfg,
            {k: Tensor(p.data, requires_grad=True) for k, p in params.items()},
            AdamState(dict(adam.m), dict(adam.u), adam.t),
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            best_dsc=best,
        )
        if out_dir is not None:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
            save_checkpoint(ckpt, out_dir / "last.ckpt")
            if improved or report is None:
                save_checkpoint(ckpt, out_dir / "best.ckpt")
        if on_epoch is not None:
            on_epoch(epoch, ckpt, report)
    return ckpt, lines
