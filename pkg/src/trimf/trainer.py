"""Training loop: batched optimization, plateau LR decay, early stopping,
best-checkpoint selection, and the run directory layout.

A run directory holds ``config.json``, ``checkpoint.best``, ``metrics.csv``
(columns epoch, lr, train_loss, val_loss, val_auroc_macro, val_auprc_macro),
``report.json``, and a rendered ``training_curves.png``.

Checkpoint byte layout: an unsigned 64-bit little-endian header length,
a UTF-8 JSON header (tensor names/shapes/offsets, optimizer scalars, epoch,
validation loss, config snapshot, dataset shapes), then the raw
little-endian tensor payloads at the stated offsets.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import validate_run_config
from .data import Dataset, split_811
from .losses import LossWeights, bce_multilabel, combined_loss
from .model import TriMFParams, forward_batch, make_variant
from .optim import CONTINUE, DECAY_LR, STOP, Adam, ScheduleState, end_of_epoch
from .tensor import NonFiniteError, Tensor, backward, no_grad

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_auroc_macro", "val_auprc_macro")


class TrainingDivergedError(RuntimeError):
    """The loss left the finite range; names the offending epoch and batch."""


@dataclass
class RunResult:
    run_dir: str
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stop_reason: str
    lr_final: float
    decays: int


def training_loss(out, labels, weights: LossWeights, frcl_mean: bool = False) -> Tensor:
    """Combined objective for tri-modal training; classification alone when
    the contrastive weights are zeroed (pair models, no_frcl)."""
    if weights.lambda2 == weights.lambda3 == weights.lambda4 == 0.0:
        return T.mul(bce_multilabel(out.logits, labels), weights.lambda1)
    return combined_loss(out, labels, weights, frcl_mean=frcl_mean)


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def train(run_config: dict, dataset: Dataset, out_dir: str, figures: bool = True) -> RunResult:
    """Run one training job to early stop or the epoch cap; returns the summary."""
    cfg = validate_run_config(run_config)
    os.makedirs(out_dir, exist_ok=True)
    T.set_default_dtype(np.float32 if cfg["trainer"]["precision"] == "float32" else np.float64)

    shapes = dataset.header.shapes()
    params, weights = make_variant(cfg, cfg["variant"], shapes, seed=cfg["seed"])
    tr = cfg["trainer"]
    opt = Adam(
        dict(params.named_parameters()),
        lr=tr["lr"],
        weight_decay=tr["weight_decay"],
        decoupled=tr["decoupled_wd"],
    )
    sched = ScheduleState(
        decay_factor=tr["decay_factor"],
        plateau_patience=tr["plateau_patience"],
        stop_patience=tr["stop_patience"],
        min_rel_improvement=tr["min_rel_improvement"],
    )

    train_idx, val_idx, _ = split_811(dataset, seed=cfg["seed"])
    val_view = dataset.subset(val_idx)
    labels = dataset.labels.astype(float)
    rng = np.random.default_rng(cfg["seed"])
    batch_size = tr["batch_size"]
    frcl_mean = cfg["loss"]["frcl_mean"]

    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.best")
    stop_reason = "max_epochs"
    epochs_run = 0

    with open(metrics_path, "w", encoding="utf-8") as metrics_fh:
        metrics_fh.write(",".join(METRICS_COLUMNS) + "\n")
        for epoch in range(1, tr["max_epochs"] + 1):
            epochs_run = epoch
            lr_this_epoch = opt.lr
            order = rng.permutation(train_idx)
            total = 0.0
            for batch_index, start in enumerate(range(0, len(order), batch_size)):
                chunk = order[start : start + batch_size]
                try:
                    out = forward_batch(params, dataset.batch(chunk))
                    loss = training_loss(out, labels[chunk], weights, frcl_mean)
                    value = loss.item()
                    opt.zero_grad()
                    backward(loss)
                    opt.step()
                except NonFiniteError as e:
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index}: {e}"
                    ) from e
                total += value * len(chunk)
            train_loss = total / len(order)

            val_loss, val_report = _validate(params, val_view, weights, frcl_mean)
            metrics_fh.write(
                ",".join(
                    [
                        str(epoch),
                        _fmt(lr_this_epoch),
                        _fmt(train_loss),
                        _fmt(val_loss),
                        _fmt(val_report.macro_auroc),
                        _fmt(val_report.macro_auprc),
                    ]
                )
                + "\n"
            )
            metrics_fh.flush()

            decision = end_of_epoch(val_loss, sched)
            if sched.best_epoch == epoch:
                save_checkpoint(ckpt_path, params, opt, cfg, epoch, val_loss)
            if decision == DECAY_LR:
                opt.lr *= sched.decay_factor
            elif decision == STOP:
                stop_reason = "early_stop"
                break

    report = {
        "best_epoch": sched.best_epoch,
        "best_val_loss": sched.best_val_loss,
        "epochs_run": epochs_run,
        "stop_reason": stop_reason,
        "lr_final": opt.lr,
        "decays": sched.decays,
        "variant": cfg["variant"],
        "modalities": cfg["modalities"],
        "seed": cfg["seed"],
    }
    tmp = os.path.join(out_dir, "report.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "report.json"))

    if figures:
        from .figures import render_training_curves

        render_training_curves(metrics_path, os.path.join(out_dir, "training_curves.png"))

    return RunResult(
        run_dir=out_dir,
        best_epoch=sched.best_epoch,
        best_val_loss=sched.best_val_loss,
        epochs_run=epochs_run,
        stop_reason=stop_reason,
        lr_final=opt.lr,
        decays=sched.decays,
    )


def _validate(params, val_view: Dataset, weights, frcl_mean, batch_size: int = 128):
    """One forward pass over the validation split: loss plus metric report."""
    from scipy import special

    from .metrics import score_report

    labels = val_view.labels.astype(float)
    total = 0.0
    scores = []
    with no_grad():
        for start in range(0, len(val_view), batch_size):
            idx = np.arange(start, min(start + batch_size, len(val_view)))
            out = forward_batch(params, val_view.batch(idx))
            total += training_loss(out, labels[idx], weights, frcl_mean).item() * len(idx)
            scores.append(special.expit(out.logits.data))
    report = score_report(np.vstack(scores), val_view.labels)
    return total / len(val_view), report


# ----- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str, params: TriMFParams, opt: Adam, cfg: dict, epoch: int, val_loss: float) -> None:
    arrays = {name: t.data for name, t in params.named_parameters()}
    arrays.update(opt.state_arrays())
    entries = []
    offset = 0
    for name, arr in arrays.items():
        nbytes = arr.size * arr.dtype.itemsize
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "trimf-checkpoint",
        "version": 1,
        "dtype": str(arrays[next(iter(arrays))].dtype) if arrays else "float64",
        "epoch": epoch,
        "val_loss": val_loss,
        "config": cfg,
        "dataset_shapes": {k: list(v) for k, v in params.shapes.items()},
        "optimizer": {
            "t": opt.t,
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "decoupled": opt.decoupled,
        },
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    os.replace(tmp, path)


@dataclass
class CheckpointBundle:
    params: TriMFParams
    optimizer: Adam
    config: dict
    epoch: int
    val_loss: float
    dataset_shapes: dict


def load_checkpoint(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    if header.get("format") != "trimf-checkpoint":
        raise ValueError(f"{path} is not a trimf checkpoint")
    cfg = validate_run_config(header["config"])
    shapes = {k: tuple(v) for k, v in header["dataset_shapes"].items()}
    T.set_default_dtype(np.float32 if cfg["trainer"]["precision"] == "float32" else np.float64)
    params, _ = make_variant(cfg, cfg["variant"], shapes, seed=cfg["seed"])

    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    arrays = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))

    named = dict(params.named_parameters())
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]} ...")
    for name, t in named.items():
        saved = arrays[name]
        if saved.shape != t.data.shape:
            raise ValueError(f"parameter '{name}' shaped {saved.shape} in checkpoint, model wants {t.data.shape}")
        t.data = saved

    o = header["optimizer"]
    opt = Adam(
        named,
        lr=o["lr"],
        weight_decay=o["weight_decay"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        eps=o["eps"],
        decoupled=o["decoupled"],
    )
    opt.t = o["t"]
    opt.load_state_arrays(arrays)
    return CheckpointBundle(
        params=params,
        optimizer=opt,
        config=cfg,
        epoch=header["epoch"],
        val_loss=header["val_loss"],
        dataset_shapes=shapes,
    )
