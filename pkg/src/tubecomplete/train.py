"""Training loop: per-case forward/backward, Adam updates, loss telemetry,
and per-epoch checkpointing with resume support.

The loop is deliberately stochastic-batch-of-one: each step runs one fracture
case end to end.  Per-case geometry that does not depend on the parameters
(core selection, encoder grouping, the first stage's feature lookup, the
ground truth's density split) is computed once and reused across epochs.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, adam_step, backward, load_checkpoint, save_checkpoint
from .config import loss_config, model_config
from .errors import ConfigError, NumericError
from .geometry import density_partition
from .losses import BLENDED, total_loss
from .network import check_params, init_params, model_forward
from .synth import load_manifest, load_patient_cases


@dataclass
class EpochStats:
    epoch: int
    l_g: float
    l_l: float
    total: float
    branch_fraction: float  # fraction of steps taking the blended branch


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_loss_log(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,l_g,l_l,total,branch_fraction\n")
        for r in rows:
            fh.write(f"{r.epoch},{_fmt(r.l_g)},{_fmt(r.l_l)},"
                     f"{_fmt(r.total)},{_fmt(r.branch_fraction)}\n")


def _checkpoint_blobs(params: dict, adam: AdamState) -> dict:
    blobs = {name: p.data for name, p in params.items()}
    for name, m in adam.m.items():
        blobs[f"adam.m.{name}"] = m
        blobs[f"adam.v.{name}"] = adam.v[name]
    blobs["adam.step"] = np.array(float(adam.step))
    return blobs


def _restore_adam(blobs: dict, lr: float) -> AdamState:
    adam = AdamState(lr=lr)
    step = blobs.get("adam.step")
    adam.step = int(step) if step is not None else 0
    for name, arr in blobs.items():
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = arr.copy()
    return adam


def load_model_checkpoint(path):
    """(ModelConfig, params dict, full config doc) from a checkpoint file."""
    from .network import ModelConfig
    from .autodiff import Tensor

    config, blobs = load_checkpoint(path)
    if "model" not in config:
        raise ConfigError(f"{path}: checkpoint carries no model section")
    mcfg = ModelConfig.from_dict(config["model"])
    params = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in blobs.items() if not name.startswith("adam.")
    }
    check_params(mcfg, params)
    return mcfg, params, config


def load_training_cases(root, split: str = "train"):
    """[(patient_id, CaseRecord)] for every case in the manifest split."""
    manifest = load_manifest(root)
    ids = manifest["splits"].get(split, [])
    cases = []
    gts = {}
    for pid in ids:
        gt, records = load_patient_cases(root, pid)
        gts[pid] = gt
        for rec in records:
            cases.append((pid, rec))
    return cases, gts


def train_model(data_root, doc: dict, out_path, log_path=None,
                resume: bool = False, quiet: bool = False):
    """Train on the manifest's train split; returns (params, history).

    Writes the checkpoint after every epoch; a non-finite loss raises
    NumericError and leaves the previous epoch's checkpoint on disk.
    """
    mcfg = model_config(doc)
    lcfg = loss_config(doc)
    epochs = int(doc["train"]["epochs"])
    lr = float(doc["train"]["lr"])
    seed = int(doc["train"]["seed"])

    cases, gts = load_training_cases(data_root, "train")
    if not cases and epochs > 0:
        raise ConfigError(f"{data_root}: train split has no cases")
    for _pid, rec in cases:
        if len(rec.input) < max(mcfg.n0, mcfg.transsa.centroids[0]):
            raise ConfigError(
                f"case {_pid}/{rec.case_index} has {len(rec.input)} points, "
                f"model needs at least {max(mcfg.n0, mcfg.transsa.centroids[0])}"
            )

    start_epoch = 0
    history = []
    if resume and os.path.exists(out_path):
        ck_cfg, blobs = load_checkpoint(out_path)
        if ck_cfg.get("model") != mcfg.to_dict():
            raise ConfigError(f"{out_path}: checkpoint model config differs from run config")
        from .autodiff import Tensor
        params = {name: Tensor(arr, requires_grad=True)
                  for name, arr in blobs.items() if not name.startswith("adam.")}
        check_params(mcfg, params)
        adam = _restore_adam(blobs, lr)
        start_epoch = int(ck_cfg.get("progress", {}).get("epoch", 0))
    else:
        params = init_params(mcfg, [seed, 0])
        adam = AdamState(lr=lr)

    ck_config = {"model": mcfg.to_dict(), "loss": lcfg.to_dict(),
                 "train": {"lr": lr, "seed": seed},
                 "progress": {"epoch": start_epoch}}
    if epochs == 0 or start_epoch >= epochs:
        save_checkpoint(out_path, ck_config, _checkpoint_blobs(params, adam))
        if log_path is not None:
            write_loss_log(history, log_path)
        return params, history

    fwd_caches = [dict() for _ in cases]
    partitions = {pid: density_partition(gt, k=lcfg.cps.k_density)
                  for pid, gt in gts.items()}

    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([seed, 1, epoch]).permutation(len(cases))
        sums = np.zeros(3)
        blended = 0
        for step, ci in enumerate(order):
            pid, rec = cases[ci]
            _p0, p1, p2 = model_forward(rec.input, mcfg, params, fwd_caches[ci])
            bd = total_loss(p1, p2, gts[pid], lcfg, partition=partitions[pid])
            if not np.isfinite(bd.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {step} "
                    f"(case {pid}/{rec.case_index})"
                )
            backward(bd.tensor)
            adam_step(params, adam)
            for p in params.values():
                p.zero_grad()
            sums += (bd.l_g, bd.l_l, bd.total)
            blended += bd.branch == BLENDED
        n = len(cases)
        stats = EpochStats(epoch, sums[0] / n, sums[1] / n, sums[2] / n,
                           blended / n)
        history.append(stats)
        if not quiet:
            print(f"epoch {epoch}: total={stats.total:.6f} l_g={stats.l_g:.6f} "
                  f"l_l={stats.l_l:.6f} blended={stats.branch_fraction:.2f}",
                  file=sys.stderr)
        ck_config["progress"] = {"epoch": epoch + 1}
        save_checkpoint(out_path, ck_config, _checkpoint_blobs(params, adam))
        if log_path is not None:
            write_loss_log(history, log_path)
    return params, history
