"""Supervised training loop (AdamW, masked L1) with loss logging and periodic checkpoints."""

import csv
import logging
import math
import os

import numpy as np
import torch

from .errors import NumericError, ValidationError
from .model import disparity_loss, masked_l1, save_checkpoint

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["iter", "loss", "epe_train"]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def stack_samples(samples):
    """``(left, right, gt, mask)`` tensors from a list of samples with ground truth."""
    if any(s.gt is None for s in samples):
        raise ValidationError("training samples need ground truth")
    left = torch.from_numpy(np.stack([s.left for s in samples])).permute(0, 3, 1, 2).contiguous()
    right = torch.from_numpy(np.stack([s.right for s in samples])).permute(0, 3, 1, 2).contiguous()
    gt = torch.from_numpy(np.stack([np.nan_to_num(s.gt.values) for s in samples]))[:, None]
    mask = torch.from_numpy(np.stack([s.gt.valid for s in samples]))[:, None]
    return left, right, gt, mask


def _batches(n, batch, seed):
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield perm[i : i + batch]


def train(
    model,
    samples,
    iters,
    lr=1e-5,
    batch=2,
    seed=0,
    weight_decay=1e-4,
    schedule="constant",
    warmup=0,
    grad_clip=1.0,
    ckpt_every=None,
    out_dir=None,
    log_path=None,
):
    """Fit ``model`` to ``samples`` for ``iters`` steps; returns the loss log rows.

    ``schedule`` is ``"constant"`` or ``"cosine"`` (after ``warmup`` linear
    steps). A non-finite loss aborts with :class:`NumericError` naming the
    iteration.
    """
    if iters <= 0:
        raise ValidationError("iters must be positive")
    seed_everything(seed)
    left, right, gt, mask = stack_samples(samples)
    device = next(model.parameters()).device
    left, right, gt, mask = (t.to(device) for t in (left, right, gt, mask))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        if schedule == "cosine":
            t = (step - warmup) / max(1, iters - warmup)
            return 0.02 + 0.98 * 0.5 * (1 + math.cos(math.pi * t))
        return 1.0

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    rows = []
    log_fh = writer = None
    if log_path is not None:
        log_fh = open(log_path, "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOSS_LOG_HEADER)
    model.train()
    try:
        batches = _batches(len(samples), min(batch, len(samples)), seed)
        for it in range(1, iters + 1):
            idx = torch.as_tensor(next(batches))
            out = model(left[idx], right[idx])
            loss = disparity_loss(out, gt[idx], mask[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            sched.step()
            with torch.no_grad():
                epe_train = masked_l1(out["disparity"], gt[idx], mask[idx]).item()
            row = (it, loss.item(), epe_train)
            rows.append(row)
            if writer is not None:
                writer.writerow([it, f"{row[1]:.6g}", f"{row[2]:.6g}"])
            if it % 100 == 0:
                log.info("iter %d loss %.4f epe %.4f", it, row[1], row[2])
            if ckpt_every and out_dir and it % ckpt_every == 0:
                save_checkpoint(model, os.path.join(out_dir, f"ckpt_{it:06d}.npz"), {"iter": it})
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.npz"), {"iter": iters})
    model.eval()
    return rows


@torch.no_grad()
def evaluate_samples(model, samples, threshold=3.0):
    """Mean EPE and D1 over samples, plus the per-sample predictions."""
    from .metrics import d1, epe

    model.eval()
    preds = [model.predict(s.left, s.right) for s in samples]
    epes = [epe(p, s.gt) for p, s in zip(preds, samples)]
    d1s = [d1(p, s.gt, threshold) for p, s in zip(preds, samples)]
    return float(np.mean(epes)), float(np.mean(d1s)), preds
