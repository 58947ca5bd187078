"""Training, evaluation, checkpointing and the attention benchmark."""
import copy
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import List, Optional

import numpy as np
import torch

from . import bev as bevlib
from .config import TrainConfig, from_flat_values, to_flat
from .dataio import DatasetSplit, save_mask
from .errors import ConfigError, EmptyEvaluationError, LoadError, NonFiniteLossError
from .maskdec import binarize
from .metrics import Confusion, MetricsReport, confusion, loss as change_loss, report
from .model import SegChangeModel
from .textcond import EmbeddingCache, make_provider

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8
DTYPES = {"float32": torch.float32, "float64": torch.float64}


# optimizer and schedule -----------------------------------------------------

def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with the backbone at ``lr_backbone`` and everything else at ``lr_main``."""
    backbone = list(model.backbone_parameters())
    rest = list(model.other_parameters())
    if not backbone or not rest:
        raise ConfigError("both the backbone and the non-backbone parameter groups must be non-empty")
    groups = [
        {"params": backbone, "lr": cfg.lr_backbone, "name": "backbone"},
        {"params": rest, "lr": cfg.lr_main, "name": "main"},
    ]
    return torch.optim.AdamW(groups, betas=BETAS, eps=EPS, weight_decay=cfg.weight_decay)


def _decayed(lr, gamma, k):
    # decimal arithmetic so that e.g. 1e-4 decayed once is exactly 1e-5
    return float(Decimal(repr(lr)) * Decimal(repr(gamma)) ** k)


def lr_at(epoch: int, cfg: TrainConfig):
    """Step schedule: both rates times ``gamma ** (epoch // sched_step)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // cfg.sched_step
    return _decayed(cfg.lr_backbone, cfg.sched_gamma, k), _decayed(cfg.lr_main, cfg.sched_gamma, k)


def set_lr(optimizer, epoch, cfg):
    lr_b, lr_m = lr_at(epoch, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr_b if group.get("name") == "backbone" else lr_m
    return lr_b, lr_m


# batching ------------------------------------------------------------------

def build_model(cfg: TrainConfig) -> SegChangeModel:
    return SegChangeModel.from_config(cfg).to(DTYPES[cfg.dtype])


def text_encoder(cfg: TrainConfig) -> Optional[EmbeddingCache]:
    if cfg.text.mode == "none":
        return None
    provider = make_provider(cfg.text.provider, cfg.text_width, cfg.text.seed, cfg.text.http.url)
    return EmbeddingCache(cfg.text.mode, cfg.text.template, provider, cfg.text.max_len)


def collate(samples, dtype, texts: Optional[EmbeddingCache] = None):
    t1 = torch.from_numpy(np.stack([s.image_t1 for s in samples])).permute(0, 3, 1, 2).to(dtype)
    t2 = torch.from_numpy(np.stack([s.image_t2 for s in samples])).permute(0, 3, 1, 2).to(dtype)
    mask = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float64)).to(dtype)
    text = valid = None
    if texts is not None:
        embs = [texts(s.prompt) for s in samples]
        text = torch.from_numpy(np.stack([e.vectors for e in embs])).to(dtype)
        valid = torch.tensor([e.valid_length for e in embs])
    return t1, t2, mask, text, valid


# training -------------------------------------------------------------------

@dataclass
class TrainResult:
    last: dict
    best: dict
    log: List[dict] = field(default_factory=list)

    @property
    def best_epoch(self):
        return self.best["epoch"]


def _grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(sq)


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_checkpoint(model, optimizer, cfg, epoch, step, log_lines, best_f1, best_epoch):
    return {
        "model": copy.deepcopy(model.state_dict()),
        "optimizer": copy.deepcopy(optimizer.state_dict()),
        "epoch": epoch,
        "step": step,
        "config": to_flat(cfg),
        "rng": {"torch": torch.get_rng_state().clone()},
        "log": copy.deepcopy(log_lines),
        "best_f1": best_f1,
        "best_epoch": best_epoch,
    }


def save_checkpoint(ckpt: dict, path: str):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    torch.save(ckpt, path)


def load_checkpoint(path: str) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}") from e


def model_from_checkpoint(ckpt: dict, cfg: Optional[TrainConfig] = None) -> SegChangeModel:
    cfg = cfg or from_flat_values(ckpt["config"])
    model = build_model(cfg)
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as e:
        raise LoadError(f"checkpoint does not fit the configured model: {e}") from e
    return model


def format_log_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True)


def train(cfg: TrainConfig, train_split: DatasetSplit, val_split: Optional[DatasetSplit] = None,
          resume: Optional[dict] = None, out_dir: Optional[str] = None,
          epoch_limit: Optional[int] = None) -> TrainResult:
    """Deterministic training loop.

    Each epoch visits the training split in a seeded permutation, then
    evaluates on ``val_split`` (the training split when absent). The
    checkpoint with the best validation F1 is kept alongside the last one.
    ``epoch_limit`` stops after that many epochs in this call, which is how
    interrupted runs are simulated.
    """
    cfg.validate()
    if len(train_split) == 0:
        raise EmptyEvaluationError("training split is empty")
    val_split = val_split if val_split is not None and len(val_split) else train_split
    dtype = DTYPES[cfg.dtype]
    texts = text_encoder(cfg)

    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    start_epoch, step, log_lines = 0, 0, []
    best_f1, best_epoch, best = -1.0, -1, None
    if resume is not None:
        try:
            model.load_state_dict(resume["model"])
            optimizer.load_state_dict(resume["optimizer"])
        except (RuntimeError, ValueError, KeyError) as e:
            raise LoadError(f"checkpoint does not fit the configured model: {e}") from e
        torch.set_rng_state(resume["rng"]["torch"])
        start_epoch = resume["epoch"] + 1
        step = resume["step"]
        log_lines = copy.deepcopy(resume["log"])
        best_f1, best_epoch = resume["best_f1"], resume["best_epoch"]
        best = resume.get("best_snapshot")

    last = resume
    n = len(train_split)
    epochs_run = 0
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps and step >= cfg.max_steps:
            break
        if epoch_limit is not None and epochs_run >= epoch_limit:
            break
        lr_b, lr_m = set_lr(optimizer, epoch, cfg)
        model.train()
        order = _epoch_order(cfg.seed, epoch, n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps and step >= cfg.max_steps:
                break
            batch = [train_split[int(i)] for i in order[start:start + cfg.batch_size]]
            t1, t2, mask, text, valid = collate(batch, dtype, texts)
            optimizer.zero_grad(set_to_none=True)
            value = change_loss(model(t1, t2, text, valid), mask)
            value.backward()
            if not torch.isfinite(value):
                raise NonFiniteLossError(epoch, step, value.item(), _grad_norm(model.parameters()))
            optimizer.step()
            step += 1
            losses.append(value.item())

        val = evaluate(model, val_split, cfg.decoder.threshold, cfg=cfg, texts=texts)
        entry = {
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "lr_backbone": lr_b,
            "lr_main": lr_m,
            "val_f1": val.f1,
            "val_iou": val.iou,
            "val_oa": val.oa,
        }
        log_lines.append(entry)
        log.info(format_log_line(entry))
        epochs_run += 1

        improved = val.f1 > best_f1
        if improved:
            best_f1, best_epoch = val.f1, epoch
        last = make_checkpoint(model, optimizer, cfg, epoch, step, log_lines, best_f1, best_epoch)
        if improved:
            best = {k: v for k, v in last.items()}
        last["best_snapshot"] = best
        if out_dir:
            save_checkpoint({k: v for k, v in last.items() if k != "best_snapshot"},
                            os.path.join(out_dir, "last.pt"))
            if improved:
                save_checkpoint(last, os.path.join(out_dir, "best.pt"))
            with open(os.path.join(out_dir, "log.jsonl"), "a", encoding="utf-8") as f:
                f.write(format_log_line(entry) + "\n")

    if last is None:
        last = make_checkpoint(model, optimizer, cfg, start_epoch - 1, step, log_lines, best_f1, best_epoch)
    return TrainResult(last=last, best=best or last, log=log_lines)


# evaluation -----------------------------------------------------------------

@dataclass
class Evaluation:
    report: MetricsReport
    per_sample: dict

    def __getattr__(self, name):
        return getattr(self.__dict__["report"], name)


@torch.no_grad()
def predict(model, samples, cfg: TrainConfig, texts=None):
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    for s in samples:
        t1, t2, _, text, valid = collate([s], dtype, texts)
        out.append(model(t1, t2, text, valid)[0])
    return out


@torch.no_grad()
def evaluate(model, split: DatasetSplit, threshold: float = 0.5, cfg: Optional[TrainConfig] = None,
             texts=None, dump_dir: Optional[str] = None, workers: int = 1) -> Evaluation:
    """Batch-size-1 evaluation; the dataset report is built from summed confusions.

    ``model`` may be a model or a checkpoint dict. Samples can be sharded
    across ``workers`` threads; confusion sums do not depend on the split.
    """
    if isinstance(model, dict):
        cfg = cfg or from_flat_values(model["config"])
        model = model_from_checkpoint(model, cfg)
    if cfg is None:
        raise ConfigError("evaluate needs the run config to build text conditioning")
    if len(split) == 0:
        raise EmptyEvaluationError(f"split {split.name!r} is empty")
    if texts is None:
        texts = text_encoder(cfg)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)

    def run(sample):
        t1, t2, _, text, valid = collate([sample], dtype, texts)
        pred = binarize(model(t1, t2, text, valid)[0], threshold).numpy()
        if dump_dir:
            save_mask(pred, os.path.join(dump_dir, f"{sample.id}.png"))
        return sample.id, confusion(pred, sample.mask)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, split))
    else:
        results = [run(s) for s in split]
    model.train(was_training)
    total = Confusion()
    for _, c in results:
        total = total + c
    return Evaluation(report(total), dict(results))


# attention benchmark --------------------------------------------------------

def bench_attention(sizes, modes=("additive_exact", "additive_linear"), dim=16, attn_dim=16,
                    repeats=5, seed=0):
    """Wall time (median of ``repeats``) and score-evaluation count per (mode, n)."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rows = []
    for mode in modes:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            params = bevlib.BEVConverterParams(dim, dim, attn_dim, mode)
        for n in sizes:
            gen = torch.Generator().manual_seed(seed + n)
            x = bevlib.TokenGrid(torch.randn(1, n, dim, generator=gen), (1, n))
            times, counts = [], []
            with torch.no_grad():
                for _ in range(repeats):
                    counter = bevlib.ScoreCounter()
                    t0 = time.perf_counter()
                    bevlib.convert_tokens(params, x, counter)
                    times.append(time.perf_counter() - t0)
                    counts.append(counter.count)
            rows.append({"mode": mode, "n": n, "time_s": statistics.median(times),
                         "score_evals": counts[0]})
    return rows
