"""Optimisation loop, best-k checkpoint bookkeeping and decoder transfer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import batch as make_batches
from .data import epoch_seed
from .errors import ConfigError, NumericalError, ShapeError
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.config import ModelConfig
from .model.network import Decoder, Seq2Seq, CTCHead

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_iters: int = 1000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    warmup: int = 1000
    clip: float = 5.0
    eval_every: int = 500
    keep_best: int = 10
    seed: int = 0
    max_tokens: int = 2000
    average_best: int = 0  # >0: load the mean of the n best checkpoints at the end

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.keep_best < 1:
            raise ConfigError("keep_best must be >= 1")
        if self.eval_every < 1 or self.warmup < 0 or self.lr <= 0 or self.clip <= 0:
            raise ConfigError("bad optimiser settings")
        if self.average_best > self.keep_best:
            raise ConfigError("average_best cannot exceed keep_best")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then inverse-square-root decay (step counts from 1)."""
    if cfg.warmup == 0:
        return cfg.lr
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


@dataclass
class CheckpointIndex:
    """Best checkpoints, ascending by validation loss (ties: earlier iteration first)."""

    keep_best: int
    entries: list = field(default_factory=list)  # (path, val_loss, iteration)

    def add(self, path, val_loss, iteration):
        self.entries.append((str(path), float(val_loss), int(iteration)))
        self.entries.sort(key=lambda e: (e[1], e[2]))
        dropped = self.entries[self.keep_best :]
        self.entries = self.entries[: self.keep_best]
        for p, _, _ in dropped:
            Path(p).unlink(missing_ok=True)
        return [p for p, _, _ in dropped]

    def __len__(self):
        return len(self.entries)

    @property
    def best(self):
        return self.entries[0] if self.entries else None

    def save(self, path):
        Path(path).write_text(json.dumps({"keep_best": self.keep_best, "entries": self.entries}, indent=1))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["keep_best"], [tuple(e) for e in d["entries"]])


@dataclass
class TrainResult:
    index: CheckpointIndex
    model: Seq2Seq
    steps: int
    history: list  # per step: (iteration, total loss, post-clip grad norm, clipped)
    valid: list  # (iteration, validation loss)


class Diverged(NumericalError):
    def __init__(self, message, iteration, index):
        super().__init__(message)
        self.iteration = iteration
        self.index = index


@torch.no_grad()
def evaluate(model: Seq2Seq, batches) -> float:
    """Example-weighted mean of the interpolated loss."""
    was = model.training
    model.eval()
    tot, n = 0.0, 0
    for b in batches:
        lb = model.forward_loss(b, training=False)
        tot += lb.total * len(b)
        n += len(b)
    model.train(was)
    return tot / max(n, 1)


def train(cfg: TrainConfig, model_cfg: ModelConfig | None, data, valid_data=None, out_dir=None,
          model: Seq2Seq | None = None, on_step=None) -> TrainResult:
    """Run exactly ``cfg.max_iters`` optimiser steps.

    Either ``model_cfg`` (fresh model, seeded by ``cfg.seed``) or an existing
    ``model`` is given.  Checkpoints land in ``out_dir`` as ``ckpt_<iter>.dsqc``;
    only the ``keep_best`` best by validation loss are kept on disk.
    """
    if not data:
        raise ConfigError("training data is empty")
    torch.manual_seed(cfg.seed)
    if model is None:
        if model_cfg is None:
            raise ConfigError("need a model config or a model")
        model = Seq2Seq(model_cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    valid_batches = make_batches(valid_data, cfg.max_tokens, 0)[0] if valid_data else None
    index = CheckpointIndex(cfg.keep_best)
    history, valid = [], []
    epoch, queue = 0, []
    recent = []
    model.train()

    def checkpoint(it, loss):
        if out_dir is None:
            return
        path = out_dir / f"ckpt_{it:07d}.dsqc"
        save_checkpoint(path, model, {"iteration": it, "val_loss": loss, "train": cfg.to_dict()})
        index.add(path, loss, it)
        index.save(out_dir / "index.json")

    for it in range(1, cfg.max_iters + 1):
        if not queue:
            queue, skipped = make_batches(data, cfg.max_tokens, epoch_seed(cfg.seed, epoch))
            if not queue:
                raise ConfigError(f"max_tokens={cfg.max_tokens} leaves no trainable example")
            if skipped and epoch == 0:
                log.warning("%d examples exceed max_tokens and are skipped", len(skipped))
            epoch += 1
        b = queue.pop(0)
        for g in opt.param_groups:
            g["lr"] = lr_at(cfg, it)
        try:
            lb = model.forward_loss(b, training=True, seed=epoch_seed(cfg.seed, it))
        except NumericalError as e:
            raise Diverged(f"iteration {it}: {e}", it, index) from e
        if not math.isfinite(lb.total):
            raise Diverged(f"non-finite loss at iteration {it}", it, index)
        opt.zero_grad(set_to_none=True)
        lb.loss.backward()
        norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip))
        clipped = norm > cfg.clip
        post = float(torch.linalg.vector_norm(torch.stack(
            [p.grad.norm() for p in params if p.grad is not None]))) if clipped else norm
        if not math.isfinite(norm):
            raise Diverged(f"non-finite gradient at iteration {it}", it, index)
        opt.step()
        history.append((it, lb.total, post, clipped))
        recent.append(lb.total)
        if on_step is not None:
            on_step(it, lb, model)
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            loss = evaluate(model, valid_batches) if valid_batches else sum(recent) / len(recent)
            recent = []
            valid.append((it, loss))
            log.info("iter %d train %.4f valid %.4f", it, lb.total, loss)
            checkpoint(it, loss)
    if cfg.average_best and len(index):
        n = min(cfg.average_best, len(index))
        avg = average_checkpoints(index, n)
        model.load_state_dict({k: v.to(torch.float32) for k, v in avg.items()})
    return TrainResult(index, model, cfg.max_iters, history, valid)


def average_checkpoints(index: CheckpointIndex, n: int) -> dict:
    """Element-wise float64 mean of the ``n`` best checkpoints."""
    if not 1 <= n <= len(index):
        raise ConfigError(f"cannot average {n} of {len(index)} checkpoints")
    total = None
    for path, _, _ in index.entries[:n]:
        _, tensors, _ = load_checkpoint(path)
        if total is None:
            total = {k: v.to(torch.float64) for k, v in tensors.items()}
            continue
        if set(tensors) != set(total):
            raise ShapeError(f"{path}: tensor names differ from the first checkpoint")
        for k, v in tensors.items():
            if v.shape != total[k].shape:
                raise ShapeError(f"{path}: {k} has shape {tuple(v.shape)}, expected {tuple(total[k].shape)}")
            total[k] += v.to(torch.float64)
    return {k: v / n for k, v in total.items()}


FREEZE_GROUPS = {
    "feed_forward": "feed_forward",
    "ff": "feed_forward",
    "self_attention": "self_attn",
    "selfattn": "self_attn",
    "self_attn": "self_attn",
    "cross_attention": "cross_attn",
    "crossattn": "cross_attn",
    "cross_attn": "cross_attn",
}


def decoder_param_names(model: Seq2Seq, groups) -> list[str]:
    subs = set()
    for g in groups:
        if g not in FREEZE_GROUPS:
            raise ConfigError(f"unknown freeze group {g!r}")
        subs.add(FREEZE_GROUPS[g])
    return [n for n, _ in model.named_parameters()
            if n.startswith("decoder.layers.") and n.split(".")[3] in subs]


def init_decoder_from_text_model(model: Seq2Seq, text_ckpt, freeze=("feed_forward", "self_attention"),
                                 adopt_vocab: bool = False) -> Seq2Seq:
    """Copy the decoder of a pretrained text model into ``model`` and freeze parts of it.

    If the text model's target vocabulary differs from ``model``'s, it is only
    accepted with ``adopt_vocab``; the target-side output layers are then
    rebuilt for the adopted vocabulary.
    """
    if model.decoder is None:
        raise ConfigError("model has no attention decoder")
    t_cfg, tensors, meta = load_checkpoint(text_ckpt)
    t_vocab = meta.get("vocabs", {}).get("tgt")
    m_vocab = model.vocabs.get("tgt")
    mismatch = t_cfg.tgt_vocab_size != model.cfg.tgt_vocab_size or (
        t_vocab is not None and m_vocab is not None and t_vocab != m_vocab)
    if mismatch:
        if not adopt_vocab:
            raise ConfigError("target vocabulary differs from the text model; pass adopt_vocab to take it over")
        model.cfg.tgt_vocab_size = t_cfg.tgt_vocab_size
        model.decoder = Decoder(model.cfg)
        model.tgt_ctc = CTCHead(model.cfg.d_model, model.cfg.tgt_vocab_size)
        if t_vocab is not None:
            model.vocabs["tgt"] = list(t_vocab)
    own = dict(model.decoder.named_parameters())
    dec = {k[len("decoder."):]: v for k, v in tensors.items() if k.startswith("decoder.")}
    if set(dec) != set(own):
        raise ShapeError("decoder structure of the text model does not match")
    for k, v in dec.items():
        if v.shape != own[k].shape:
            raise ShapeError(f"decoder.{k}: shape {tuple(v.shape)} vs {tuple(own[k].shape)}")
    with torch.no_grad():
        for k, v in dec.items():
            own[k].copy_(v.to(own[k].dtype))
    model.freeze(decoder_param_names(model, freeze))
    return model
