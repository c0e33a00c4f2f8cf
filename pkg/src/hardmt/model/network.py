"""The shared token-to-token model and its interpolated multi-task loss.

One parameter set serves ST and MT examples alike: the only place the two
modalities differ is which rows of the input embedding they touch.  Every
model has two CTC heads (source transcript on an intermediate encoder layer,
target translation on the last one); AED and CTC/Attn add an attention
decoder trained with cross-entropy, RNN-T adds a prediction and joint network.

Output layers of CTC heads and the joint network have ``|V| + 1`` classes:
class 0 is blank and vocabulary id ``i`` is class ``i + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from ..errors import NumericalError, ShapeError
from ..vocab import BOS_ID, EOS_ID, PAD_ID
from .config import ModelConfig, ModelType
from .layers import DecoderLayer, Downsample, EncoderLayer, padding_mask, sinusoid_table
from .losses import ce_loss_batch, ctc_loss_batch, rnnt_loss_batch


@dataclass
class LossBreakdown:
    l_src_ctc: float
    l_tgt_ctc: float
    l_third: float | None
    lambdas: tuple
    total: float
    loss: torch.Tensor | None = field(default=None, repr=False)
    per_utt: dict = field(default_factory=dict, repr=False)
    excluded: dict = field(default_factory=dict)

    @staticmethod
    def combine(l1, l2, l3, lambdas):
        total = lambdas[0] * l1 + lambdas[1] * l2
        if l3 is not None:
            total = total + lambdas[2] * l3
        return total


class CTCHead(nn.Module):
    def __init__(self, d_model, vocab_size):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.proj = nn.Linear(d_model, vocab_size + 1)

    def forward(self, h):
        return self.proj(self.norm(h))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.scale = math.sqrt(d)
        self.embed = nn.Embedding(cfg.tgt_vocab_size, d)
        nn.init.normal_(self.embed.weight, 0.0, d**-0.5)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.n_heads, cfg.dec_d_ff or cfg.d_ff, cfg.dropout) for _ in range(cfg.n_dec_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.tgt_vocab_size)
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("pe", sinusoid_table(cfg.max_len, d), persistent=False)

    def forward(self, y_in, y_lens, memory, mem_lens):
        L = y_in.shape[1]
        y = self.drop(self.embed(y_in) * self.scale + self.pe[:L].to(memory.dtype))
        y_pad = padding_mask(y_lens, L)
        mem_pad = padding_mask(mem_lens, memory.shape[1])
        for layer in self.layers:
            y = layer(y, y_pad, memory, mem_pad)
        return self.out(self.norm(y))


class Predictor(nn.Module):
    """Transducer prediction network: embedding + one LSTM layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dp = cfg.pred_dim or cfg.d_model
        self.embed = nn.Embedding(cfg.tgt_vocab_size, dp)
        self.rnn = nn.LSTM(dp, dp, batch_first=True)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y_in, state=None):
        g, state = self.rnn(self.drop(self.embed(y_in)), state)
        return g, state


class Joint(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dj = cfg.joint_dim or cfg.d_model
        self.enc_proj = nn.Linear(cfg.d_model, dj)
        self.pred_proj = nn.Linear(cfg.pred_dim or cfg.d_model, dj, bias=False)
        self.out = nn.Linear(dj, cfg.tgt_vocab_size + 1)

    def forward(self, h, g):
        """``h``: B x T x d, ``g``: B x U1 x dp -> B x T x U1 x (V + 1)."""
        return self.out(torch.tanh(self.enc_proj(h)[:, :, None] + self.pred_proj(g)[:, None]))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if min(cfg.input_vocab_size, cfg.src_vocab_size, cfg.tgt_vocab_size) < 1:
            raise ShapeError("vocabulary sizes must be set on the model config")
        self.cfg = cfg
        d = cfg.d_model
        e = cfg.embed_dim or d
        self.embed = nn.Embedding(cfg.input_vocab_size, e)
        nn.init.normal_(self.embed.weight, 0.0, e**-0.5)
        self.embed_proj = nn.Linear(e, d) if e != d else None
        self.mask_emb = nn.Parameter(torch.zeros(d).normal_(0, 0.02))
        self.scale = math.sqrt(e)
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("pe", sinusoid_table(cfg.max_len, d), persistent=False)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_enc_layers)
        )
        self.downsample = Downsample(d) if cfg.post_encoder_downsample == 2 else None
        self.final_norm = nn.LayerNorm(d)
        self.src_ctc = CTCHead(d, cfg.src_vocab_size)
        self.tgt_ctc = CTCHead(d, cfg.tgt_vocab_size)
        self.decoder = Decoder(cfg) if cfg.model_type.has_decoder else None
        if cfg.model_type is ModelType.RNNT:
            self.predictor = Predictor(cfg)
            self.joint = Joint(cfg)
        else:
            self.predictor = self.joint = None
        self.frozen: set[str] = set()
        self.vocabs: dict = {}

    # -- freezing ------------------------------------------------------------

    def freeze(self, names):
        params = dict(self.named_parameters())
        for n in names:
            params[n].requires_grad_(False)
            self.frozen.add(n)

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if n not in self.frozen]

    # -- forward pieces ------------------------------------------------------

    def embed_inputs(self, x, x_lens, training=False, seed=0):
        """Embedding lookup, positional encoding and (when training) time masking.

        Each utterance gets ``time_mask_spans`` spans of width drawn uniformly
        from ``[0, floor(time_mask_max_frac * length)]``; masked frames are
        replaced by the learned mask vector.
        """
        if x.numel() and (x.min() < 0 or x.max() >= self.cfg.input_vocab_size):
            raise IndexError("input id out of range for the input vocabulary")
        h = self.embed(x) * self.scale
        if self.embed_proj is not None:
            h = self.embed_proj(h)
        h = h + self.pe[: x.shape[1]].to(h.dtype)
        if training and self.cfg.time_mask_spans > 0:
            mask = time_mask(x_lens.cpu(), x.shape[1], self.cfg.time_mask_spans, self.cfg.time_mask_max_frac, seed)
            mask = mask.to(h.device)
            h = torch.where(mask[..., None], self.mask_emb.to(h.dtype), h)
        return self.drop(h) if training else h

    def encode(self, h, lengths, keep_weights=False):
        """Returns (tap states, final states, final lengths)."""
        pad = padding_mask(lengths, h.shape[1])
        tap = None
        for i, layer in enumerate(self.encoder, 1):
            h = layer(h, pad, keep_weights=keep_weights)
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite activations after encoder layer {i}", layer=i)
            if i == self.cfg.tap_layer:
                tap = h
        out_lens = lengths
        if self.downsample is not None:
            h, out_lens = self.downsample(h, lengths)
        return tap, h, out_lens

    def memory(self, final):
        return self.final_norm(final)

    def run_encoder(self, x, x_lens, training=False, seed=0):
        x_lens = torch.as_tensor(x_lens, device=x.device)
        tap, final, f_lens = self.encode(self.embed_inputs(x, x_lens, training, seed), x_lens)
        return tap, self.memory(final), f_lens

    # -- losses --------------------------------------------------------------

    def forward_loss(self, batch, training=False, seed=0) -> LossBreakdown:
        """Interpolated loss for one batch.

        ``batch`` supplies padded ``x``, ``y_src``, ``y_tgt`` id tensors and
        their lengths.  Examples whose CTC target cannot be aligned within the
        available frames are left out of that CTC term's mean and listed in
        ``excluded``.
        """
        cfg = self.cfg
        x, x_lens = batch.x, batch.x_lens
        tap, mem, m_lens = self.run_encoder(x, x_lens, training, seed)

        per_utt, excluded = {}, {}
        src_logits = self.src_ctc(tap)
        l_src = ctc_loss_batch(src_logits, x_lens, batch.y_src + 1, batch.y_src_lens)
        tgt_logits = self.tgt_ctc(mem)
        l_tgt = ctc_loss_batch(tgt_logits, m_lens, batch.y_tgt + 1, batch.y_tgt_lens)
        per_utt["src_ctc"], per_utt["tgt_ctc"] = l_src, l_tgt
        l1 = _finite_mean(l_src, "src_ctc", excluded)
        l2 = _finite_mean(l_tgt, "tgt_ctc", excluded)

        l3 = None
        if cfg.model_type.has_decoder:
            y_in, y_out, lens = teacher_forcing(batch.y_tgt, batch.y_tgt_lens)
            logits = self.decoder(y_in, lens, mem, m_lens)
            per_utt["ce"] = ce_loss_batch(logits, y_out, lens, cfg.label_smoothing if training else 0.0)
            l3 = per_utt["ce"].mean()
        elif cfg.model_type is ModelType.RNNT:
            y_in = prepend_bos(batch.y_tgt, batch.y_tgt_lens)
            g, _ = self.predictor(y_in)
            joint = self.joint(mem, g)
            per_utt["rnnt"] = rnnt_loss_batch(joint, m_lens, batch.y_tgt + 1, batch.y_tgt_lens)
            l3 = per_utt["rnnt"].mean()

        lam = cfg.lambdas
        loss = LossBreakdown.combine(l1, l2, l3, lam)
        f1, f2 = float(l1.detach()), float(l2.detach())
        f3 = None if l3 is None else float(l3.detach())
        return LossBreakdown(
            l_src_ctc=f1,
            l_tgt_ctc=f2,
            l_third=f3,
            lambdas=lam,
            total=LossBreakdown.combine(f1, f2, f3, lam),
            loss=loss,
            per_utt=per_utt,
            excluded=excluded,
        )


def _finite_mean(losses, name, excluded):
    ok = torch.isfinite(losses)
    if not ok.all():
        excluded[name] = torch.nonzero(~ok).flatten().tolist()
    if not ok.any():
        return losses.new_zeros(()) + 0 * losses.masked_fill(~ok, 0).sum()
    return losses[ok].mean()


def prepend_bos(y, lens):
    B = y.shape[0]
    y_in = torch.cat([y.new_full((B, 1), BOS_ID), y], 1)
    keep = torch.arange(y_in.shape[1], device=y.device)[None] <= lens[:, None]
    return y_in.masked_fill(~keep, PAD_ID)


def teacher_forcing(y, lens):
    """Decoder inputs ``<s> y`` and outputs ``y </s>`` with new lengths."""
    B = y.shape[0]
    y_in = prepend_bos(y, lens)
    y_out = torch.cat([y, y.new_full((B, 1), PAD_ID)], 1)
    y_out[torch.arange(B), lens] = EOS_ID
    return y_in, y_out, lens + 1


def time_mask(lengths, max_len, n_spans, max_frac, seed):
    """Boolean B x max_len mask of positions to replace, deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    mask = torch.zeros(len(lengths), max_len, dtype=torch.bool)
    for b, n in enumerate(lengths.tolist()):
        max_w = int(max_frac * n)
        for _ in range(n_spans):
            w = int(torch.randint(0, max_w + 1, (1,), generator=gen))
            if w == 0:
                continue
            start = int(torch.randint(0, n - w + 1, (1,), generator=gen))
            mask[b, start : start + w] = True
    return mask
