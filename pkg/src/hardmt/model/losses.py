"""CTC, transducer and cross-entropy losses.

CTC and RNN-T are computed in log space with explicit alpha/beta recursions;
their gradients with respect to the (pre-softmax) logits are produced by the
same forward-backward pass and handed to autograd through custom functions.
Blank is class 0 in every CTC and transducer output layer.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..errors import ShapeError, ValidationError

BLANK = 0
NEG_INF = float("-inf")


def _shift(x, k):
    """Shift along the last dim by ``k`` positions, filling with -inf."""
    pad = x.new_full(x.shape[:-1] + (k,), NEG_INF)
    return torch.cat([pad, x[..., :-k]], dim=-1)


def _ctc_forward_backward(logits, logit_lens, targets, target_lens):
    B, T, C = logits.shape
    U = targets.shape[1]
    S = 2 * U + 1
    dev = logits.device
    lp = logits.log_softmax(-1)

    ext = torch.zeros(B, S, dtype=torch.long, device=dev)
    ext[:, 1::2] = targets.clamp(0, C - 1)
    s_idx = torch.arange(S, device=dev)
    S_b = 2 * target_lens + 1
    state_ok = s_idx[None] < S_b[:, None]
    skip = torch.zeros(B, S, dtype=torch.bool, device=dev)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    lp_ext = lp.gather(2, ext[:, None, :].expand(B, T, S))
    lp_ext = lp_ext.masked_fill(~state_ok[:, None, :], NEG_INF)

    alpha = logits.new_full((T, B, S), NEG_INF)
    alpha[0, :, :2] = lp_ext[:, 0, :2]
    for t in range(1, T):
        a = alpha[t - 1]
        a2 = _shift(a, 2).masked_fill(~skip, NEG_INF)
        alpha[t] = torch.logsumexp(torch.stack([a, _shift(a, 1), a2]), 0) + lp_ext[:, t]

    bidx = torch.arange(B, device=dev)
    last = alpha[logit_lens - 1, bidx]  # B x S
    loglik = torch.logaddexp(last[bidx, S_b - 1], last[bidx, S_b - 2])

    final = (s_idx[None] == S_b[:, None] - 1) | (s_idx[None] == S_b[:, None] - 2)
    init = logits.new_zeros(B, S).masked_fill(~final, NEG_INF)
    skip_next = torch.cat([skip[:, 2:], skip.new_zeros(B, 2)], dim=1)
    beta = logits.new_full((T, B, S), NEG_INF)
    nxt = logits.new_full((B, S), NEG_INF)
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            e = nxt + lp_ext[:, t + 1]
            e1 = torch.cat([e[:, 1:], e.new_full((B, 1), NEG_INF)], 1)
            e2 = torch.cat([e[:, 2:], e.new_full((B, 2), NEG_INF)], 1).masked_fill(~skip_next, NEG_INF)
            rec = torch.logsumexp(torch.stack([e, e1, e2]), 0)
        else:
            rec = torch.full_like(nxt, NEG_INF)
        at_end = (logit_lens - 1 == t)[:, None]
        before = (t < logit_lens - 1)[:, None]
        cur = torch.where(at_end, init, torch.where(before, rec, torch.full_like(rec, NEG_INF)))
        beta[t] = cur
        nxt = cur

    reachable = torch.isfinite(loglik)
    safe_ll = torch.where(reachable, loglik, torch.zeros_like(loglik))
    occ_log = (alpha + beta).transpose(0, 1) - safe_ll[:, None, None]  # B x T x S
    occ = torch.exp(occ_log)
    posterior = logits.new_zeros(B, T, C)
    posterior.scatter_add_(2, ext[:, None, :].expand(B, T, S), occ)
    frame_ok = torch.arange(T, device=dev)[None] < logit_lens[:, None]
    grad = (lp.exp() - posterior) * frame_ok[..., None]
    grad = grad * reachable[:, None, None]
    return -loglik, grad


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, logit_lens, targets, target_lens):
        with torch.no_grad():
            loss, grad = _ctc_forward_backward(logits, logit_lens, targets, target_lens)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        g = torch.where(torch.isfinite(grad_out), grad_out, torch.zeros_like(grad_out))
        return grad * g[:, None, None], None, None, None


def _check_lengths(name, lens, limit):
    if lens.numel() and (lens.min() < 0 or lens.max() > limit):
        raise ShapeError(f"{name} out of range [0, {limit}]")


def ctc_loss_batch(logits, logit_lens, targets, target_lens):
    """Per-utterance CTC negative log-likelihood.

    ``logits``: B x T x C with blank at class 0; ``targets``: B x U labels in
    ``1..C-1`` (padding ignored beyond ``target_lens``).  Unreachable targets
    (too few frames) yield ``+inf`` with a zero gradient; callers decide
    whether to drop them.
    """
    logit_lens = torch.as_tensor(logit_lens, dtype=torch.long, device=logits.device)
    target_lens = torch.as_tensor(target_lens, dtype=torch.long, device=logits.device)
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    if targets.dim() == 1:
        targets = targets[None]
    if (target_lens < 1).any():
        raise ValidationError("CTC target must be non-empty")
    _check_lengths("logit_lens", logit_lens, logits.shape[1])
    _check_lengths("target_lens", target_lens, targets.shape[1])
    if (logit_lens < 1).any():
        raise ShapeError("every utterance needs at least one frame")
    return _CTCFunction.apply(logits, logit_lens, targets, target_lens)


def ctc_loss(logits, targets):
    """Single utterance: ``(loss, grad wrt logits)`` for a T x C logit matrix."""
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    if targets.numel() == 0:
        raise ValidationError("CTC target must be non-empty")
    x = logits.detach()[None].clone().requires_grad_(True)
    loss = ctc_loss_batch(x, [x.shape[1]], targets[None], [len(targets)])
    loss.sum().backward()
    return loss.item(), x.grad[0]


def ctc_min_frames(targets) -> int:
    """Frames needed to emit ``targets``: one per label plus one per repeat."""
    targets = list(targets)
    return len(targets) + sum(1 for a, b in zip(targets, targets[1:]) if a == b)


# ---------------------------------------------------------------------------
# transducer


def _rnnt_forward_backward(logits, logit_lens, targets, target_lens):
    B, T, U1, C = logits.shape
    U = U1 - 1
    dev = logits.device
    lp = logits.log_softmax(-1)
    t_idx = torch.arange(T, device=dev)
    u_idx = torch.arange(U1, device=dev)
    t_ok = t_idx[None, :, None] < logit_lens[:, None, None]
    blank = lp[..., BLANK].masked_fill(~(t_ok & (u_idx[None, None, :] <= target_lens[:, None, None])), NEG_INF)
    emit = logits.new_full((B, T, U1), NEG_INF)
    if U > 0:
        tg = targets[:, :U].clamp(0, C - 1)
        e = lp[:, :, :U, :].gather(3, tg[:, None, :, None].expand(B, T, U, 1)).squeeze(-1)
        emit[:, :, :U] = e
    emit = emit.masked_fill(~(t_ok & (u_idx[None, None, :] < target_lens[:, None, None])), NEG_INF)

    # padded lattices: index [t + 1, u + 1] holds cell (t, u)
    alpha_p = logits.new_full((B, T + 1, U1 + 1), NEG_INF)
    blank_p = logits.new_full((B, T + 1, U1 + 1), NEG_INF)
    emit_p = logits.new_full((B, T + 1, U1 + 1), NEG_INF)
    blank_p[:, 1:, 1:] = blank
    emit_p[:, 1:, 1:] = emit
    alpha_p[:, 1, 1] = 0.0
    for n in range(1, T + U):
        ts = torch.arange(max(0, n - U), min(T - 1, n) + 1, device=dev)
        us = n - ts
        alpha_p[:, ts + 1, us + 1] = torch.logaddexp(
            alpha_p[:, ts, us + 1] + blank_p[:, ts, us + 1],
            alpha_p[:, ts + 1, us] + emit_p[:, ts + 1, us],
        )
    alpha = alpha_p[:, 1:, 1:]
    bidx = torch.arange(B, device=dev)
    loglik = alpha[bidx, logit_lens - 1, target_lens] + blank[bidx, logit_lens - 1, target_lens]

    # beta_p[t, u]: log prob of finishing from cell (t, u); terminal node (T_b, U_b)
    beta_p = logits.new_full((B, T + 1, U1 + 1), NEG_INF)
    beta_p[bidx, logit_lens, target_lens] = 0.0
    for n in range(T - 1 + U, -1, -1):
        ts = torch.arange(max(0, n - U), min(T - 1, n) + 1, device=dev)
        us = n - ts
        rec = torch.logaddexp(
            blank[:, ts, us] + beta_p[:, ts + 1, us],
            emit[:, ts, us] + beta_p[:, ts, us + 1],
        )
        valid = (ts[None] < logit_lens[:, None]) & (us[None] <= target_lens[:, None])
        beta_p[:, ts, us] = torch.where(valid, rec, beta_p[:, ts, us])

    g_blank = -torch.exp(alpha + blank + beta_p[:, 1:, :U1] - loglik[:, None, None])
    g_emit = -torch.exp(alpha + emit + beta_p[:, :T, 1:] - loglik[:, None, None])
    G = logits.new_zeros(B, T, U1, C)
    G[..., BLANK] = g_blank
    if U > 0:
        G[:, :, :U, :].scatter_add_(3, tg[:, None, :, None].expand(B, T, U, 1), g_emit[:, :, :U, None])
    grad = G - lp.exp() * (g_blank + g_emit)[..., None]
    return -loglik, grad


class _RNNTFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, logit_lens, targets, target_lens):
        with torch.no_grad():
            loss, grad = _rnnt_forward_backward(logits, logit_lens, targets, target_lens)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out[:, None, None, None], None, None, None


def rnnt_loss_batch(logits, logit_lens, targets, target_lens):
    """Per-utterance transducer negative log-likelihood.

    ``logits``: B x T x (U+1) x C joint-network outputs, blank at class 0;
    empty targets are allowed (the path is all blanks).
    """
    dev = logits.device
    logit_lens = torch.as_tensor(logit_lens, dtype=torch.long, device=dev)
    target_lens = torch.as_tensor(target_lens, dtype=torch.long, device=dev)
    targets = torch.as_tensor(targets, dtype=torch.long, device=dev)
    if targets.dim() == 1:
        targets = targets[None]
    if logits.dim() != 4:
        raise ShapeError(f"joint logits must be B x T x U+1 x C, got {tuple(logits.shape)}")
    if targets.shape[1] < logits.shape[2] - 1:
        raise ShapeError("targets narrower than the joint lattice")
    _check_lengths("logit_lens", logit_lens, logits.shape[1])
    _check_lengths("target_lens", target_lens, logits.shape[2] - 1)
    if (logit_lens < 1).any():
        raise ShapeError("every utterance needs at least one frame")
    return _RNNTFunction.apply(logits, logit_lens, targets, target_lens)


def rnnt_loss(joint_logits, targets):
    """Single utterance: ``(loss, grad)`` for a T x (U+1) x C joint tensor."""
    joint_logits = torch.as_tensor(joint_logits)
    targets = torch.as_tensor(list(targets), dtype=torch.long).reshape(1, -1)
    x = joint_logits.detach()[None].clone().requires_grad_(True)
    loss = rnnt_loss_batch(x, [x.shape[1]], targets, [targets.shape[1]])
    loss.sum().backward()
    return loss.item(), x.grad[0]


# ---------------------------------------------------------------------------
# cross-entropy


def ce_loss_batch(logits, targets, target_lens, smoothing: float = 0.0):
    """Per-example mean token cross-entropy with optional label smoothing.

    ``targets`` already include the closing eos; positions past
    ``target_lens`` are ignored.
    """
    if logits.shape[:2] != targets.shape[:2]:
        raise ShapeError(f"logits {tuple(logits.shape[:2])} vs targets {tuple(targets.shape[:2])}")
    lp = logits.log_softmax(-1)
    nll = -lp.gather(2, targets.clamp(min=0)[..., None]).squeeze(-1)
    if smoothing > 0:
        nll = (1 - smoothing) * nll - smoothing * lp.mean(-1)
    mask = torch.arange(targets.shape[1], device=logits.device)[None] < target_lens[:, None]
    return (nll * mask).sum(1) / target_lens.clamp(min=1)


def ce_loss(dec_logits, targets, smoothing: float = 0.0):
    """Single sequence: ``(loss, grad)`` for an M x V logit matrix."""
    dec_logits = torch.as_tensor(dec_logits)
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    if dec_logits.shape[0] != len(targets):
        raise ShapeError(f"{dec_logits.shape[0]} logit rows for {len(targets)} targets")
    x = dec_logits.detach()[None].clone().requires_grad_(True)
    loss = ce_loss_batch(x, targets[None], torch.tensor([len(targets)]), smoothing)
    loss.sum().backward()
    return loss.item(), x.grad[0]


def smoothed_floor(vocab_size: int, smoothing: float) -> float:
    """Lowest reachable smoothed cross-entropy: the entropy of the target mix."""
    if smoothing == 0:
        return 0.0
    q_true = 1 - smoothing + smoothing / vocab_size
    q_other = smoothing / vocab_size
    return -(q_true * math.log(q_true) + (vocab_size - 1) * q_other * math.log(q_other))
