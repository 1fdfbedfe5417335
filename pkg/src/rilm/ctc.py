"""CTC negative log-likelihood via the forward-backward recursion (log space)."""

from __future__ import annotations

import numpy as np

from rilm import tensor as T
from rilm.tensor import Tensor

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    pass


def required_frames(label) -> int:
    """Minimum number of frames a CTC path for ``label`` needs."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _extend(labels, blank: int, s_max: int) -> np.ndarray:
    ext = np.full((len(labels), s_max), blank, dtype=np.int64)
    for b, lab in enumerate(labels):
        ext[b, 1 : 2 * len(lab) + 1 : 2] = lab
    return ext


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(logp: np.ndarray, input_lengths, labels, blank: int = 0):
    """Per-utterance NLL and its gradient w.r.t. the log-probabilities.

    Args:
        logp: (B, T, V) frame log-probabilities (rows should be normalised).
        input_lengths: valid frames per utterance.
        labels: list of label id sequences (no blanks).

    Returns:
        nll (B,), grad (B, T, V) of ``nll`` summed over the batch.
    """
    n_batch, t_max, _ = logp.shape
    in_lens = np.asarray(input_lengths, dtype=np.int64)
    labels = [list(map(int, lab)) for lab in labels]
    for b, lab in enumerate(labels):
        need = required_frames(lab)
        if need > in_lens[b]:
            raise CtcInfeasibleError(f"utterance {b}: {in_lens[b]} frames < {need} required for label length {len(lab)}")
    s_lens = np.array([2 * len(lab) + 1 for lab in labels], dtype=np.int64)
    s_max = int(s_lens.max())
    ext = _extend(labels, blank, s_max)
    valid_s = np.arange(s_max)[None, :] < s_lens[:, None]
    skip = np.zeros((n_batch, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    lp = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (n_batch, t_max, s_max)), axis=2)
    lp = np.where(valid_s[:, None, :], lp, NEG_INF)

    alpha = np.full((n_batch, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = lp[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = lp[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        one = np.full_like(prev, NEG_INF)
        one[:, 1:] = prev[:, :-1]
        two = np.full_like(prev, NEG_INF)
        two[:, 2:] = prev[:, :-2]
        two = np.where(skip, two, NEG_INF)
        alpha[:, t] = _lse3(prev, one, two) + lp[:, t]

    rows = np.arange(n_batch)
    last = in_lens - 1
    end_blank = alpha[rows, last, s_lens - 1]
    end_label = np.where(s_lens > 1, alpha[rows, last, np.maximum(s_lens - 2, 0)], NEG_INF)
    log_like = np.logaddexp(end_blank, end_label)

    beta = np.full((n_batch, t_max, s_max), NEG_INF)
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(t_max - 1, -1, -1):
        if t + 1 < t_max:
            nxt = beta[:, t + 1]
            one = np.full_like(nxt, NEG_INF)
            one[:, :-1] = nxt[:, 1:]
            two = np.full_like(nxt, NEG_INF)
            two[:, :-2] = nxt[:, 2:]
            two = np.where(skip_next, two, NEG_INF)
            rec = _lse3(nxt, one, two) + lp[:, t]
        else:
            rec = np.full((n_batch, s_max), NEG_INF)
        init = np.full((n_batch, s_max), NEG_INF)
        init[rows, s_lens - 1] = lp[rows, t, s_lens - 1]
        has_label = s_lens > 1
        init[rows[has_label], s_lens[has_label] - 2] = lp[rows[has_label], t, s_lens[has_label] - 2]
        at_end = (last == t)[:, None]
        past_end = (last < t)[:, None]
        beta[:, t] = np.where(at_end, init, np.where(past_end, NEG_INF, rec))

    # occupancy of (t, s): alpha * beta / (emission at t)
    with np.errstate(invalid="ignore"):
        gamma = alpha + beta - np.where(np.isfinite(lp), lp, 0.0)
    occ = np.exp(gamma - log_like[:, None, None])
    occ = np.where(np.isfinite(gamma), occ, 0.0)
    grad = np.zeros_like(logp)
    bi = np.broadcast_to(rows[:, None, None], occ.shape)
    ti = np.broadcast_to(np.arange(t_max)[None, :, None], occ.shape)
    ki = np.broadcast_to(ext[:, None, :], occ.shape)
    np.add.at(grad, (bi, ti, ki), -occ)
    return -log_like, grad


def ctc_nll(logp: Tensor, input_lengths, labels, blank: int = 0) -> Tensor:
    """Taped CTC negative log-likelihood per utterance, shape (B,)."""
    nll, grad = ctc_forward_backward(logp.data, input_lengths, labels, blank)

    def bw(g):
        return (grad * g[:, None, None],)

    return T.make_op(nll, (logp,), bw, "ctc")


def ctc_loss(logits: Tensor, label, blank: int = 0) -> Tensor:
    """Scalar CTC NLL of one utterance from raw frame logits (T, V)."""
    logits = T.as_tensor(logits)
    logp = T.log_softmax(T.reshape(logits, (1,) + logits.shape))
    return T.reshape(ctc_nll(logp, [logits.shape[0]], [list(label)], blank), ())
