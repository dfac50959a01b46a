"""CTC loss, greedy decoding, and word-error-rate scoring.

The loss marginalizes over every monotonic blank-augmented alignment of
the label sequence using the forward recursion over the extended label
string (blanks interleaved), entirely in log space. The backward pass
uses the companion beta recursion: the gradient with respect to the
logits is softmax(logits) minus the alignment posterior. Blank is always
id 0; real labels are 1..V.
"""

from __future__ import annotations

import numpy as np

from .errors import InfeasibleLabelError, InputError, ShapeError
from .tensor import Tensor, _wrap, as_tensor

BLANK = 0


def _validate_labels(labels, vocab: int) -> tuple:
    labels = tuple(int(l) for l in labels)
    if any(l < 1 or l > vocab for l in labels):
        raise ShapeError(f"labels must lie in 1..{vocab}, got {labels}")
    return labels


def min_frames(labels) -> int:
    """Fewest frames that can realize the label sequence under CTC."""
    labels = tuple(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ctc_loss(logits, labels) -> Tensor:
    """Negative log-likelihood of ``labels`` under per-frame ``logits``.

    ``logits`` is T x (V+1) with blank at column 0. Raises
    InfeasibleLabelError when the label sequence cannot fit in T frames
    (rather than returning an infinite loss).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be T x (V+1) with V >= 1, got {logits.shape}")
    t_len, width = logits.shape
    labels = _validate_labels(labels, width - 1)
    needed = min_frames(labels)
    if t_len < needed:
        raise InfeasibleLabelError(
            f"labels of collapsed length {len(labels)} need at least {needed} frames, got {t_len}"
        )

    lp = _log_softmax(logits.data.astype(np.float64))
    z = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    z[1::2] = labels
    s_len = len(z)
    # skip transition s-2 -> s exists iff z[s] is a real label differing from z[s-2]
    skip_ok = np.zeros(s_len, dtype=bool)
    if s_len >= 3:
        skip_ok[2::2] = False
        skip_ok[3::2] = z[3::2] != z[1:-2:2]
    neg_inf = -np.inf

    alpha = np.full((t_len, s_len), neg_inf)
    alpha[0, 0] = lp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s_len >= 3:
            skip_terms = np.where(skip_ok[2:], prev[:-2], neg_inf)
            acc[2:] = np.logaddexp(acc[2:], skip_terms)
        alpha[t] = acc + lp[t, z]

    if s_len > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]

    # beta excludes the emission at its own frame: beta[t, s] is the log
    # probability of finishing the path from state s using frames t+1..T-1.
    beta = np.full((t_len, s_len), neg_inf)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, z]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if s_len >= 3:
            skip_terms = np.where(skip_ok[2:], nxt[2:], neg_inf)
            acc[:-2] = np.logaddexp(acc[:-2], skip_terms)
        beta[t] = acc

    # posterior over emitted symbols: sum_s exp(alpha + beta - log_p) per label id
    occupancy = np.exp(alpha + beta - log_p)
    posterior = np.zeros_like(lp)
    np.add.at(posterior.T, z, occupancy.T)
    grad_logits = (np.exp(lp) - posterior).astype(logits.dtype)

    def bwd(g):
        return (g * grad_logits,)

    loss_value = np.asarray(-log_p, dtype=logits.dtype)
    return _wrap(loss_value, (logits,), bwd)


def ctc_loss_bruteforce(logits: np.ndarray, labels) -> float:
    """Loss by explicit enumeration of all (V+1)^T frame paths.

    Exponential in T; usable only as a small-instance oracle.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t_len, width = logits.shape
    labels = tuple(int(l) for l in labels)
    lp = _log_softmax(logits)
    total = -np.inf
    stack = [((), 0.0)]
    for t in range(t_len):
        nxt = []
        for path, acc in stack:
            for sym in range(width):
                nxt.append((path + (sym,), acc + lp[t, sym]))
        stack = nxt
    for path, acc in stack:
        if tuple(collapse(path)) == labels:
            total = np.logaddexp(total, acc)
    if total == -np.inf:
        raise InfeasibleLabelError("no path realizes the label sequence")
    return float(-total)


def collapse(frame_ids) -> list:
    """Collapse repeats then drop blanks (the CTC many-to-one map)."""
    out = []
    prev = None
    for sym in frame_ids:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return out


def greedy_decode(logits) -> list:
    """Per-frame argmax (ties to the lowest id), collapsed to labels."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {data.shape}")
    return collapse(np.argmax(data, axis=1))


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance between two symbol sequences."""
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp, ref) -> float:
    """Edit distance normalized by reference length."""
    ref = list(ref)
    if not ref:
        raise InputError("wer is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)
