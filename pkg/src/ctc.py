"""
CTC Component for advspeech
Log-domain forward-backward loss and gradient, best-path decoding
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DomainError, InfeasibleTargetError, ShapeError

DEFAULT_VOCAB: Tuple[str, ...] = tuple("abcdefghijklmnopqrstuvwxyz ")
ROW_TOLERANCE = 1e-6

logger = logging.getLogger("CTC")


def encode_target(text: str, vocab: Sequence[str]) -> List[int]:
    """Map a transcript onto vocabulary indices"""
    index = {ch: i for i, ch in enumerate(vocab)}
    missing = sorted({ch for ch in text if ch not in index})
    if missing:
        raise DomainError(f"Characters {missing} are not in the vocabulary")
    return [index[ch] for ch in text]


def ctc_min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit target: one per label plus a blank between each repeated pair"""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


@dataclass(frozen=True, eq=False)
class CtcInput:
    """Per-frame log-distributions over vocab + blank (blank is the last column) and a blank-free target"""

    log_probs: np.ndarray
    target: Tuple[int, ...]

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
            raise ShapeError(f"log_probs must be T x (V+1) with T >= 1, V >= 1; got {lp.shape}")
        row_mass = np.logaddexp.reduce(lp, axis=1)
        if not np.all(np.abs(row_mass) <= ROW_TOLERANCE):
            raise DomainError("Every row of log_probs must log-sum-exp to 0")
        target = tuple(int(k) for k in self.target)
        if any(k < 0 or k >= lp.shape[1] - 1 for k in target):
            raise DomainError(f"Target labels must lie in [0, {lp.shape[1] - 1}) (blank excluded)")
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "target", target)

    @property
    def blank(self) -> int:
        return self.log_probs.shape[1] - 1


def _extended_labels(target: Tuple[int, ...], blank: int) -> Tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    # a label may be reached from two positions back unless it repeats the previous label
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def ctc_loss(inp: CtcInput) -> Tuple[float, np.ndarray]:
    """-log p(target | log_probs) and its gradient w.r.t. log_probs"""
    lp = inp.log_probs
    n_frames = lp.shape[0]
    needed = ctc_min_frames(inp.target)
    if n_frames < needed:
        raise InfeasibleTargetError(f"Target of length {len(inp.target)} needs {needed} frames, got {n_frames}")

    ext, skip = _extended_labels(inp.target, inp.blank)
    n_states = ext.size
    emit = lp[:, ext]
    neg_inf = -np.inf

    alpha = np.full((n_frames, n_states), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_frames, n_states), neg_inf)
    beta[-1, -1] = emit[-1, -1]
    if n_states > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    log_likelihood = alpha[-1, -1] if n_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_likelihood):
        raise InfeasibleTargetError("Target has zero probability under log_probs")

    # occupancy of each state at each frame, with the shared emission counted once
    with np.errstate(invalid="ignore"):
        occupancy = np.where(np.isneginf(emit), neg_inf, alpha + beta - emit)
    grad = np.full(lp.shape, neg_inf)
    for k in np.unique(ext):
        grad[:, k] = np.logaddexp.reduce(occupancy[:, ext == k], axis=1)
    grad = -np.exp(grad - log_likelihood)
    return float(-log_likelihood), grad


def collapse_path(path: Sequence[int], blank: int) -> List[int]:
    """Merge repeated labels, then drop blanks"""
    out: List[int] = []
    previous = None
    for k in path:
        k = int(k)
        if k != previous and k != blank:
            out.append(k)
        previous = k
    return out


def greedy_decode(frame_scores: np.ndarray, vocab: Sequence[str]) -> str:
    """Best-path decoding of a T x (V+1) score matrix (probabilities or log-probabilities)"""
    scores = np.asarray(frame_scores)
    if scores.ndim != 2 or scores.shape[1] != len(vocab) + 1:
        raise ShapeError(f"Expected T x {len(vocab) + 1} scores, got {scores.shape}")
    path = np.argmax(scores, axis=1)
    return "".join(vocab[k] for k in collapse_path(path, len(vocab)))
