"""Token priors and the residual softmax for CTC posteriors.

Indexing: the CTC blank is id 0 and is excluded from counting. Count and
prior arrays therefore cover ids ``1 .. V-1`` (array position ``i`` holds
vocab id ``i + 1``). The blank's reweighting factor ``k`` is recomputed
for every frame so that the blank posterior is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rilm.tokenizer import Vocab


class SmoothingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenCounts:
    counts: np.ndarray  # int64, length V-1 (non-blank ids)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def size(self) -> int:
        return int(self.counts.size)

    @property
    def n_zero(self) -> int:
        return int((self.counts == 0).sum())


@dataclass(frozen=True)
class SmoothedPrior:
    probs: np.ndarray
    domain: str = "source"


@dataclass(frozen=True)
class PriorRatio:
    log_w: np.ndarray  # log(p_t / p_s) per non-blank id

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @classmethod
    def unit(cls, vocab_size: int) -> "PriorRatio":
        return cls(np.zeros(vocab_size - 1))


def _vocab_size(vocab) -> int:
    return len(vocab) if isinstance(vocab, Vocab) else int(vocab)


def count_tokens(corpus, vocab, count_eos: bool = False, eos: int = 2, blank: int = 0) -> TokenCounts:
    """Count non-blank token ids over a tokenized corpus (iterable of id lists)."""
    size = _vocab_size(vocab)
    counts = np.zeros(size - 1, dtype=np.int64)
    n_utts = 0
    for ids in corpus:
        n_utts += 1
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size:
            if (ids == blank).any():
                raise ValueError("count_tokens: blank id found in corpus")
            if ids.min() < 0 or ids.max() >= size:
                raise ValueError(f"count_tokens: id outside vocab of size {size}")
            np.add.at(counts, ids - 1, 1)
        if count_eos:
            counts[eos - 1] += 1
    if n_utts == 0:
        raise ValueError("count_tokens: empty corpus")
    return TokenCounts(counts)


def smooth(counts: TokenCounts, domain: str = "source") -> SmoothedPrior:
    """Relative frequencies with mass moved from seen to unseen tokens.

    A seen token gets ``C_i/C - I/((V-n0) C)``, an unseen one ``I/(n0 C)``,
    where ``I = 1`` iff some token is unseen.
    """
    c = counts.counts.astype(np.float64)
    total = float(c.sum())
    if total <= 0:
        raise SmoothingError("smooth: total count C is zero")
    size, n0 = counts.size, counts.n_zero
    ind = 1.0 if n0 != 0 else 0.0
    seen = c > 0
    probs = np.empty_like(c)
    probs[seen] = c[seen] / total - ind / ((size - n0) * total)
    if n0:
        probs[~seen] = ind / (n0 * total)
    if (probs <= 0).any():
        bad = int(np.flatnonzero(probs <= 0)[0])
        raise SmoothingError(
            f"smooth: token index {bad} gets probability {probs[bad]:.3g} "
            f"(a single seen token with count 1 leaves nothing to redistribute)"
        )
    return SmoothedPrior(probs, domain)


def prior_ratio(target: SmoothedPrior, source: SmoothedPrior) -> PriorRatio:
    if target.probs.shape != source.probs.shape:
        raise ValueError(f"prior_ratio: vocab sizes differ ({target.probs.size} vs {source.probs.size})")
    return PriorRatio(np.log(target.probs) - np.log(source.probs))


def _lse(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _check(logits: np.ndarray, ratio: PriorRatio) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != ratio.log_w.size + 1:
        raise ValueError(
            f"logit frame has {logits.shape[-1]} entries but the ratio covers {ratio.log_w.size} non-blank ids"
        )
    return logits


def log_blank_weight(logits, ratio: PriorRatio, blank: int = 0) -> np.ndarray:
    """log k per frame: log-sum of w_i e^{l_i} minus log-sum of e^{l_i} over non-blank i."""
    logits = _check(logits, ratio)
    nb = np.delete(logits, blank, axis=-1)
    return _lse(nb + ratio.log_w) - _lse(nb)


def blank_weight(logits, ratio: PriorRatio, blank: int = 0):
    """Blank reweighting factor k (scalar for one frame, array for (T, V))."""
    k = np.exp(log_blank_weight(logits, ratio, blank))
    return float(k) if np.ndim(k) == 0 else k


def _log_weights(logits: np.ndarray, ratio: PriorRatio, blank: int) -> np.ndarray:
    log_k = log_blank_weight(logits, ratio, blank)
    return np.insert(np.broadcast_to(ratio.log_w, logits.shape[:-1] + ratio.log_w.shape), blank, log_k, axis=-1)


def r_softmax(logits, ratio: PriorRatio, blank: int = 0) -> np.ndarray:
    """Prior-corrected posteriors: softmax of ``l + log u`` with u = (k, w)."""
    logits = _check(logits, ratio)
    z = logits + _log_weights(logits, ratio, blank)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_r_softmax(logits, ratio: PriorRatio, blank: int = 0) -> np.ndarray:
    logits = _check(logits, ratio)
    z = logits + _log_weights(logits, ratio, blank)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# frequency / prior tables
# ---------------------------------------------------------------------------

def write_counts(counts: TokenCounts, vocab: Vocab, path) -> None:
    lines = [f"{vocab.tokens[i + 1]}\t{int(c)}" for i, c in enumerate(counts.counts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_counts(path, vocab: Vocab) -> TokenCounts:
    counts = np.zeros(len(vocab) - 1, dtype=np.int64)
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected token<TAB>count")
        tok, value = parts
        if tok not in vocab or vocab[tok] == vocab.blank:
            raise ValueError(f"{path}:{lineno}: token {tok!r} not in vocab")
        if tok in seen:
            raise ValueError(f"{path}:{lineno}: duplicate token {tok!r}")
        seen.add(tok)
        counts[vocab[tok] - 1] = int(value)
    return TokenCounts(counts)


def write_priors(prior: SmoothedPrior, vocab: Vocab, path) -> None:
    lines = [f"{vocab.tokens[i + 1]}\t{p!r}" for i, p in enumerate(prior.probs.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def ratio_from_files(source_path, target_path, vocab: Vocab) -> PriorRatio:
    src = smooth(read_counts(source_path, vocab), "source")
    tgt = smooth(read_counts(target_path, vocab), "target")
    return prior_ratio(tgt, src)
