"""CTC and attention decoding.

Hybrid score of a (partial) hypothesis ``h``::

    score(h) = (1 - ctc_weight) * (att(h) + fusion(h))
               + ctc_weight * log P_ctc(h is a prefix)
               + length_bonus * len(h)

``att`` is the summed decoder log-probability. ``fusion`` is
``lm_weight * lmT(h)`` for shallow fusion and
``target_lm_weight * lmT(h) - source_lm_weight * lmS(h)`` for density
ratio. When R-softmax is on, the CTC posteriors are prior-corrected once
before any CTC scoring; the attention branch is left alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from rilm import tensor as T
from rilm.adapt import PriorRatio, log_r_softmax
from rilm.lm import TransformerLM, next_token_logprobs

NEG_INF = -np.inf
FUSION_MODES = ("none", "shallow", "density_ratio")


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 20
    ctc_weight: float = 0.3
    fusion: str = "none"
    lm_weight: float = 0.1
    target_lm_weight: float = 0.2
    source_lm_weight: float = 0.1
    r_softmax: bool = False
    max_len: int = 0  # 0: bounded by encoder length and decoder capacity
    length_bonus: float = 0.0
    nbest: int = 1

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam must be >= 1, got {self.beam}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")


@dataclass
class Hypothesis:
    yseq: tuple[int, ...]  # starts with sos; finished hypotheses end with eos
    score: float
    att: float = 0.0
    fusion: float = 0.0
    lm_target: float = 0.0
    lm_source: float = 0.0
    ctc: float = 0.0
    ctc_state: np.ndarray | None = field(default=None, repr=False)

    def tokens(self, sos: int, eos: int) -> tuple[int, ...]:
        return tuple(t for t in self.yseq if t not in (sos, eos))


# ---------------------------------------------------------------------------
# CTC-only search
# ---------------------------------------------------------------------------

def ctc_greedy_decode(probs, blank: int = 0) -> list[int]:
    """Frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(probs).argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def _lae(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def ctc_prefix_beam_search(log_probs, beam: int = 20, blank: int = 0, nbest: int | None = None):
    """Frame-synchronous prefix search over CTC log-posteriors (T, V).

    Returns ``[(label tuple, log probability), ...]`` best first; ties are
    broken by lexicographic label order.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    lp = np.asarray(log_probs, dtype=np.float64)
    n_vocab = lp.shape[1]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(lp.shape[0]):
        frame = lp[t].tolist()
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(key):
            v = nxt.get(key)
            if v is None:
                v = nxt[key] = [NEG_INF, NEG_INF]
            return v

        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            s = slot(prefix)
            s[0] = _lae(s[0], total + frame[blank])
            last = prefix[-1] if prefix else None
            for c in range(n_vocab):
                if c == blank:
                    continue
                ext = slot(prefix + (c,))
                if c == last:
                    ext[1] = _lae(ext[1], pb + frame[c])
                    s[1] = _lae(s[1], pnb + frame[c])
                else:
                    ext[1] = _lae(ext[1], total + frame[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-_lae(kv[1][0], kv[1][1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}
    out = sorted(((k, _lae(*v)) for k, v in beams.items()), key=lambda kv: (-kv[1], kv[0]))
    return out[: nbest or len(out)]


class CtcPrefixScorer:
    """Label-synchronous CTC prefix probabilities, vectorised over candidates."""

    def __init__(self, log_probs, blank: int, eos: int):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.eos = eos

    def initial_state(self) -> np.ndarray:
        r = np.full((self.x.shape[0], 2), NEG_INF)
        r[:, 1] = np.cumsum(self.x[:, self.blank])
        return r

    def score(self, r_prev: np.ndarray, last: np.ndarray, empty: np.ndarray):
        """Prefix scores for every extension of every hypothesis.

        Args:
            r_prev: (n, T, 2) forward variables (non-blank, blank ending).
            last: (n,) last label of each prefix (ignored where ``empty``).
            empty: (n,) True for the empty prefix.
        Returns:
            psi (n, V) log prefix probabilities and r (n, T, 2, V).
        """
        x = self.x
        n, t_len = r_prev.shape[0], x.shape[0]
        n_vocab = x.shape[1]
        r_sum = np.logaddexp(r_prev[:, :, 0], r_prev[:, :, 1])
        log_phi = np.repeat(r_sum[:, :, None], n_vocab, axis=2)
        for i in np.flatnonzero(~empty):
            log_phi[i, :, last[i]] = r_prev[i, :, 1]
        r = np.full((n, t_len, 2, n_vocab), NEG_INF)
        r[empty, 0, 0, :] = x[0]
        psi = r[:, 0, 0, :].copy()
        xb = x[:, self.blank]
        for t in range(1, t_len):
            r[:, t, 0, :] = np.logaddexp(r[:, t - 1, 0, :], log_phi[:, t - 1, :]) + x[t]
            r[:, t, 1, :] = np.logaddexp(r[:, t - 1, 0, :], r[:, t - 1, 1, :]) + xb[t]
            psi = np.logaddexp(psi, log_phi[:, t - 1, :] + x[t])
        psi[:, self.eos] = r_sum[:, -1]
        psi[:, self.blank] = NEG_INF
        return psi, r


# ---------------------------------------------------------------------------
# label-synchronous (attention / hybrid) search
# ---------------------------------------------------------------------------

def ctc_log_posteriors(ctc_logits: np.ndarray, ratio: PriorRatio | None = None, blank: int = 0) -> np.ndarray:
    """Frame log-posteriors; R-softmax-corrected when ``ratio`` is given."""
    if ratio is None:
        return T._stable_log_softmax(np.asarray(ctc_logits, dtype=np.float64))
    return log_r_softmax(ctc_logits, ratio, blank)


def _check_fusion(config: DecodeConfig, target_lm, source_lm):
    if config.fusion in ("shallow", "density_ratio") and target_lm is None:
        raise ValueError(f"fusion={config.fusion} needs a target-domain LM")
    if config.fusion == "density_ratio" and source_lm is None:
        raise ValueError("fusion=density_ratio needs a source-domain LM")


def _monotone(config: DecodeConfig) -> bool:
    # every score increment is <= 0, so a live hypothesis can only get worse
    return config.fusion != "density_ratio" and config.length_bonus <= 0.0


def beam_search(
    model,
    enc,
    enc_len: int,
    config: DecodeConfig,
    ctc_log_probs: np.ndarray | None = None,
    target_lm: TransformerLM | None = None,
    source_lm: TransformerLM | None = None,
) -> list[Hypothesis]:
    """Label-synchronous beam search over one utterance.

    ``enc`` is the (1, T', d) encoder output. ``ctc_log_probs`` (T', V) is
    required when ``config.ctc_weight > 0``.
    """
    _check_fusion(config, target_lm, source_lm)
    lam = config.ctc_weight
    sos, eos, blank = model.sos, model.eos, model.blank
    n_vocab = model.config.decoder.vocab_size
    cap = model.config.decoder.max_len - 1
    max_len = min(config.max_len, cap) if config.max_len > 0 else min(int(enc_len), cap)
    use_ctc = lam > 0.0
    if use_ctc and ctc_log_probs is None:
        raise ValueError("ctc_weight > 0 needs CTC log-posteriors")
    scorer = CtcPrefixScorer(ctc_log_probs, blank, eos) if use_ctc else None

    live = [Hypothesis((sos,), 0.0, ctc_state=scorer.initial_state() if use_ctc else None)]
    ended: list[Hypothesis] = []
    banned = np.zeros(n_vocab, dtype=bool)
    banned[[blank, sos]] = True
    keep_ended = max(1, config.nbest)

    with T.no_grad():
        for step in range(max_len + 1):
            ys = np.array([h.yseq for h in live], dtype=np.int64)
            logits, _, _ = model.decoder(ys, enc, [enc_len])
            att_lp = T._stable_log_softmax(logits.data[:, -1, :])
            fused = att_lp
            lm_t = lm_s = None
            if config.fusion != "none":
                lm_t = next_token_logprobs(target_lm, ys)
                if config.fusion == "shallow":
                    fused = att_lp + config.lm_weight * lm_t
                else:
                    lm_s = next_token_logprobs(source_lm, ys)
                    fused = att_lp + config.target_lm_weight * lm_t - config.source_lm_weight * lm_s
            fused_tot = np.array([h.fusion + h.att for h in live])[:, None] + fused
            if use_ctc:
                r_prev = np.stack([h.ctc_state for h in live])
                last = ys[:, -1]
                psi, r_new = scorer.score(r_prev, last, np.array([len(h.yseq) == 1 for h in live]))
                if lam == 1.0:
                    total = psi.copy()
                else:
                    total = (1.0 - lam) * fused_tot + lam * psi
            else:
                total = fused_tot.copy()
            if config.length_bonus:
                total = total + config.length_bonus * (step + 1)
            allowed = ~banned
            if step == max_len:
                allowed = np.zeros(n_vocab, dtype=bool)
                allowed[eos] = True
            total[:, ~allowed] = NEG_INF

            order_of_parent = np.empty(len(live), dtype=np.int64)
            order_of_parent[sorted(range(len(live)), key=lambda i: live[i].yseq)] = np.arange(len(live))
            parent_rank = np.broadcast_to(order_of_parent[:, None], total.shape).ravel()
            token_id = np.broadcast_to(np.arange(n_vocab)[None, :], total.shape).ravel()
            flat = total.ravel()
            finite = np.isfinite(flat)
            cand = np.flatnonzero(finite)
            ranked = cand[np.lexsort((token_id[cand], parent_rank[cand], -flat[cand]))][: config.beam]

            new_live = []
            for f in ranked:
                i, c = divmod(int(f), n_vocab)
                h = live[i]
                fusion_inc = 0.0
                if config.fusion == "shallow":
                    fusion_inc = config.lm_weight * lm_t[i, c]
                elif config.fusion == "density_ratio":
                    fusion_inc = config.target_lm_weight * lm_t[i, c] - config.source_lm_weight * lm_s[i, c]
                child = Hypothesis(
                    yseq=h.yseq + (c,),
                    score=float(flat[f]),
                    att=h.att + float(att_lp[i, c]),
                    fusion=h.fusion + float(fusion_inc),
                    lm_target=h.lm_target + (float(lm_t[i, c]) if lm_t is not None else 0.0),
                    lm_source=h.lm_source + (float(lm_s[i, c]) if lm_s is not None else 0.0),
                    ctc=float(psi[i, c]) if use_ctc else 0.0,
                    ctc_state=r_new[i, :, :, c] if use_ctc and c != eos else None,
                )
                (ended if c == eos else new_live).append(child)
            if ended and _monotone(config):
                ended.sort(key=lambda h: (-h.score, h.yseq))
                bar = ended[keep_ended - 1].score if len(ended) >= keep_ended else NEG_INF
                new_live = [h for h in new_live if h.score > bar]
            live = new_live
            if not live:
                break
    ended.sort(key=lambda h: (-h.score, h.yseq))
    return ended[: config.nbest]


def attention_beam_search(model, enc, enc_len, config: DecodeConfig, target_lm=None, source_lm=None):
    """Attention-only search (CTC weight forced to 0)."""
    return beam_search(model, enc, enc_len, replace(config, ctc_weight=0.0), None, target_lm, source_lm)


@dataclass
class DecodeResult:
    hyps: list[Hypothesis]
    token_ids: list[list[int]]
    texts: list[str]


def hybrid_joint_decode(
    model,
    features,
    config: DecodeConfig,
    tokenizer=None,
    ratio: PriorRatio | None = None,
    target_lm=None,
    source_lm=None,
) -> DecodeResult:
    """Encode one utterance and run the joint CTC/attention search."""
    if config.r_softmax and ratio is None:
        raise ValueError("r_softmax=True needs a prior ratio")
    with T.no_grad():
        enc, lens = model.encode(np.asarray(features, dtype=np.float64))
        ctc_lp = None
        if config.ctc_weight > 0:
            logits = model.ctc_logits(enc).data[0, : lens[0]]
            ctc_lp = ctc_log_posteriors(logits, ratio if config.r_softmax else None, model.blank)
    hyps = beam_search(model, enc, int(lens[0]), config, ctc_lp, target_lm, source_lm)
    ids = [list(h.tokens(model.sos, model.eos)) for h in hyps]
    texts = [tokenizer.decode(t) for t in ids] if tokenizer is not None else []
    return DecodeResult(hyps, ids, texts)


def ctc_posteriors_for(model, features, ratio: PriorRatio | None = None) -> np.ndarray:
    """(T', V) CTC log-posteriors for one utterance."""
    with T.no_grad():
        enc, lens = model.encode(np.asarray(features, dtype=np.float64))
        logits = model.ctc_logits(enc).data[0, : lens[0]]
    return ctc_log_posteriors(logits, ratio, model.blank)
