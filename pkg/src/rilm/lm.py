"""Causal Transformer language model.

The same class is embedded as the internal LM of the RILM decoder, so a
standalone LM checkpoint can be dropped into an ASR model by name mapping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from rilm import tensor as T
from rilm.nn import (
    Adam,
    Checkpoint,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    SelfAttentionLayer,
    causal_mask,
    cross_entropy,
    sinusoidal_positions,
)
from rilm.tensor import Tensor
from rilm.tokenizer import Vocab

logger = logging.getLogger(__name__)

PAD = -1


@dataclass(frozen=True)
class TransformerLmConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 0
    max_len: int = 128

    def structural_fields(self) -> dict:
        return asdict(self)


class TransformerLM(Module):
    def __init__(self, config: TransformerLmConfig, rng: np.random.Generator, vocab: Vocab | None = None):
        super().__init__()
        if config.vocab_size <= 0:
            raise ValueError("TransformerLmConfig.vocab_size must be positive")
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "vocab", vocab)
        c = config
        self.embed = Embedding(c.vocab_size, c.d_model, rng)
        self.layers = ModuleList([SelfAttentionLayer(c.d_model, c.n_heads, c.d_ff, rng) for _ in range(c.n_layers)])
        self.norm = LayerNorm(c.d_model)
        self.head = Linear(c.d_model, c.vocab_size, rng)
        object.__setattr__(self, "_pe", sinusoidal_positions(c.max_len, c.d_model))

    def __call__(self, ids) -> Tensor:
        """Logits (B, L, V) for token ids (B, L); position t sees tokens <= t."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        length = ids.shape[1]
        if length > self.config.max_len:
            raise ValueError(f"LM input length {length} exceeds max_len {self.config.max_len}")
        x = T.add(self.embed(ids), self._pe[:length])
        mask = causal_mask(length)[None]
        for layer in self.layers:
            x = layer(x, mask)
        return self.head(self.norm(x))

    # -- checkpoints -------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        cfg = {"lm": asdict(self.config), "vocab": list(self.vocab.tokens) if self.vocab else None}
        return Checkpoint("lm", cfg, self.state_dict())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TransformerLM":
        if ckpt.model_kind != "lm":
            raise ValueError(f"expected an lm checkpoint, got model_kind={ckpt.model_kind!r}")
        vocab = Vocab(tuple(ckpt.config["vocab"])) if ckpt.config.get("vocab") else None
        model = cls(TransformerLmConfig(**ckpt.config["lm"]), np.random.default_rng(0), vocab)
        model.load_state_dict(ckpt.tensors)
        return model


def make_lm_batch(seqs, sos: int, eos: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``[sos] + y`` and targets ``y + [eos]``, right padded."""
    width = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), width), eos, dtype=np.int64)
    targets = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, 0] = sos
        inputs[i, 1 : len(s) + 1] = s
        targets[i, : len(s)] = s
        targets[i, len(s)] = eos
    return inputs, targets


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _run_epochs(model: TransformerLM, corpus, epochs: int, lr: float, batch_size: int, rng, warmup_steps: int = 0):
    vocab = model.vocab
    sos = vocab.sos if vocab else 1
    eos = vocab.eos if vocab else 2
    opt = Adam(dict(model.named_parameters()), lr=lr, warmup_steps=warmup_steps)
    log = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in batch_order(len(corpus), batch_size, rng):
            inputs, targets = make_lm_batch([corpus[i] for i in idx], sos, eos)
            n_tok = int((targets != PAD).sum())
            loss = T.scale(cross_entropy(model(inputs), targets, ignore_index=PAD), 1.0 / n_tok)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * n_tok
            count += n_tok
        log.append(total / count)
        logger.info("lm epoch %d: %.4f nats/token", epoch + 1, log[-1])
    return log


def lm_train(
    corpus,
    config: TransformerLmConfig,
    epochs: int,
    vocab: Vocab | None = None,
    lr: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
    warmup_steps: int = 0,
    zero_head: bool = False,
) -> tuple[TransformerLM, list[float]]:
    """Train a fresh LM on tokenized ``corpus`` (list of id lists).

    Returns the model and the mean per-token cross-entropy of each epoch.
    """
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("lm_train: empty corpus")
    rng = np.random.default_rng(seed)
    model = TransformerLM(config, rng, vocab)
    if zero_head:
        model.head.weight.data[:] = 0.0
    log = _run_epochs(model, corpus, epochs, lr, batch_size, rng, warmup_steps)
    return model, log


def lm_finetune(
    model: TransformerLM,
    corpus,
    epochs: int,
    vocab: Vocab | None = None,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[TransformerLM, list[float]]:
    """Continue training a copy of ``model`` on target-domain text."""
    if vocab is not None and model.vocab is not None and vocab.tokens != model.vocab.tokens:
        first = next(
            (f"{i}:{a!r}!={b!r}" for i, (a, b) in enumerate(zip(model.vocab.tokens, vocab.tokens)) if a != b),
            f"size {len(model.vocab)} != {len(vocab)}",
        )
        raise ValueError(f"lm_finetune: vocab mismatch ({first})")
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("lm_finetune: empty corpus")
    tuned = TransformerLM.from_checkpoint(model.to_checkpoint())
    log = _run_epochs(tuned, corpus, epochs, lr, batch_size, np.random.default_rng(seed))
    return tuned, log


def next_token_logprobs(model: TransformerLM, prefixes) -> np.ndarray:
    """log p(v | prefix) for equal-length sos-initiated prefixes (B, L) -> (B, V)."""
    with T.no_grad():
        logits = model(np.asarray(prefixes, dtype=np.int64))
        return T.log_softmax(logits[:, -1, :]).data


def lm_score_prefix(model: TransformerLM, prefix, next_token: int) -> float:
    return float(next_token_logprobs(model, [list(prefix)])[0, next_token])


def sequence_nll(model: TransformerLM, corpus) -> tuple[float, int]:
    """Total negative log-likelihood (eos included) and number of predicted tokens."""
    vocab = model.vocab
    sos = vocab.sos if vocab else 1
    eos = vocab.eos if vocab else 2
    total, count = 0.0, 0
    corpus = [list(s) for s in corpus]
    with T.no_grad():
        for start in range(0, len(corpus), 64):
            inputs, targets = make_lm_batch(corpus[start : start + 64], sos, eos)
            total += cross_entropy(model(inputs), targets, ignore_index=PAD).item()
            count += int((targets != PAD).sum())
    return total, count


def perplexity(model: TransformerLM, corpus) -> float:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("perplexity: empty corpus")
    total, count = sequence_nll(model, corpus)
    return math.exp(total / count)
