"""Hybrid CTC/attention ASR model with a replaceable internal LM (RILM).

Decoder data flow for a token prefix ``y`` and encoder states ``h``::

    logits_L = ILM(y)                         # N cross-attention-free layers
    z        = bridge(softmax(logits_L)) + PE # FC: V -> d_model
    logits_A = out(M cross-attention layers(z, h))
    logits   = logits_A + beta * logits_L

Every internal-LM tensor is named ``decoder.ilm.*`` so freezing and
swapping work by name prefix.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rilm import tensor as T
from rilm.ctc import CtcInfeasibleError, ctc_nll, required_frames
from rilm.lm import PAD, TransformerLM, TransformerLmConfig, batch_order, make_lm_batch
from rilm.nn import (
    Adam,
    Checkpoint,
    CrossAttentionLayer,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    SelfAttentionLayer,
    average_checkpoints,
    causal_mask,
    cross_entropy,
    length_mask,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_positions,
)
from rilm.tensor import Tensor
from rilm.tokenizer import Vocab

logger = logging.getLogger(__name__)

ILM_PREFIX = "decoder.ilm."


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    stack: int = 1
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 1024


@dataclass(frozen=True)
class RilmDecoderConfig:
    n_lm_layers: int = 2
    n_cross_layers: int = 2
    beta: float = 0.3
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 0
    max_len: int = 128
    bridge_input: str = "prob"

    def __post_init__(self):
        if self.n_lm_layers < 1 or self.n_cross_layers < 1:
            raise ValueError("RILM decoder needs N >= 1 and M >= 1")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.bridge_input not in ("prob", "logit"):
            raise ValueError(f"bridge_input must be 'prob' or 'logit', got {self.bridge_input!r}")

    def lm_config(self) -> TransformerLmConfig:
        return TransformerLmConfig(
            n_layers=self.n_lm_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            vocab_size=self.vocab_size,
            max_len=self.max_len,
        )


@dataclass(frozen=True)
class AsrConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: RilmDecoderConfig = field(default_factory=RilmDecoderConfig)
    ctc_weight: float = 0.3

    def to_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "decoder": asdict(self.decoder), "ctc_weight": self.ctc_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "AsrConfig":
        return cls(EncoderConfig(**d["encoder"]), RilmDecoderConfig(**d["decoder"]), d["ctc_weight"])


def stack_frames(x: np.ndarray, s: int) -> np.ndarray:
    """(B, T, D) -> (B, ceil(T/s), s*D), zero padding the tail."""
    b, t, d = x.shape
    out_len = -(-t // s)
    pad = out_len * s - t
    if pad:
        x = np.concatenate([x, np.zeros((b, pad, d))], axis=1)
    return x.reshape(b, out_len, s * d)


class Encoder(Module):
    """Frame stacking + linear projection + Transformer layers.

    With ``n_layers == 0`` the output is the bare projection (no positions,
    no normalisation).
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "config", config)
        c = config
        self.proj = Linear(c.input_dim * c.stack, c.d_model, rng)
        self.layers = ModuleList([SelfAttentionLayer(c.d_model, c.n_heads, c.d_ff, rng) for _ in range(c.n_layers)])
        if c.n_layers:
            self.norm = LayerNorm(c.d_model)

    def output_lengths(self, lengths) -> np.ndarray:
        return -(-np.asarray(lengths, dtype=np.int64) // self.config.stack)

    def __call__(self, feats, lengths=None) -> tuple[Tensor, np.ndarray]:
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1] == 0:
            raise ValueError("encoder_forward: empty feature matrix")
        if x.shape[2] != self.config.input_dim:
            raise T.ShapeError(f"encoder_forward: feature dim {x.shape[2]} != configured {self.config.input_dim}")
        if lengths is None:
            lengths = np.full(x.shape[0], x.shape[1])
        out_lens = self.output_lengths(lengths)
        h = self.proj(Tensor(stack_frames(x, self.config.stack)))
        if self.config.n_layers:
            t_out = h.shape[1]
            if t_out > self.config.max_len:
                raise ValueError(f"encoder input too long: {t_out} > {self.config.max_len}")
            h = T.add(h, sinusoidal_positions(t_out, self.config.d_model))
            mask = length_mask(out_lens, t_out)[:, None, :]
            for layer in self.layers:
                h = layer(h, mask)
            h = self.norm(h)
        return h, out_lens


class RilmDecoder(Module):
    def __init__(self, config: RilmDecoderConfig, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "config", config)
        c = config
        self.ilm = TransformerLM(c.lm_config(), rng)
        self.bridge = Linear(c.vocab_size, c.d_model, rng)
        self.layers = ModuleList([CrossAttentionLayer(c.d_model, c.n_heads, c.d_ff, rng) for _ in range(c.n_cross_layers)])
        self.norm = LayerNorm(c.d_model)
        self.out = Linear(c.d_model, c.vocab_size, rng)
        object.__setattr__(self, "_pe", sinusoidal_positions(c.max_len, c.d_model))

    def __call__(self, ids, memory: Tensor, memory_lengths=None) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(logits, logits_A, logits_L)``, each (B, L, V)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if memory.shape[-1] != self.config.d_model:
            raise T.ShapeError(f"decoder: encoder state dim {memory.shape[-1]} != d_model {self.config.d_model}")
        if memory.shape[0] not in (1, ids.shape[0]):
            raise T.ShapeError(f"decoder: batch {ids.shape[0]} vs encoder batch {memory.shape[0]}")
        length = ids.shape[1]
        logits_l = self.ilm(ids)
        dist = T.softmax(logits_l) if self.config.bridge_input == "prob" else logits_l
        x = T.add(self.bridge(dist), self._pe[:length])
        self_mask = causal_mask(length)[None]
        t_mem = memory.shape[1]
        if memory_lengths is None:
            mem_mask = np.ones((ids.shape[0], 1, t_mem), dtype=bool)
        else:
            mem_mask = length_mask(memory_lengths, t_mem)[:, None, :]
        for layer in self.layers:
            x = layer(x, self_mask, memory, mem_mask)
        logits_a = self.out(self.norm(x))
        logits = T.add(logits_a, T.scale(logits_l, self.config.beta))
        return logits, logits_a, logits_l


class AsrModel(Module):
    def __init__(self, config: AsrConfig, rng: np.random.Generator, vocab: Vocab | None = None):
        super().__init__()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "vocab", vocab)
        if config.encoder.d_model != config.decoder.d_model:
            raise ConfigMismatchError("encoder and decoder d_model differ")
        self.encoder = Encoder(config.encoder, rng)
        self.ctc = Linear(config.encoder.d_model, config.decoder.vocab_size, rng)
        self.decoder = RilmDecoder(config.decoder, rng)

    @property
    def blank(self) -> int:
        return self.vocab.blank if self.vocab else 0

    @property
    def sos(self) -> int:
        return self.vocab.sos if self.vocab else 1

    @property
    def eos(self) -> int:
        return self.vocab.eos if self.vocab else 2

    def encode(self, feats, lengths=None):
        return self.encoder(feats, lengths)

    def ctc_logits(self, enc: Tensor) -> Tensor:
        return self.ctc(enc)

    def internal_lm_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith(ILM_PREFIX)}

    def trainable_parameters(self, freeze_internal_lm: bool) -> dict[str, Tensor]:
        return {
            n: p for n, p in self.named_parameters() if not (freeze_internal_lm and n.startswith(ILM_PREFIX))
        }

    def load_internal_lm(self, lm: TransformerLM) -> None:
        check_lm_compatible(self.config.decoder.lm_config(), self.vocab, lm.config, lm.vocab)
        self.decoder.ilm.load_state_dict(lm.state_dict())

    def to_checkpoint(self) -> Checkpoint:
        cfg = self.config.to_dict()
        cfg["vocab"] = list(self.vocab.tokens) if self.vocab else None
        return Checkpoint("asr", cfg, self.state_dict())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AsrModel":
        if ckpt.model_kind != "asr":
            raise ValueError(f"expected an asr checkpoint, got model_kind={ckpt.model_kind!r}")
        vocab = Vocab(tuple(ckpt.config["vocab"])) if ckpt.config.get("vocab") else None
        model = cls(AsrConfig.from_dict(ckpt.config), np.random.default_rng(0), vocab)
        model.load_state_dict(ckpt.tensors)
        return model


_LM_STRUCTURAL = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size")


def check_lm_compatible(expected: TransformerLmConfig, expected_vocab, got: TransformerLmConfig, got_vocab) -> None:
    """Raise naming the first config field or vocab token that differs."""
    for name in _LM_STRUCTURAL:
        a, b = getattr(expected, name), getattr(got, name)
        if a != b:
            raise ConfigMismatchError(f"internal LM config mismatch: {name} decoder={a} lm={b}")
    if expected_vocab is not None and got_vocab is not None:
        for i, (a, b) in enumerate(zip(expected_vocab.tokens, got_vocab.tokens)):
            if a != b:
                raise ConfigMismatchError(f"vocab mismatch at id {i}: decoder={a!r} lm={b!r}")
        if len(expected_vocab) != len(got_vocab):
            raise ConfigMismatchError(f"vocab size mismatch: decoder={len(expected_vocab)} lm={len(got_vocab)}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pad_features(feats) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    out = np.zeros((len(feats), int(lengths.max()), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths


def hybrid_loss_terms(model: AsrModel, feats, transcripts, utt_ids=None, need_ctc=True, need_att=True):
    """Batch-mean CTC NLL and decoder cross-entropy (each summed per utterance)."""
    x, lengths = pad_features([np.asarray(f, dtype=np.float64) for f in feats])
    enc, enc_lens = model.encode(x, lengths)
    n = len(transcripts)
    out = {}
    if need_ctc:
        for i, lab in enumerate(transcripts):
            if required_frames(lab) > enc_lens[i]:
                name = utt_ids[i] if utt_ids is not None else f"#{i}"
                raise CtcInfeasibleError(
                    f"utterance {name}: {enc_lens[i]} encoder frames < {required_frames(lab)} needed by CTC"
                )
        logp = T.log_softmax(model.ctc_logits(enc))
        out["ctc"] = T.scale(T.tsum(ctc_nll(logp, enc_lens, transcripts, model.blank)), 1.0 / n)
    if need_att:
        inputs, targets = make_lm_batch(transcripts, model.sos, model.eos)
        logits, _, _ = model.decoder(inputs, enc, enc_lens)
        out["att"] = T.scale(cross_entropy(logits, targets, ignore_index=PAD), 1.0 / n)
    return out


def hybrid_loss(model: AsrModel, feats, transcripts, ctc_weight: float | None = None, utt_ids=None) -> Tensor:
    """``w * L_ctc + (1 - w) * L_ce`` averaged over the batch."""
    w = model.config.ctc_weight if ctc_weight is None else ctc_weight
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"ctc_weight must lie in [0, 1], got {w}")
    terms = hybrid_loss_terms(model, feats, transcripts, utt_ids, need_ctc=w > 0, need_att=w < 1)
    if w == 1.0:
        return terms["ctc"]
    if w == 0.0:
        return terms["att"]
    return T.add(T.scale(terms["ctc"], w), T.scale(terms["att"], 1.0 - w))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def asr_train(
    model: AsrModel,
    corpus,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    freeze_internal_lm: bool = True,
    average_last: int = 10,
    warmup_steps: int = 0,
    snapshot_dir=None,
):
    """Train on ``corpus`` = list of (utt_id, features, token ids).

    Utterances too short for their CTC label are skipped with a warning.
    Returns the model whose parameters are the average of the last
    ``average_last`` epoch snapshots, plus the per-epoch mean loss.
    """
    kept = []
    for utt_id, feats, ids in corpus:
        if required_frames(ids) > model.encoder.output_lengths([len(feats)])[0]:
            logger.warning("skipping %s: too few frames for its CTC label", utt_id)
            continue
        kept.append((utt_id, np.asarray(feats, dtype=np.float64), list(ids)))
    if not kept:
        raise ValueError("asr_train: no usable utterances")
    rng = np.random.default_rng(seed)
    params = model.trainable_parameters(freeze_internal_lm)
    for name, p in model.named_parameters():
        p.requires_grad = name in params
    opt = Adam(params, lr=lr, warmup_steps=warmup_steps)
    snapshots: list[Checkpoint] = []
    log = []
    try:
        for epoch in range(epochs):
            total, batches = 0.0, 0
            for idx in batch_order(len(kept), batch_size, rng):
                batch = [kept[i] for i in idx]
                loss = hybrid_loss(model, [b[1] for b in batch], [b[2] for b in batch], utt_ids=[b[0] for b in batch])
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item()
                batches += 1
            log.append(total / batches)
            logger.info("asr epoch %d: loss %.4f", epoch + 1, log[-1])
            ckpt = model.to_checkpoint()
            if snapshot_dir is not None:
                save_checkpoint(ckpt, Path(snapshot_dir) / f"epoch{epoch + 1:03d}.ckpt")
            snapshots.append(ckpt)
            snapshots = snapshots[-max(1, average_last) :]
    finally:
        for p in model.parameters():
            p.requires_grad = True
    if snapshots and average_last > 1:
        model.load_state_dict(average_checkpoints(snapshots).tensors)
    return model, log


# ---------------------------------------------------------------------------
# internal-LM replacement
# ---------------------------------------------------------------------------

def replace_internal_lm(asr: Checkpoint, lm: Checkpoint) -> Checkpoint:
    """Overwrite every ``decoder.ilm.*`` tensor of ``asr`` with ``lm``'s tensors."""
    if asr.model_kind != "asr" or lm.model_kind != "lm":
        raise ValueError(f"replace_internal_lm: expected (asr, lm) checkpoints, got ({asr.model_kind}, {lm.model_kind})")
    expected = RilmDecoderConfig(**asr.config["decoder"]).lm_config()
    got = TransformerLmConfig(**lm.config["lm"])
    vocab_a = Vocab(tuple(asr.config["vocab"])) if asr.config.get("vocab") else None
    vocab_l = Vocab(tuple(lm.config["vocab"])) if lm.config.get("vocab") else None
    check_lm_compatible(expected, vocab_a, got, vocab_l)
    tensors = OrderedDict()
    for name, arr in asr.tensors.items():
        if name.startswith(ILM_PREFIX):
            key = name[len(ILM_PREFIX) :]
            if key not in lm.tensors:
                raise ConfigMismatchError(f"LM checkpoint lacks tensor {key!r}")
            src = lm.tensors[key]
            if src.shape != arr.shape:
                raise ConfigMismatchError(f"tensor {key!r}: lm shape {src.shape} vs decoder {arr.shape}")
            tensors[name] = src.copy()
        else:
            tensors[name] = arr
    extra = set(lm.tensors) - {n[len(ILM_PREFIX) :] for n in asr.tensors if n.startswith(ILM_PREFIX)}
    if extra:
        raise ConfigMismatchError(f"LM checkpoint has tensors unknown to the decoder: {sorted(extra)[:3]}")
    return Checkpoint(asr.model_kind, asr.config, tensors)


def swap_internal_lm_file(asr_path, lm_path, out_path) -> None:
    """File-to-file swap; nothing is written when validation fails."""
    new = replace_internal_lm(load_checkpoint(asr_path), load_checkpoint(lm_path))
    save_checkpoint(new, out_path)


def init_asr_model(config: AsrConfig, vocab: Vocab, seed: int, lm: TransformerLM | None = None) -> AsrModel:
    model = AsrModel(config, np.random.default_rng(seed), vocab)
    if lm is not None:
        model.load_internal_lm(lm)
    return model


def ctc_frames_ok(n_frames: int, label, stack: int) -> bool:
    return required_frames(label) <= math.ceil(n_frames / stack)
