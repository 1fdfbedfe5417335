"""Synthetic paired corpora with label-prior shift and shared acoustics.

Transcripts come from a per-domain character bigram chain. Every symbol
(letters and the word boundary ``" "``) owns a prototype feature vector;
an utterance renders each symbol as a few noisy copies of its prototype,
plus one boundary segment after the last word. The prototype table is
built from the global seed only, so source and target domains share the
acoustic model exactly and differ only in their transcript statistics.

A few letter pairs have prototypes that sit close together. By default
these letters are rare in source text, where one letter of each pair
dominates, and common and balanced in target text. Ambiguous frames are
then resolved differently under the two priors, while source text seldom
contains them.
"""

from __future__ import annotations

import string
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOUNDARY = " "
FEAT_MAGIC = b"RILMFEAT"
FEAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticDomainSpec:
    name: str
    alphabet: tuple[str, ...]
    initial: np.ndarray
    transitions: np.ndarray
    prototypes: np.ndarray
    length_range: tuple[int, int] = (2, 4)
    frames_per_token: tuple[int, int] = (1, 3)
    noise: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        a = len(self.alphabet)
        if self.transitions.shape != (a, a):
            raise ValueError(f"{self.name}: transition matrix shape {self.transitions.shape} != ({a}, {a})")
        if (self.transitions < 0).any() or not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-9):
            bad = int(np.argmax(np.abs(self.transitions.sum(axis=1) - 1.0)))
            raise ValueError(f"{self.name}: transition row {bad} is not a probability distribution")
        if self.initial.shape != (a,) or (self.initial < 0).any() or abs(self.initial.sum() - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: initial distribution is not a probability vector")
        if self.prototypes.shape[0] != a:
            raise ValueError(f"{self.name}: {self.prototypes.shape[0]} prototypes for {a} symbols")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"{self.name}: bad length range {self.length_range}")
        flo, fhi = self.frames_per_token
        if not 1 <= flo <= fhi:
            raise ValueError(f"{self.name}: bad frames-per-token range {self.frames_per_token}")

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class UttRecord:
    utt_id: str
    features: np.ndarray  # (frames, dim) float32
    transcript: str


def letter_pairs(alphabet) -> list[tuple[int, int]]:
    """Consecutive letters (ids ``2i``, ``2i+1`` among non-boundary symbols)."""
    letters = [i for i, s in enumerate(alphabet) if s != BOUNDARY]
    return [(letters[j], letters[j + 1]) for j in range(0, len(letters) - 1, 2)]


def make_prototypes(alphabet, dim: int, confusion: float, n_confusable: int, seed: int) -> np.ndarray:
    """Symbol prototypes drawn from N(0, I).

    The first ``n_confusable`` letter pairs share a centre and sit
    ``confusion`` apart; every other symbol gets its own centre.
    """
    rng = np.random.default_rng([seed, 1])
    protos = rng.normal(0.0, 1.0, (len(alphabet), dim))
    for a, b in letter_pairs(alphabet)[:n_confusable]:
        u = rng.normal(0.0, 1.0, dim)
        u /= np.linalg.norm(u)
        protos[b] = protos[a] + confusion * u
    return protos


def make_bigram(alphabet, seed: int, domain_seed: int, tilt: float, shift: float, n_tilted: int,
                sharpness: float = 1.5, boundary_prob: float = 0.2, pair_bias: float = 0.0) -> np.ndarray:
    """Row-stochastic bigram matrix for one domain.

    Successor logits mix a structure shared by all domains with a
    domain-specific part (weight ``shift``) and add ``pair_bias + tilt`` /
    ``pair_bias - tilt`` to the two letters of each of the first ``n_tilted``
    pairs. ``pair_bias`` sets how common the confusable letters are overall,
    ``tilt`` which one of each pair wins.
    """
    a = len(alphabet)
    shared = np.random.default_rng([seed, 2]).normal(size=(a, a))
    own = np.random.default_rng([seed, 3, domain_seed]).normal(size=(a, a))
    logits = sharpness * (np.sqrt(1.0 - shift) * shared + np.sqrt(shift) * own)
    for i, j in letter_pairs(alphabet)[:n_tilted]:
        logits[:, i] += pair_bias + tilt
        logits[:, j] += pair_bias - tilt
    # A doubled symbol renders as one longer segment and cannot be told
    # apart acoustically, so no symbol may follow itself.
    np.fill_diagonal(logits, -np.inf)
    if BOUNDARY not in alphabet:
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    # Letter successors share 1 - boundary_prob.
    space = alphabet.index(BOUNDARY)
    logits[:, space] = -np.inf
    logits[space, space] = -np.inf
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    trans = e / e.sum(axis=1, keepdims=True)
    letter_rows = np.arange(a) != space
    trans[letter_rows] *= 1.0 - boundary_prob
    trans[letter_rows, space] = boundary_prob
    return trans


def stationary(trans: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(trans.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def make_domains(
    seed: int = 0,
    dim: int = 16,
    noise: float = 0.3,
    confusion: float = 0.6,
    confusable_pairs: int = 6,
    source_tilt: float = 1.1,
    target_tilt: float = 0.0,
    shift: float = 0.0,
    source_pair_bias: float = -2.5,
    target_pair_bias: float = 0.0,
    sharpness: float = 1.0,
    length_range=(2, 4),
    frames_per_token=(1, 3),
    alphabet: str = string.ascii_lowercase + BOUNDARY,
) -> tuple[SyntheticDomainSpec, SyntheticDomainSpec]:
    """Source and target specs sharing one prototype table.

    The domains differ in how common the confusable letters are, how strongly
    each pair is tilted, and in a ``shift``-weighted domain-specific part of
    the bigram logits (off by default). ``sharpness`` scales the shared bigram
    logits; lower values give higher-entropy text.
    """
    symbols = tuple(alphabet)
    protos = make_prototypes(symbols, dim, confusion, confusable_pairs, seed)
    specs = []
    domains = (("source", 0, source_tilt, source_pair_bias), ("target", 1, target_tilt, target_pair_bias))
    for name, domain_seed, tilt, bias in domains:
        trans = make_bigram(symbols, seed, domain_seed, tilt, shift, confusable_pairs, sharpness, pair_bias=bias)
        # utterances start where a word boundary would hand over
        init = trans[symbols.index(BOUNDARY)].copy() if BOUNDARY in symbols else stationary(trans)
        specs.append(
            SyntheticDomainSpec(
                name=name,
                alphabet=symbols,
                initial=init,
                transitions=trans,
                prototypes=protos,
                length_range=tuple(length_range),
                frames_per_token=tuple(frames_per_token),
                noise=noise,
                seed=seed * 1000 + domain_seed,
            )
        )
    return specs[0], specs[1]


def sample_transcript(spec: SyntheticDomainSpec, rng: np.random.Generator) -> str:
    """Run the chain for a sampled number of words (boundary-to-boundary).

    With a boundary symbol the length range counts words; each utterance is
    a renewal cycle of the chain, so the rendered symbol stream (transcript
    plus its closing boundary) is unbiased for the stationary unigram.
    Without a boundary symbol the range counts characters.
    """
    lo, hi = spec.length_range
    n = int(rng.integers(lo, hi + 1))
    a = len(spec.alphabet)
    space = spec.alphabet.index(BOUNDARY) if BOUNDARY in spec.alphabet else None
    out = [int(rng.choice(a, p=spec.initial))]
    words = 0
    while True:
        nxt = int(rng.choice(a, p=spec.transitions[out[-1]]))
        if space is None:
            if len(out) == n:
                break
        elif nxt == space:
            words += 1
            if words == n:
                break
        out.append(nxt)
    return "".join(spec.alphabet[i] for i in out)


def render(spec: SyntheticDomainSpec, transcript: str, rng: np.random.Generator) -> np.ndarray:
    index = {s: i for i, s in enumerate(spec.alphabet)}
    flo, fhi = spec.frames_per_token
    rows = []
    closing = BOUNDARY if BOUNDARY in index else ""
    for ch in transcript + closing:
        proto = spec.prototypes[index[ch]]
        n = int(rng.integers(flo, fhi + 1))
        rows.append(proto[None, :] + spec.noise * rng.normal(size=(n, spec.dim)))
    return np.concatenate(rows, axis=0).astype(np.float32)


def gen_domain_corpus(spec: SyntheticDomainSpec, n_utts: int, split: str = "train") -> list[UttRecord]:
    """``n_utts`` utterances; utterance ``i`` uses its own derived seed."""
    spec.validate()
    split_key = sum(ord(c) * 31**k for k, c in enumerate(split)) % (2**31)
    records = []
    for i in range(n_utts):
        rng = np.random.default_rng([spec.seed, split_key, i])
        text = sample_transcript(spec, rng)
        records.append(UttRecord(f"{spec.name}-{split}-{i:05d}", render(spec, text, rng), text))
    return records


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_features(path, records) -> None:
    parts = [FEAT_MAGIC, struct.pack("<II", FEAT_VERSION, len(records))]
    for r in records:
        uid = r.utt_id.encode("utf-8")
        feats = np.ascontiguousarray(r.features, dtype="<f4")
        parts.append(struct.pack("<I", len(uid)) + uid + struct.pack("<II", *feats.shape))
        parts.append(feats.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    pos, out = 16, {}
    for _ in range(n):
        (ulen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        uid = raw[pos : pos + ulen].decode("utf-8")
        pos += ulen
        frames, dim = struct.unpack_from("<II", raw, pos)
        pos += 8
        nbytes = frames * dim * 4
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload for {uid}")
        out[uid] = np.frombuffer(raw, dtype="<f4", count=frames * dim, offset=pos).reshape(frames, dim).astype(np.float32)
        pos += nbytes
    return out


def write_transcripts(path, records) -> None:
    Path(path).write_text("".join(f"{r.utt_id}\t{r.transcript}\n" for r in records), encoding="utf-8")


def read_transcripts(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        uid, sep, text = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected utt_id<TAB>transcript")
        if uid in out:
            raise ValueError(f"{path}:{lineno}: duplicate utterance id {uid}")
        out[uid] = text
    return out


def read_text_corpus(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines()]


def load_split(feat_path, text_path) -> list[UttRecord]:
    feats = read_features(feat_path)
    texts = read_transcripts(text_path)
    if set(feats) != set(texts):
        missing = sorted(set(feats) ^ set(texts))
        raise ValueError(f"feature/transcript id mismatch, e.g. {missing[:3]}")
    return [UttRecord(uid, feats[uid], texts[uid]) for uid in texts]
