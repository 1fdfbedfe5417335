"""Word-internal byte-pair encoding and vocabulary handling.

Id layout: ``<blank>`` is id 0 (CTC blank), followed by the three non-verbal
symbols ``<sos>``, ``<eos>``, ``<unk>``, then the base alphabet, then merged
units in merge order. Base symbols are the characters of the training text
plus the end-of-word marker ``</w>``; merges never cross a word boundary.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

BLANK, SOS, EOS, UNK = "<blank>", "<sos>", "<eos>", "<unk>"
SPECIALS = (BLANK, SOS, EOS, UNK)
# <blank> is reserved for CTC and is not counted with the text symbols
N_TEXT_SPECIALS = 3
EOW = "</w>"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise TokenizerError(f"vocab must start with {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise TokenizerError("vocab contains duplicate tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    blank = 0
    sos = 1
    eos = 2
    unk = 3

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self._index[token]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_to_token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise TokenizerError(f"token id {i} out of range [0, {len(self.tokens)})")
        return self.tokens[i]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for sym, freq in words.items():
        for a, b in zip(sym, sym[1:]):
            counts[(a, b)] += freq
    return counts


def _merge_word(sym: tuple[str, ...], pair: tuple[str, str], new: str) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(sym):
        if i + 1 < len(sym) and sym[i] == pair[0] and sym[i + 1] == pair[1]:
            out.append(new)
            i += 2
        else:
            out.append(sym[i])
            i += 1
    return tuple(out)


class BpeModel:
    def __init__(self, base: list[str], merges: list[tuple[str, str, str]]):
        self.base = list(base)
        self.merges = list(merges)
        self.vocab = Vocab(SPECIALS + tuple(self.base) + tuple(m[2] for m in self.merges))
        self._rank = {(a, b): r for r, (a, b, _) in enumerate(self.merges)}
        self._new = {(a, b): n for a, b, n in self.merges}
        self._base_set = set(self.base)
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def target_size(self) -> int:
        return N_TEXT_SPECIALS + len(self.base) + len(self.merges)

    def _encode_word(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        sym = tuple(c if c in self._base_set else UNK for c in word) + (EOW,)
        while len(sym) > 1:
            ranked = [(self._rank[p], p) for p in zip(sym, sym[1:]) if p in self._rank]
            if not ranked:
                break
            _, best = min(ranked)
            sym = _merge_word(sym, best, self._new[best])
        self._cache[word] = sym
        return sym

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self.vocab[s] for s in self._encode_word(word))
        return ids

    def decode(self, ids) -> str:
        pieces = []
        for i in ids:
            tok = self.vocab.id_to_token(int(i))
            if tok in SPECIALS:
                continue
            pieces.append(tok)
        return " ".join(w for w in "".join(pieces).replace(EOW, " ").split())

    def save(self, path) -> None:
        lines = [f"bpe v1 {len(self.base)} {len(self.merges)}"]
        lines += [f"{a}\t{b}\t{n}" for a, b, n in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, model_path, vocab_path) -> "BpeModel":
        lines = Path(model_path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[:2] != ["bpe", "v1"]:
            raise TokenizerError(f"{model_path}: bad BPE header {lines[:1]}")
        n_base, n_merges = int(head[2]), int(head[3])
        merges = [tuple(line.split("\t")) for line in lines[1 : 1 + n_merges]]
        if len(merges) != n_merges or any(len(m) != 3 for m in merges):
            raise TokenizerError(f"{model_path}: expected {n_merges} merge lines")
        vocab = Vocab.load(vocab_path)
        base = list(vocab.tokens[len(SPECIALS) : len(SPECIALS) + n_base])
        model = cls(base, merges)
        if model.vocab.tokens != vocab.tokens:
            raise TokenizerError(f"{vocab_path}: vocab does not match BPE merges in {model_path}")
        return model


def bpe_train(corpus, target_size: int) -> BpeModel:
    """Greedy BPE: merge the most frequent adjacent pair until ``target_size``.

    ``target_size`` counts the three non-verbal symbols and every BPE unit
    (base symbols + merges) but not the CTC blank. Ties go to the
    lexicographically smallest pair. Training stops early once no pair
    occurs more than once.
    """
    lines = list(corpus)
    words: Counter = Counter(w for line in lines for w in line.split())
    if not words:
        raise TokenizerError("bpe_train: empty corpus")
    base = sorted({c for w in words for c in w}) + [EOW]
    if target_size < N_TEXT_SPECIALS + len(base):
        raise TokenizerError(
            f"bpe_train: target size {target_size} < specials + base alphabet ({N_TEXT_SPECIALS + len(base)})"
        )
    state = {tuple(w) + (EOW,): f for w, f in words.items()}
    known = set(base) | set(SPECIALS)
    merges: list[tuple[str, str, str]] = []
    blocked: set[tuple[str, str]] = set()
    while N_TEXT_SPECIALS + len(base) + len(merges) < target_size:
        counts = _pair_counts(state)
        for p in blocked:
            counts.pop(p, None)
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        new = pair[0] + pair[1]
        if new in known:
            # same string reachable through another merge path; ids must stay unique
            blocked.add(pair)
            continue
        known.add(new)
        merges.append((pair[0], pair[1], new))
        merged: dict[tuple[str, ...], int] = {}
        for s, f in state.items():
            key = _merge_word(s, pair, new)
            merged[key] = merged.get(key, 0) + f
        state = merged
    return BpeModel(base, merges)
