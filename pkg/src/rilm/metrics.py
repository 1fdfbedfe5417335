"""Word error rate with an explicit minimal-edit alignment."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.n_ref

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.n_ref + other.n_ref,
        )

    def format(self) -> str:
        return (
            f"WER {self.wer:.2f}% [S={self.substitutions} D={self.deletions} "
            f"I={self.insertions} / N={self.n_ref}]"
        )


def align(ref, hyp) -> list[tuple[str, object, object]]:
    """Levenshtein alignment as (op, ref_token, hyp_token) with op in
    {"ok", "sub", "ins", "del"}; ties prefer sub, then ins, then del."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i][j - 1] + 1, d[i - 1][j] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("ok" if ref[i - 1] == hyp[j - 1] else "sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j and d[i][j] == d[i][j - 1] + 1:
            ops.append(("ins", None, hyp[j - 1]))
            j -= 1
        else:
            ops.append(("del", ref[i - 1], None))
            i -= 1
    return ops[::-1]


def wer(ref, hyp) -> WerReport:
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("wer: empty reference")
    ops = [op for op, _, _ in align(ref, hyp)]
    return WerReport(ops.count("sub"), ops.count("del"), ops.count("ins"), len(ref))


def score_corpus(refs: dict[str, str], hyps: dict[str, str]) -> WerReport:
    """Pooled WER over utterances (errors summed before dividing)."""
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise ValueError(f"utterance id mismatch: missing={missing[:5]} extra={extra[:5]}")
    total = WerReport(0, 0, 0, 0)
    for uid in sorted(refs):
        total = total + wer(refs[uid].split(), hyps[uid].split())
    return total


def read_nbest(path) -> dict[str, str]:
    """Rank-1 transcripts from an ``utt_id<TAB>rank<TAB>score<TAB>text`` file."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        if int(parts[1]) == 1:
            out[parts[0]] = parts[3]
    return out


def read_hypotheses(path) -> dict[str, str]:
    """Accept either an n-best file or an ``utt_id<TAB>text`` manifest."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l]
    if lines and len(lines[0].split("\t")) == 4:
        return read_nbest(path)
    out = {}
    for line in lines:
        uid, _, text = line.partition("\t")
        out[uid] = text
    return out
