"""End-to-end pipeline driver producing the ablation WER table.

Runs every stage through the CLI entry point so that the artifacts on disk
are exactly what ``rilm`` subcommands would produce::

    python -m rilm.experiment --out-dir runs --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path

from rilm import cli

# (name, dev domain, decode flags); "{w}" expands to the run directory
SYSTEMS: tuple[tuple[str, str, tuple[str, ...]], ...] = (
    ("ctc_greedy", "target", ("--mode", "ctc-greedy")),
    ("ctc_greedy+rsoftmax", "target", ("--mode", "ctc-greedy", "--r-softmax", "{w}/source.freqs", "{w}/target.freqs")),
    ("hybrid", "target", ()),
    ("hybrid+swap", "target", ("--asr", "{w}/asr_target_ilm.ckpt")),
    ("hybrid+rsoftmax", "target", ("--r-softmax", "{w}/source.freqs", "{w}/target.freqs")),
    ("hybrid+swap+rsoftmax", "target",
     ("--replace-ilm", "{w}/target_lm.ckpt", "--r-softmax", "{w}/source.freqs", "{w}/target.freqs")),
    ("hybrid+shallow_fusion", "target", ("--fusion", "shallow", "--target-lm", "{w}/target_lm.ckpt")),
    ("hybrid+density_ratio", "target",
     ("--fusion", "density_ratio", "--target-lm", "{w}/target_lm.ckpt", "--source-lm", "{w}/source_lm.ckpt")),
    ("ctc_greedy", "source", ("--mode", "ctc-greedy")),
    ("hybrid", "source", ()),
    ("hybrid+swap+rsoftmax", "source",
     ("--replace-ilm", "{w}/target_lm.ckpt", "--r-softmax", "{w}/source.freqs", "{w}/target.freqs")),
)


@dataclass(frozen=True)
class Row:
    system: str
    domain: str
    wer: float
    line: str


class PipelineError(RuntimeError):
    pass


def _run(argv: list[str]) -> None:
    code = cli.main(argv)
    if code != 0:
        raise PipelineError(f"rilm {' '.join(argv)} exited with {code}")


def run_pipeline(work_dir, seed: int, config=None, overrides=(), systems=SYSTEMS) -> list[Row]:
    """Train everything for one seed under ``work_dir`` and score each system."""
    w = Path(work_dir)
    w.mkdir(parents=True, exist_ok=True)
    common = ["--seed", str(seed), "--quiet"]
    if config is not None:
        common += ["--config", str(config)]
    for kv in overrides:
        common += ["--set", kv]

    _run(["gen-data", "--out-dir", str(w), *common])
    _run(["bpe-train", "--text", f"{w}/source_train.txt", "--out", f"{w}/bpe", *common])
    _run(["lm-train", "--text", f"{w}/source_train.txt", "--bpe", f"{w}/bpe", "--out", f"{w}/source_lm.ckpt", *common])
    _run(["lm-finetune", "--lm", f"{w}/source_lm.ckpt", "--text", f"{w}/target_train.txt", "--bpe", f"{w}/bpe",
          "--out", f"{w}/target_lm.ckpt", *common])
    _run(["asr-train", "--feats", f"{w}/source_train.feats", "--text", f"{w}/source_train.txt", "--bpe", f"{w}/bpe",
          "--lm", f"{w}/source_lm.ckpt", "--out", f"{w}/asr.ckpt", *common])
    _run(["swap-ilm", "--asr", f"{w}/asr.ckpt", "--lm", f"{w}/target_lm.ckpt", "--out", f"{w}/asr_target_ilm.ckpt", *common])
    for domain in ("source", "target"):
        _run(["count-freqs", "--text", f"{w}/{domain}_train.txt", "--bpe", f"{w}/bpe",
              "--out", f"{w}/{domain}.freqs", *common])

    rows = []
    (w / "decode").mkdir(exist_ok=True)
    for name, domain, flags in systems:
        flags = [f.format(w=w) for f in flags]
        tag = f"{domain}_dev.{name}"
        argv = ["decode", "--asr", f"{w}/asr.ckpt", "--feats", f"{w}/{domain}_dev.feats", "--bpe", f"{w}/bpe",
                "--out", f"{w}/decode/{tag}.nbest", *common]
        # a later --asr overrides the default one
        _run(argv + flags)
        _run(["score", "--ref", f"{w}/{domain}_dev.txt", "--hyp", f"{w}/decode/{tag}.nbest",
              "--out", f"{w}/decode/{tag}.wer", *common])
        line = (w / "decode" / f"{tag}.wer").read_text(encoding="utf-8").strip()
        rows.append(Row(name, domain, float(line.split()[1].rstrip("%")), line))
    write_table(rows, w / "wer_table.tsv")
    return rows


def write_table(rows: list[Row], path) -> None:
    lines = ["system\tdomain\twer\treport\n"] + [f"{r.system}\t{r.domain}\t{r.wer:.2f}\t{r.line}\n" for r in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


def lookup(rows: list[Row], system: str, domain: str) -> float:
    for r in rows:
        if r.system == system and r.domain == domain:
            return r.wer
    raise KeyError(f"no result for {system} on {domain}")


def mean_table(per_seed: dict[int, list[Row]]) -> dict[tuple[str, str], float]:
    keys = [(r.system, r.domain) for r in next(iter(per_seed.values()))]
    return {k: sum(lookup(rows, *k) for rows in per_seed.values()) / len(per_seed) for k in keys}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="run the full pipeline and print the WER table")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    per_seed = {s: run_pipeline(Path(args.out_dir) / f"seed{s}", s, args.config, args.set) for s in args.seeds}
    means = mean_table(per_seed)
    print(f"{'system':28s} {'dev':7s} " + " ".join(f"seed{s:<3d}" for s in args.seeds) + "   mean")
    for (system, domain), m in means.items():
        cells = " ".join(f"{lookup(per_seed[s], system, domain):7.2f}" for s in args.seeds)
        print(f"{system:28s} {domain:7s} {cells} {m:7.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
