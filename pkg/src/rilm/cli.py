"""``rilm`` command-line interface.

Each subcommand reads and validates all of its inputs before writing
anything, writes an effective-config log next to its main output, and
exits nonzero with a one-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rilm.adapt import count_tokens, ratio_from_files, read_counts, write_counts
from rilm.asr import (
    AsrModel,
    ConfigMismatchError,
    asr_train,
    init_asr_model,
    replace_internal_lm,
)
from rilm.config import ConfigError, RunConfig
from rilm.corpus import (
    gen_domain_corpus,
    load_split,
    read_features,
    read_text_corpus,
    read_transcripts,
    write_features,
    write_transcripts,
)
from rilm.ctc import CtcInfeasibleError
from rilm.decoding import (
    ctc_greedy_decode,
    ctc_posteriors_for,
    ctc_prefix_beam_search,
    hybrid_joint_decode,
)
from rilm.lm import TransformerLM, lm_finetune, lm_train
from rilm.metrics import read_hypotheses, score_corpus
from rilm.nn import CheckpointError, load_checkpoint, save_checkpoint
from rilm.tokenizer import BpeModel, TokenizerError, bpe_train

logger = logging.getLogger("rilm")

DECODE_MODES = ("hybrid", "attention", "ctc-greedy", "ctc-prefix")


class VocabMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _need(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"{p} does not exist")


def _load_bpe(prefix) -> BpeModel:
    model, vocab = f"{prefix}.model", f"{prefix}.vocab"
    _need(model, vocab)
    return BpeModel.load(model, vocab)


def _texts(paths) -> list[str]:
    """Transcripts from manifests (``utt_id<TAB>text``) or plain one-per-line text."""
    _need(*paths)
    out = []
    for p in paths:
        lines = [l for l in Path(p).read_text(encoding="utf-8").splitlines() if l.strip()]
        if lines and all("\t" in l for l in lines):
            out.extend(read_transcripts(p).values())
        else:
            out.extend(read_text_corpus(p))
    return out


def _check_vocab(what: str, vocab, bpe: BpeModel) -> None:
    if vocab is None or vocab.tokens != bpe.vocab.tokens:
        raise VocabMismatchError(f"{what} was built with a different vocabulary than the BPE model")


def _load_lm(path, bpe: BpeModel | None = None) -> TransformerLM:
    _need(path)
    lm = TransformerLM.from_checkpoint(load_checkpoint(path))
    if bpe is not None:
        _check_vocab(f"LM {path}", lm.vocab, bpe)
    return lm


def _write_config_log(out_path, args, cfg: RunConfig) -> None:
    cmd = " ".join(f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in ("func", "set"))
    Path(f"{out_path}.config").write_text(f"# rilm {args.command}: {cmd}\n" + cfg.dump(), encoding="utf-8")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return RunConfig.load(args.config, overrides)


def _out(args, name: str) -> Path:
    path = Path(name) if args.out_dir is None else Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    source, target = cfg.domains(cfg["seed"])
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in (source, target):
        for split, n in (("train", cfg["data.n_train"]), ("dev", cfg["data.n_dev"])):
            records = gen_domain_corpus(spec, n, split)
            write_features(out_dir / f"{spec.name}_{split}.feats", records)
            write_transcripts(out_dir / f"{spec.name}_{split}.txt", records)
    _write_config_log(out_dir / "gen-data", args, cfg)


def cmd_bpe_train(args, cfg: RunConfig) -> None:
    texts = _texts(args.text)
    size = args.vocab_size or cfg["bpe.vocab_size"]
    model = bpe_train(texts, size)
    out = _out(args, args.out)
    model.save(f"{out}.model")
    model.vocab.save(f"{out}.vocab")
    _write_config_log(out, args, cfg)


def cmd_lm_train(args, cfg: RunConfig) -> None:
    bpe = _load_bpe(args.bpe)
    corpus = [bpe.encode(t) for t in _texts(args.text)]
    model, log = lm_train(
        corpus, cfg.lm_config(len(bpe.vocab)), args.epochs or cfg["lm.epochs"], bpe.vocab,
        lr=cfg["lm.lr"], batch_size=cfg["lm.batch_size"], seed=cfg["seed"],
    )
    out = _out(args, args.out)
    save_checkpoint(model.to_checkpoint(), out)
    _write_config_log(out, args, cfg)


def cmd_lm_finetune(args, cfg: RunConfig) -> None:
    bpe = _load_bpe(args.bpe)
    base = _load_lm(args.lm, bpe)
    corpus = [bpe.encode(t) for t in _texts(args.text)]
    model, log = lm_finetune(
        base, corpus, args.epochs or cfg["finetune.epochs"], bpe.vocab,
        lr=cfg["finetune.lr"], batch_size=cfg["lm.batch_size"], seed=cfg["seed"],
    )
    out = _out(args, args.out)
    save_checkpoint(model.to_checkpoint(), out)
    _write_config_log(out, args, cfg)


def cmd_asr_train(args, cfg: RunConfig) -> None:
    bpe = _load_bpe(args.bpe)
    _need(args.feats, args.text)
    records = load_split(args.feats, args.text)
    lm = _load_lm(args.lm, bpe) if args.lm else None
    dim = records[0].features.shape[1]
    model = init_asr_model(cfg.asr_config(len(bpe.vocab), dim), bpe.vocab, cfg["seed"], lm)
    corpus = [(r.utt_id, r.features, bpe.encode(r.transcript)) for r in records]
    model, log = asr_train(
        model, corpus, args.epochs or cfg["train.epochs"], lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"], seed=cfg["seed"], freeze_internal_lm=cfg["train.freeze_ilm"],
        average_last=cfg["train.average_last"], warmup_steps=cfg["train.warmup_steps"],
    )
    out = _out(args, args.out)
    save_checkpoint(model.to_checkpoint(), out)
    _write_config_log(out, args, cfg)


def cmd_swap_ilm(args, cfg: RunConfig) -> None:
    _need(args.asr, args.lm)
    new = replace_internal_lm(load_checkpoint(args.asr), load_checkpoint(args.lm))
    out = _out(args, args.out)
    save_checkpoint(new, out)
    _write_config_log(out, args, cfg)


def cmd_count_freqs(args, cfg: RunConfig) -> None:
    bpe = _load_bpe(args.bpe)
    counts = count_tokens([bpe.encode(t) for t in _texts(args.text)], bpe.vocab, count_eos=args.count_eos)
    out = _out(args, args.out)
    write_counts(counts, bpe.vocab, out)
    _write_config_log(out, args, cfg)


# -- decode ---------------------------------------------------------------

_WORKER: dict = {}


def _prepare_decoder(args, cfg: RunConfig) -> dict:
    bpe = _load_bpe(args.bpe)
    _need(args.asr)
    ckpt = load_checkpoint(args.asr)
    if args.replace_ilm:
        _need(args.replace_ilm)
        ckpt = replace_internal_lm(ckpt, load_checkpoint(args.replace_ilm))
    model = AsrModel.from_checkpoint(ckpt)
    _check_vocab(f"ASR model {args.asr}", model.vocab, bpe)
    ratio = None
    if args.r_softmax:
        _need(*args.r_softmax)
        ratio = ratio_from_files(args.r_softmax[0], args.r_softmax[1], bpe.vocab)
    overrides = {"r_softmax": ratio is not None}
    for flag, key in (
        ("beam", "beam"), ("ctc_weight", "ctc_weight"), ("fusion", "fusion"), ("lm_weight", "lm_weight"),
        ("target_lm_weight", "target_lm_weight"), ("source_lm_weight", "source_lm_weight"), ("nbest", "nbest"),
    ):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.mode == "attention":
        overrides["ctc_weight"] = 0.0
    dcfg = cfg.decode_config(**overrides)
    if args.mode == "hybrid" and dcfg.ctc_weight == 1.0 and dcfg.fusion != "none":
        raise ConfigError("fusion needs an attention term; ctc_weight=1 leaves none")
    target_lm = _load_lm(args.target_lm, bpe) if args.target_lm else None
    source_lm = _load_lm(args.source_lm, bpe) if args.source_lm else None
    if dcfg.fusion != "none" and target_lm is None:
        raise ConfigError(f"fusion={dcfg.fusion} needs --target-lm")
    if dcfg.fusion == "density_ratio" and source_lm is None:
        raise ConfigError("fusion=density_ratio needs --source-lm")
    return dict(model=model, bpe=bpe, ratio=ratio, dcfg=dcfg, mode=args.mode, target_lm=target_lm, source_lm=source_lm)


def _decode_one(state: dict, feats: np.ndarray) -> list[tuple[float, str]]:
    model, bpe, mode, dcfg = state["model"], state["bpe"], state["mode"], state["dcfg"]
    if mode in ("ctc-greedy", "ctc-prefix"):
        logp = ctc_posteriors_for(model, feats, state["ratio"])
        if mode == "ctc-greedy":
            best = logp.max(axis=1)
            return [(float(best.sum()), bpe.decode(ctc_greedy_decode(np.exp(logp), model.blank)))]
        hyps = ctc_prefix_beam_search(logp, dcfg.beam, model.blank, dcfg.nbest)
        return [(float(s), bpe.decode(labels)) for labels, s in hyps]
    res = hybrid_joint_decode(model, feats, dcfg, bpe, state["ratio"], state["target_lm"], state["source_lm"])
    return [(h.score, text) for h, text in zip(res.hyps, res.texts)]


def _worker_init(args, cfg_values):
    _WORKER.update(_prepare_decoder(args, RunConfig(cfg_values)))


def _worker_decode(item):
    return item[0], _decode_one(_WORKER, item[1])


def cmd_decode(args, cfg: RunConfig) -> None:
    state = _prepare_decoder(args, cfg)
    _need(args.feats)
    feats = read_features(args.feats)
    if not feats:
        raise ValueError(f"{args.feats} holds no utterances")
    items = sorted(feats.items())
    jobs = max(1, args.jobs or 1)
    if jobs == 1:
        results = [(uid, _decode_one(state, f)) for uid, f in items]
    else:
        with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(args, cfg.values)) as pool:
            results = list(pool.map(_worker_decode, items, chunksize=8))
    lines = []
    for uid, hyps in results:
        for rank, (score, text) in enumerate(hyps, 1):
            lines.append(f"{uid}\t{rank}\t{score!r}\t{text}\n")
    out = _out(args, args.out)
    out.write_text("".join(lines), encoding="utf-8")
    _write_config_log(out, args, cfg)


def cmd_score(args, cfg: RunConfig) -> None:
    _need(args.ref, args.hyp)
    refs = read_transcripts(args.ref)
    hyps = read_hypotheses(args.hyp)
    if args.unit == "char":
        refs = {k: " ".join(v.replace(" ", "_")) for k, v in refs.items()}
        hyps = {k: " ".join(v.replace(" ", "_")) for k, v in hyps.items()}
    report = score_corpus(refs, hyps)
    line = report.format() if args.unit == "word" else report.format().replace("WER", "CER", 1)
    print(line)
    if args.out:
        out = _out(args, args.out)
        out.write_text(line + "\n", encoding="utf-8")
        _write_config_log(out, args, cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", help="directory for outputs (relative --out paths land here)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for decode (default 1)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="rilm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic source/target corpora")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bpe-train", parents=[common], help="learn BPE merges from transcripts")
    p.add_argument("--text", nargs="+", required=True, help="transcript manifests")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", required=True, help="output prefix (.model and .vocab)")
    p.set_defaults(func=cmd_bpe_train)

    p = sub.add_parser("lm-train", parents=[common], help="train a Transformer LM")
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--bpe", required=True, help="BPE prefix")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("lm-finetune", parents=[common], help="fine-tune an LM on new text")
    p.add_argument("--lm", required=True)
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_finetune)

    p = sub.add_parser("asr-train", parents=[common], help="train the hybrid CTC/attention model")
    p.add_argument("--feats", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--lm", help="LM checkpoint that initialises the internal LM")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_asr_train)

    p = sub.add_parser("swap-ilm", parents=[common], help="replace the decoder's internal LM")
    p.add_argument("--asr", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap_ilm)

    p = sub.add_parser("count-freqs", parents=[common], help="token counts for prior estimation")
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--count-eos", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_count_freqs)

    p = sub.add_parser("decode", parents=[common], help="decode a feature file to an n-best list")
    p.add_argument("--asr", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=DECODE_MODES, default="hybrid")
    p.add_argument("--replace-ilm", metavar="LM_CKPT")
    p.add_argument("--r-softmax", nargs=2, metavar=("SRC_FREQS", "TGT_FREQS"))
    p.add_argument("--ctc-weight", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--nbest", type=int)
    p.add_argument("--fusion", choices=("none", "shallow", "density_ratio"))
    p.add_argument("--target-lm")
    p.add_argument("--source-lm")
    p.add_argument("--lm-weight", type=float)
    p.add_argument("--target-lm-weight", type=float)
    p.add_argument("--source-lm-weight", type=float)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", parents=[common], help="corpus WER of hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--unit", choices=("word", "char"), default="word")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)
    return parser


_PREFIXES = (
    (FileNotFoundError, "missing file"),
    (ConfigError, "config error"),
    ((VocabMismatchError, ConfigMismatchError, TokenizerError), "vocab mismatch"),
    (CheckpointError, "bad checkpoint"),
    (CtcInfeasibleError, "infeasible data"),
    ((ValueError, KeyError), "invalid input"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except Exception as exc:  # one-line diagnostic for any known failure
        for types, prefix in _PREFIXES:
            if isinstance(exc, types):
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                print(f"rilm {args.command}: {prefix}: {msg}", file=sys.stderr)
                return 2
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
