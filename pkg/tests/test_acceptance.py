"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The verdict lines are printed in the terminal summary (see conftest.py).
Criteria 7 to 9 train the full pipeline and take tens of minutes on one
CPU; they carry the ``slow`` marker (deselect with ``-m "not slow"``).
"""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import (
    bayes_reweight,
    ctc_brute_force_nll,
    ctc_prefix_probs_brute,
    smooth_oracle,
    softmax_row,
)
from rilm import cli
from rilm.adapt import PriorRatio, SmoothedPrior, SmoothingError, TokenCounts, prior_ratio, r_softmax, smooth
from rilm.asr import ILM_PREFIX, AsrConfig, AsrModel, EncoderConfig, RilmDecoderConfig, asr_train, init_asr_model
from rilm.asr import swap_internal_lm_file
from rilm.corpus import read_features, write_features
from rilm.ctc import ctc_forward_backward, ctc_loss, required_frames
from rilm.decoding import DecodeConfig, attention_beam_search, ctc_prefix_beam_search
from rilm.experiment import SYSTEMS, lookup, mean_table, run_pipeline
from rilm.lm import lm_train
from rilm.nn import save_checkpoint
from rilm.tensor import Tensor, grad_check
from rilm.tokenizer import EOW, BpeModel

SEEDS = (0, 1, 2)


def verdict(n, ok, detail):
    prev = ACCEPTANCE.get(n)
    if prev is not None:
        ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
    ACCEPTANCE[n] = (bool(ok), detail)


def _log_softmax(x):
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


# -- 1, 2: R-softmax ---------------------------------------------------------------

def test_criteria_1_and_2_r_softmax_and_blank():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = worst_blank = worst_unit = 0.0
    for _ in range(200):
        v = int(rng.integers(3, 12))
        logits = rng.normal(size=v) * rng.uniform(0.5, 5)
        pt, ps = rng.dirichlet(np.ones(v - 1)), rng.dirichlet(np.ones(v - 1))
        phi = r_softmax(logits, prior_ratio(SmoothedPrior(pt), SmoothedPrior(ps)))
        plain = np.array(softmax_row(logits.tolist()))
        worst = max(worst, np.max(np.abs(phi - bayes_reweight(logits, pt, ps))))
        worst_blank = max(worst_blank, abs(phi[0] - plain[0]))
        worst_unit = max(worst_unit, np.max(np.abs(r_softmax(logits, PriorRatio.unit(v)) - plain)))
    took = time.perf_counter() - t0
    ok1 = worst < 1e-12 and worst_unit < 1e-15 and took < 1.0
    verdict(1, ok1, f"max|phi-oracle|={worst:.1e} max|unit-softmax|={worst_unit:.1e} time={took:.2f}s")
    verdict(2, worst_blank < 1e-12, f"max|blank shift|={worst_blank:.1e} over 200 trials")
    assert ok1 and worst_blank < 1e-12


# -- 3: smoothing ----------------------------------------------------------------

def test_criterion_3_smoothing():
    checked, bad = 0, []
    vectors = [c for v in range(1, 5) for c in itertools.product(range(7), repeat=v) if 0 < sum(c) <= 6]
    rng = np.random.default_rng(7)
    for _ in range(1000):
        c = rng.integers(0, 20, size=rng.integers(2, 40))
        c[rng.integers(len(c))] += 2
        vectors.append(tuple(int(x) for x in c))
    undefined = 0
    for c in vectors:
        try:
            p = smooth(TokenCounts(np.array(c))).probs
        except SmoothingError:
            # a single count-1 token leaves nothing to redistribute
            undefined += 1
            if not (sum(c) == 1 and len(c) > 1):
                bad.append(c)
            continue
        checked += 1
        if abs(p.sum() - 1.0) >= 1e-12 or p.min() <= 0 or not np.allclose(p, smooth_oracle(list(c)), atol=1e-15):
            bad.append(c)
    hand = smooth(TokenCounts(np.array([3, 1, 0, 0]))).probs.tolist()
    ok = not bad and hand == [0.625, 0.125, 0.125, 0.125]
    verdict(3, ok, f"{checked} vectors checked, {undefined} single-count vectors rejected, hand case {hand}")
    assert ok, bad[:5]


# -- 4: CTC ----------------------------------------------------------------------

def test_criterion_4_ctc():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, n = 0.0, 0
    for v in (2, 3, 4):
        for t_len in range(1, 7):
            logp = _log_softmax(rng.normal(size=(t_len, v)))
            for length in range(4):
                for label in itertools.product(range(1, v), repeat=length):
                    if required_frames(label) > t_len:
                        continue
                    nll, _ = ctc_forward_backward(logp[None], [t_len], [label])
                    worst = max(worst, abs(nll[0] - ctc_brute_force_nll(logp, label)))
                    n += 1
    grad_err = max(
        grad_check(lambda t, lab=lab: ctc_loss(t, lab), Tensor(rng.normal(size=(6, 4))))
        for lab in ([1, 2], [3, 3], [2, 1, 2], [1])
    )
    took = time.perf_counter() - t0
    ok = worst < 1e-8 and grad_err < 1e-4 and took < 30
    verdict(4, ok, f"{n} instances max|err|={worst:.1e} grad rel err={grad_err:.1e} time={took:.1f}s")
    assert ok


# -- 5: RILM structure ---------------------------------------------------------------

VOCAB5 = BpeModel(["a", "b", "c", EOW], []).vocab
DIMS = dict(d_model=8, n_heads=2, d_ff=16)


def _cfg5(beta=0.3):
    enc = EncoderConfig(input_dim=4, n_layers=1, max_len=64, **DIMS)
    dec = RilmDecoderConfig(n_lm_layers=1, n_cross_layers=1, beta=beta, vocab_size=len(VOCAB5), max_len=16, **DIMS)
    return AsrConfig(enc, dec)


def _corpus5(n):
    rng = np.random.default_rng(5)
    protos = rng.normal(size=(len(VOCAB5), 4))
    out = []
    for i in range(n):
        ids = list(rng.integers(4, len(VOCAB5), size=rng.integers(1, 4)))
        frames = np.concatenate([protos[t] + 0.1 * rng.normal(size=(2, 4)) for t in ids])
        out.append((f"u{i}", frames, ids))
    return out


def test_criterion_5_rilm_structure(tmp_path):
    rng = np.random.default_rng(55)
    checks = {}
    m = AsrModel(_cfg5(), rng, VOCAB5)
    enc, lens = m.encode(rng.normal(size=(6, 4)))
    ids = np.array([[VOCAB5.sos, 4, 5, 6]])
    logits, la, ll = m.decoder(ids, enc, lens)
    checks["eq1"] = np.array_equal(logits.data, la.data + 0.3 * ll.data)
    checks["lm_invariant"] = all(
        np.array_equal(m.decoder(ids, Tensor(enc.data + rng.normal(scale=3.0, size=enc.shape)), lens)[2].data, ll.data)
        for _ in range(50)
    )
    m0 = AsrModel(_cfg5(beta=0.0), np.random.default_rng(1), VOCAB5)
    out0, la0, _ = m0.decoder(ids, *m0.encode(rng.normal(size=(6, 4))))
    checks["beta0"] = np.array_equal(out0.data, la0.data)

    lm, _ = lm_train([[4, 5, 6, 4]] * 8, _cfg5().decoder.lm_config(), 2, VOCAB5)
    model = init_asr_model(_cfg5(), VOCAB5, 0, lm)
    save_checkpoint(model.to_checkpoint(), tmp_path / "asr.ckpt")
    save_checkpoint(lm.to_checkpoint(), tmp_path / "lm.ckpt")
    swap_internal_lm_file(tmp_path / "asr.ckpt", tmp_path / "lm.ckpt", tmp_path / "same.ckpt")
    checks["identity_swap"] = (tmp_path / "same.ckpt").read_bytes() == (tmp_path / "asr.ckpt").read_bytes()

    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    trained, _ = asr_train(model, _corpus5(20), 3, lr=1e-2, batch_size=8, average_last=1)
    after = trained.state_dict()
    checks["freeze"] = all((after[k].tobytes() == v) == k.startswith(ILM_PREFIX) for k, v in before.items())
    ok = all(checks.values())
    verdict(5, ok, " ".join(f"{k}={'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok, checks


# -- 6: search optimality ----------------------------------------------------------

VOCAB6 = BpeModel(["a", "b", EOW], []).vocab


def _model6(seed):
    enc = EncoderConfig(input_dim=3, n_layers=1, max_len=32, **DIMS)
    dec = RilmDecoderConfig(n_lm_layers=1, n_cross_layers=1, vocab_size=len(VOCAB6), max_len=8, **DIMS)
    model = AsrModel(AsrConfig(enc, dec), np.random.default_rng(seed), VOCAB6)
    model.decoder.out.weight.data *= 3.0
    return model


def _exhaustive_scores(model, enc, n, symbols, max_len):
    """Full-sequence log-probability of every label sequence, one batch per length."""
    out = []
    for length in range(max_len + 1):
        seqs = list(itertools.product(symbols, repeat=length))
        ys = np.array([[VOCAB6.sos, *s] for s in seqs])
        b = len(seqs)
        lp = _log_softmax(model.decoder(ys, Tensor(np.repeat(enc.data, b, axis=0)), [n] * b)[0].data)
        targets = np.array([[*s, VOCAB6.eos] for s in seqs])
        total = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0].sum(-1)
        out.extend(zip(total.tolist(), seqs))
    return out


def test_criterion_6_search_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    prefix_ok = 0
    for _ in range(100):
        t_len, v = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        lp = _log_softmax(rng.normal(size=(t_len, v)) * 2)
        brute = ctc_prefix_probs_brute(lp)
        best = max(brute.values())
        top = min(k for k, p in brute.items() if p >= best * (1 - 1e-12))
        (label, score), *_ = ctc_prefix_beam_search(lp, beam=v**t_len)
        prefix_ok += label == top and abs(np.exp(score) - brute[label]) <= 1e-10 * brute[label]

    symbols = [t for t in range(len(VOCAB6)) if t not in (VOCAB6.blank, VOCAB6.sos, VOCAB6.eos)]
    att_ok = 0
    for seed in range(100):
        model = _model6(seed)
        enc, lens = model.encode(np.random.default_rng(seed + 1000).normal(size=(5, 3)))
        n = int(lens[0])
        hyp = attention_beam_search(model, enc, n, DecodeConfig(beam=256, max_len=4))[0]
        scored = _exhaustive_scores(model, enc, n, symbols, 4)
        best = max(sc for sc, _ in scored)
        want = min(s for sc, s in scored if sc >= best - 1e-9)
        att_ok += abs(hyp.score - best) < 1e-9 and hyp.tokens(VOCAB6.sos, VOCAB6.eos) == want
    took = time.perf_counter() - t0
    ok = prefix_ok == 100 and att_ok == 100 and took < 120
    verdict(6, ok, f"prefix {prefix_ok}/100, attention {att_ok}/100 (V={len(symbols)}, len<=4), time={took:.0f}s")
    assert ok


# -- 7, 8, 9: full pipeline ----------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    t0 = time.perf_counter()
    per_seed = {s: run_pipeline(root / f"seed{s}", s) for s in SEEDS}
    return root, per_seed, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_directional_reproduction(pipeline_runs):
    _, per_seed, took = pipeline_runs
    w = mean_table(per_seed)
    tgt = lambda s: w[(s, "target")]  # noqa: E731
    src = lambda s: w[(s, "source")]  # noqa: E731
    parts = {
        "a": (tgt("ctc_greedy+rsoftmax") < tgt("ctc_greedy"),
              f"ctc greedy {tgt('ctc_greedy'):.2f} -> +rsoftmax {tgt('ctc_greedy+rsoftmax'):.2f}"),
        "b": (tgt("hybrid+swap") < tgt("hybrid"), f"hybrid {tgt('hybrid'):.2f} -> +swap {tgt('hybrid+swap'):.2f}"),
        "c": (tgt("hybrid+swap+rsoftmax") <= min(tgt("hybrid+swap"), tgt("hybrid+rsoftmax")),
              f"combined {tgt('hybrid+swap+rsoftmax'):.2f} vs swap {tgt('hybrid+swap'):.2f}, "
              f"rsoftmax {tgt('hybrid+rsoftmax'):.2f}"),
        "d": (src("hybrid+swap+rsoftmax") - src("hybrid") <= 1.0,
              f"source {src('hybrid'):.2f} -> both {src('hybrid+swap+rsoftmax'):.2f}"),
    }
    ok = all(p for p, _ in parts.values())
    detail = " | ".join(f"({k}) {'ok' if p else 'no'}: {d}" for k, (p, d) in parts.items())
    verdict(7, ok, f"{detail} | mean of seeds {list(SEEDS)}, {took / 60:.1f} min")
    assert ok, detail


@pytest.mark.slow
def test_criterion_8_fusion_baselines(pipeline_runs, tmp_path):
    root, per_seed, _ = pipeline_runs
    ran = all(
        np.isfinite(lookup(rows, name, "target"))
        for rows in per_seed.values()
        for name in ("hybrid+shallow_fusion", "hybrid+density_ratio")
    )
    w = root / "seed0"
    feats = read_features(w / "target_dev.feats")
    subset = tmp_path / "dev20.feats"
    write_features(subset, [_Rec(k, v) for k, v in itertools.islice(feats.items(), 20)])
    common = ["--asr", f"{w}/asr.ckpt", "--feats", str(subset), "--bpe", f"{w}/bpe", "--quiet"]
    outs = {}
    for tag, extra in (
        ("none", []),
        ("shallow0", ["--fusion", "shallow", "--target-lm", f"{w}/target_lm.ckpt", "--lm-weight", "0"]),
        ("dr0", ["--fusion", "density_ratio", "--target-lm", f"{w}/target_lm.ckpt", "--source-lm",
                 f"{w}/source_lm.ckpt", "--target-lm-weight", "0", "--source-lm-weight", "0"]),
    ):
        assert cli.main(["decode", *common, *extra, "--out", str(tmp_path / f"{tag}.nbest")]) == 0
        outs[tag] = (tmp_path / f"{tag}.nbest").read_bytes()
    same = outs["none"] == outs["shallow0"] == outs["dr0"]
    sf = np.mean([lookup(r, "hybrid+shallow_fusion", "target") for r in per_seed.values()])
    dr = np.mean([lookup(r, "hybrid+density_ratio", "target") for r in per_seed.values()])
    ok = ran and same
    verdict(8, ok, f"shallow(0.1) {sf:.2f}, density ratio(0.2/0.1) {dr:.2f} target WER; "
                   f"zero-weight outputs {'identical' if same else 'DIFFER'} to fusion=none")
    assert ok


class _Rec:
    def __init__(self, utt_id, features):
        self.utt_id, self.features = utt_id, features


# checkpoints and reports compared by the rerun
_ARTIFACTS = ("bpe.model", "bpe.vocab", "source_lm.ckpt", "target_lm.ckpt", "asr.ckpt", "asr_target_ilm.ckpt",
              "source.freqs", "target.freqs", "source_train.feats", "target_dev.feats")
_RERUN = ("ctc_greedy+rsoftmax", "hybrid+swap+rsoftmax")


@pytest.mark.slow
def test_criterion_9_determinism(pipeline_runs, tmp_path):
    root, _, _ = pipeline_runs
    first = root / "seed0"
    systems = tuple(s for s in SYSTEMS if s[0] in _RERUN)
    run_pipeline(tmp_path, 0, systems=systems)
    differ = [n for n in _ARTIFACTS if (tmp_path / n).read_bytes() != (first / n).read_bytes()]
    for name, domain, _ in systems:
        for ext in ("nbest", "wer"):
            n = f"decode/{domain}_dev.{name}.{ext}"
            if (tmp_path / n).read_bytes() != (first / n).read_bytes():
                differ.append(n)
    ok = not differ
    verdict(9, ok, f"seed 0 rerun: {len(_ARTIFACTS) + 2 * len(systems)} files compared, "
                   f"{'all byte-identical' if ok else 'differ: ' + ', '.join(differ)}")
    assert ok
