from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from oracles import stationary_power
from rilm.corpus import (
    BOUNDARY,
    gen_domain_corpus,
    letter_pairs,
    load_split,
    make_bigram,
    make_domains,
    read_features,
    read_transcripts,
    write_features,
    write_transcripts,
)


def test_noiseless_features_decode_by_nearest_prototype():
    src, _ = make_domains(0, noise=0.0, frames_per_token=(1, 1))
    for rec in gen_domain_corpus(src, 50):
        dists = ((rec.features[:, None, :] - src.prototypes[None].astype(np.float32)) ** 2).sum(-1)
        decoded = "".join(src.alphabet[i] for i in dists.argmin(1))
        assert decoded == rec.transcript + BOUNDARY


def test_same_seed_same_bytes(tmp_path):
    src, _ = make_domains(3)
    a, b = gen_domain_corpus(src, 20, "dev"), gen_domain_corpus(src, 20, "dev")
    write_features(tmp_path / "a.feats", a)
    write_features(tmp_path / "b.feats", b)
    assert (tmp_path / "a.feats").read_bytes() == (tmp_path / "b.feats").read_bytes()
    assert [r.transcript for r in a] == [r.transcript for r in b]


def test_splits_differ():
    src, _ = make_domains(0)
    train = [r.transcript for r in gen_domain_corpus(src, 30, "train")]
    dev = [r.transcript for r in gen_domain_corpus(src, 30, "dev")]
    assert train != dev


def test_domains_share_prototypes_and_differ_in_text():
    src, tgt = make_domains(5)
    assert src.prototypes.tobytes() == tgt.prototypes.tobytes()
    assert not np.array_equal(src.transitions, tgt.transitions)
    np.testing.assert_allclose(src.transitions.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tgt.transitions.sum(1), 1.0, atol=1e-12)


def test_unigrams_match_stationary_distribution():
    _, tgt = make_domains(0)
    counts = Counter()
    for rec in gen_domain_corpus(tgt, 10_000):
        counts.update(rec.transcript + BOUNDARY)
    total = sum(counts.values())
    emp = np.array([counts[s] / total for s in tgt.alphabet])
    tv = 0.5 * np.abs(emp - stationary_power(tgt.transitions)).sum()
    assert tv < 0.01


def test_pair_bias_moves_mass_onto_confusable_letters():
    src, tgt = make_domains(0)
    pairs = letter_pairs(src.alphabet)[:6]
    letters = [i for p in pairs for i in p]
    share = lambda spec: stationary_power(spec.transitions)[letters].sum()  # noqa: E731
    assert share(src) < 0.1 < 0.3 < share(tgt)
    # with the tilt the first letter of each source pair wins
    p = stationary_power(src.transitions)
    assert all(p[a] > p[b] for a, b in pairs)
    # a zero bias and tilt leaves the chain unchanged
    plain = make_bigram(src.alphabet, 0, 0, 0.0, 0.0, 0)
    assert np.array_equal(make_bigram(src.alphabet, 0, 0, 0.0, 0.0, 6, pair_bias=0.0), plain)


def test_records_are_well_formed():
    src, _ = make_domains(1)
    for rec in gen_domain_corpus(src, 50):
        assert rec.features.dtype == np.float32 and rec.features.shape[1] == 16
        words = rec.transcript.split(BOUNDARY)
        assert 2 <= len(words) <= 4 and all(words)
        assert len(rec.features) >= len(rec.transcript) + 1


def test_invalid_transition_rows_error():
    src, _ = make_domains(0)
    bad = src.transitions.copy()
    bad[3] *= 0.5
    with pytest.raises(ValueError, match="row 3"):
        gen_domain_corpus(replace(src, transitions=bad), 1)


def test_feature_and_transcript_files_round_trip(tmp_path):
    src, _ = make_domains(2)
    recs = gen_domain_corpus(src, 5)
    write_features(tmp_path / "x.feats", recs)
    write_transcripts(tmp_path / "x.txt", recs)
    feats = read_features(tmp_path / "x.feats")
    assert list(feats) == [r.utt_id for r in recs]
    assert all(np.array_equal(feats[r.utt_id], r.features) for r in recs)
    assert read_transcripts(tmp_path / "x.txt") == {r.utt_id: r.transcript for r in recs}
    loaded = load_split(tmp_path / "x.feats", tmp_path / "x.txt")
    assert [r.utt_id for r in loaded] == [r.utt_id for r in recs]


def test_feature_file_layout_and_bad_magic(tmp_path):
    src, _ = make_domains(0)
    write_features(tmp_path / "x.feats", gen_domain_corpus(src, 2))
    raw = (tmp_path / "x.feats").read_bytes()
    assert raw[:8] == b"RILMFEAT" and int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 2
    (tmp_path / "bad.feats").write_bytes(b"NOTFEATS" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        read_features(tmp_path / "bad.feats")


def test_transcript_manifest_errors(tmp_path):
    (tmp_path / "dup.txt").write_text("u1\ta b\nu1\tc\n")
    with pytest.raises(ValueError, match="duplicate"):
        read_transcripts(tmp_path / "dup.txt")
    (tmp_path / "notab.txt").write_text("u1 a b\n")
    with pytest.raises(ValueError):
        read_transcripts(tmp_path / "notab.txt")
