import json
import math
import os
import shutil
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import alignment_outcomes, all_sequences, optimal_outcomes, reachable
from speechprior.audio import read_manifest
from speechprior.errors import ConfigError, DataError
from speechprior.evaluation import (ExternalMetricClient, MetricReport, edit_distance, evaluate,
                                    load_client_config, normalize_text, phoneme_similarity,
                                    snr_measure, waveform_cosine, wer)
from speechprior.simulate import MixtureSource, MixtureSpec, export_test_set
from speechprior.toydata import write_toy_corpus


def test_edit_distance_examples():
    assert edit_distance("abc", "abc") == (0, 0, 0, 3)
    assert edit_distance("a b c".split(), []) == (0, 3, 0, 0)
    assert edit_distance("a b c".split(), "a x c d".split()) == (1, 0, 1, 2)
    assert edit_distance([], "xy") == (0, 0, 2, 0)
    # equal-cost choices: two substitutions beat delete+insert pairs
    assert edit_distance("ab", "ba") == (2, 0, 0, 0)


def test_edit_distance_matches_exhaustive_alignments_up_to_four():
    seqs = all_sequences("abc", 4)
    reach, cost = alignment_outcomes(seqs)
    for a, r in enumerate(seqs):
        for b, h in enumerate(seqs):
            e = edit_distance(r, h)
            assert e.errors == cost[a][b]
            assert reachable(reach[a][b], e.substitutions, e.deletions, e.insertions)
            assert e.substitutions + e.deletions + e.equals == len(r)
            assert e.substitutions + e.insertions + e.equals == len(h)


def test_oracle_decoding():
    seqs = all_sequences("ab", 2)
    reach, _ = alignment_outcomes(seqs)
    a, b = seqs.index(("a", "b")), seqs.index(("b", "a"))
    assert sorted(optimal_outcomes(reach[a][b])) == [(0, 1, 1), (2, 0, 0)]


short = st.lists(st.sampled_from("abc"), max_size=6)


@given(short, short, short)
@settings(max_examples=300, deadline=None)
def test_triangle_inequality(x, y, z):
    d = lambda p, q: edit_distance(p, q).errors
    assert d(x, z) <= d(x, y) + d(y, z)
    assert d(x, y) == d(y, x)
    assert (d(x, y) == 0) == (x == y)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=8), st.lists(st.integers(0, 5), max_size=8),
       st.permutations(range(6)))
@settings(max_examples=200, deadline=None)
def test_wer_relabel_invariant(ref, hyp, perm):
    assert wer(ref, ref) == 0.0
    relabel = lambda s: [perm[t] for t in s]
    assert wer(relabel(ref), relabel(hyp)) == wer(ref, hyp)


def test_wer_arithmetic():
    assert wer("the cat sat down", "the cat sat down") == 0.0
    assert wer("the cat sat down", "") == 100.0
    assert wer("the cat sat down", "the bat sat down") == 25.0
    assert wer("", "") == 0.0
    with pytest.raises(DataError):
        wer("", "extra")


def test_wer_normalization():
    assert normalize_text("Hello,  World! Don't stop.") == ["hello", "world", "don't", "stop"]
    assert wer("Hello, world.", "hello world") == 0.0
    assert wer("Hello, world.", "hello world", normalize=False) == 100.0


def test_phoneme_similarity():
    seq = "p l iy z k ao l s t eh".split()
    assert phoneme_similarity(seq, seq) == 1.0
    assert phoneme_similarity("a b c", "x y z") == 0.0
    assert phoneme_similarity(seq, seq[:-1] + ["ah"]) == pytest.approx(0.9)
    assert phoneme_similarity([], []) == 1.0


def test_snr_measure():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal(16000)
    assert snr_measure(ref, ref) == 120.0
    noise = rng.standard_normal(16000)
    noise *= math.sqrt(0.01 * np.mean(ref ** 2) / np.mean(noise ** 2))  # exactly 20 dB below
    assert snr_measure(ref + noise, ref) == pytest.approx(20.0, abs=1e-9)
    assert snr_measure(np.zeros(16000), ref) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DataError):
        snr_measure(ref[:10], ref)


def test_waveform_cosine():
    x = np.sin(np.arange(100))
    assert waveform_cosine(x, x) == pytest.approx(1.0)
    assert waveform_cosine(-x, x) == pytest.approx(-1.0)
    with pytest.raises(DataError):
        waveform_cosine(np.zeros(100), x)


# evaluate ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def test_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("set")
    corpus = read_manifest(write_toy_corpus(str(root / "corpus"), n_clean=3, n_noise=1, n_rir=0))
    clean = [r for r in corpus if r.kind == "clean"]
    noise = [r for r in corpus if r.kind == "noise"]
    src = MixtureSource(clean, noise, [], MixtureSpec(crop_seconds=1.0, rir_probability=0.0), seed=0)
    manifest = export_test_set(src, 3, str(root / "ref"))
    rows = [json.loads(l) for l in open(manifest)]
    for r, text in zip(rows, ["the cat sat", "a dog ran", "we go home"]):
        r["transcript"] = text
    with open(manifest, "w") as f:
        f.writelines(json.dumps(r) + "\n" for r in rows)
    # "perfect" enhancement: copies of the clean references
    enh = root / "enh"
    enh.mkdir()
    for r in rows:
        shutil.copy(root / "ref" / f"{r['id']}_clean.wav", enh / f"{r['id']}.wav")
    return manifest, str(enh), [r["id"] for r in rows]


def test_identical_audio_scores_perfectly(test_set):
    manifest, enh, ids = test_set
    rep = evaluate(enh, manifest)
    assert all(v == pytest.approx(1.0) for v in rep.per_utterance["cosine"].values())
    assert all(v == 120.0 for v in rep.per_utterance["snr"].values())
    assert rep.utterances == ids


def test_missing_clients_are_marked_skipped(test_set):
    manifest, enh, _ = test_set
    rep = evaluate(enh, manifest, metrics=["snr", "cosine", "dnsmos_ovrl", "utmos"])
    assert set(rep.per_utterance) == {"snr", "cosine"}
    assert rep.skipped == {"dnsmos_ovrl": "no client configured", "utmos": "no client configured"}


def test_client_failure_is_excluded_and_counted(test_set):
    manifest, enh, ids = test_set

    def flaky(uid, path, ref):
        if uid == ids[1]:
            raise TimeoutError("model server timed out")
        return 3.5

    client = ExternalMetricClient("utmos", handle=flaky, retries=1, backoff=0.0)
    rep = evaluate(enh, manifest, metrics=["snr", "utmos"], clients={"utmos": client})
    agg = rep.aggregates["utmos"]
    assert agg["count"] == 2 and agg["excluded"] == 1 and agg["mean"] == 3.5
    assert rep.per_utterance["utmos"][ids[1]] is None
    assert "TimeoutError" in rep.failures["utmos"][ids[1]]


def test_retry_then_succeed():
    calls = []

    def once_bad(uid, path, ref):
        calls.append(uid)
        if len(calls) == 1:
            raise ConnectionError("reset")
        return 1.0

    c = ExternalMetricClient("m", handle=once_bad, retries=2, backoff=0.0)
    assert c("u", "x.wav") == 1.0 and len(calls) == 2


def test_text_and_phone_clients(test_set):
    manifest, enh, ids = test_set
    lock = threading.Lock()
    seen = []

    def asr(uid, path, ref):
        with lock:
            seen.append(uid)
        return {"utt00000": "the cat sat", "utt00001": "a dog", "utt00002": "we go home"}[uid]

    def phones(uid, path, ref):
        return "a b c d" if "clean" in os.path.basename(path) else "a b c x"

    clients = {"wer": ExternalMetricClient("wer", handle=asr, output="text"),
               "lps": ExternalMetricClient("lps", handle=phones, output="phones")}
    rep = evaluate(enh, manifest, metrics=["wer", "lps"], clients=clients)
    assert rep.per_utterance["wer"] == {ids[0]: 0.0, ids[1]: pytest.approx(100 / 3), ids[2]: 0.0}
    assert all(v == pytest.approx(0.75) for v in rep.per_utterance["lps"].values())
    assert sorted(seen) == ids


def test_aggregates_recomputable_and_deterministic(test_set, tmp_path):
    manifest, enh, ids = test_set
    client = ExternalMetricClient("m", handle=lambda uid, p, r: float(int(uid[-1]) ** 2))
    a = evaluate(enh, manifest, metrics=["snr", "m"], clients={"m": client})
    b = evaluate(enh, manifest, metrics=["snr", "m"], clients={"m": client})
    assert a.to_dict() == b.to_dict()
    for metric, values in a.per_utterance.items():
        assert len(values) == len(ids)
        assert a.aggregates[metric] == MetricReport.aggregate(values)
    assert a.aggregates["m"]["mean"] == pytest.approx(np.mean([0, 1, 4]))
    assert a.aggregates["m"]["std"] == pytest.approx(np.std([0, 1, 4]))
    a.save(str(tmp_path / "r.json"))
    doc = json.load(open(tmp_path / "r.json"))
    assert doc["schema"] == "speechprior.report/1" and doc["config_hash"] == a.config_hash


def test_id_mismatch(test_set, tmp_path):
    manifest, enh, ids = test_set
    partial = tmp_path / "enh"
    partial.mkdir()
    shutil.copy(os.path.join(enh, f"{ids[0]}.wav"), partial / f"{ids[0]}.wav")
    with pytest.raises(DataError, match="no enhanced audio"):
        evaluate(str(partial), manifest)


def test_client_config(tmp_path):
    p = tmp_path / "clients.yaml"
    p.write_text("utmos:\n  endpoint: http://localhost:9/utmos\n  timeout: 2\n")
    clients = load_client_config(str(p))
    assert clients["utmos"].endpoint.endswith("/utmos") and clients["utmos"].timeout == 2
    p.write_text("utmos:\n  endpoint: http://x\n  timout: 2\n")
    with pytest.raises(ConfigError, match="timout"):
        load_client_config(str(p))
    with pytest.raises(ConfigError):
        ExternalMetricClient("x")


def test_http_client_failure_recorded():
    # nothing listens on port 9 (discard); connection errors become MetricFailure
    from speechprior.evaluation import MetricFailure
    c = ExternalMetricClient("m", endpoint="http://127.0.0.1:9/m", timeout=0.5, retries=0)
    with pytest.raises(MetricFailure):
        c("u", "x.wav")
