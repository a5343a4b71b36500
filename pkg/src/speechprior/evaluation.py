"""Scoring of enhanced audio: edit-distance metrics, waveform sanity metrics and
pluggable clients for externally hosted neural metrics (DNSMOS, UTMOS, ASR, ...).
"""

import json
import logging
import math
import os
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .audio import read_wav
from .errors import ConfigError, DataError
from .probes import config_hash

log = logging.getLogger(__name__)

REPORT_SCHEMA = "speechprior.report/1"
SNR_CAP_DB = 120.0
LOCAL_METRICS = ("snr", "cosine")


class EditCounts(NamedTuple):
    substitutions: int
    deletions: int
    insertions: int
    equals: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment.

    Among equal-cost alignments the backtrace prefers a diagonal step
    (match/substitution), then an insertion, then a deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # plain lists: these are short token sequences and numpy scalar access is slower
    d = [list(range(m + 1))] + [[i] + [0] * m for i in range(1, n + 1)]
    for i in range(1, n + 1):
        prev, row, r = d[i - 1], d[i], ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    s = dl = ins = eq = 0
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                eq += 1
            else:
                s += 1
            i, j = i - 1, j - 1
        elif j and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditCounts(s, dl, ins, eq)


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_text(text: str, lowercase: bool = True, strip_punctuation: bool = True) -> List[str]:
    if lowercase:
        text = text.lower()
    if strip_punctuation:
        # keep in-word apostrophes ("don't")
        text = _PUNCT.sub(lambda m: m.group() if m.group() == "'" else " ", text)
        text = re.sub(r"(?<!\w)'|'(?!\w)", " ", text)
    return text.split()


def _tokens(x, normalize: bool) -> List:
    if isinstance(x, str):
        return normalize_text(x) if normalize else x.split()
    return list(x)


def wer(ref, hyp, normalize: bool = True) -> float:
    """Word error rate in percent. Strings are normalised and split on whitespace."""
    r, h = _tokens(ref, normalize), _tokens(hyp, normalize)
    if not r:
        if h:
            raise DataError("WER undefined for an empty reference with a non-empty hypothesis")
        return 0.0
    return 100.0 * edit_distance(r, h).errors / len(r)


def phoneme_similarity(ref_phones, hyp_phones) -> float:
    """1 - edit distance / max(len); 1.0 when both are empty."""
    r, h = _tokens(ref_phones, False), _tokens(hyp_phones, False)
    denom = max(len(r), len(h))
    if denom == 0:
        return 1.0
    return 1.0 - edit_distance(r, h).errors / denom


def snr_measure(signal, reference) -> float:
    """10 log10(P_ref / P_(signal - ref)), clipped to +-120 dB."""
    x = np.asarray(signal, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if x.shape != r.shape:
        raise DataError(f"signal {x.shape} and reference {r.shape} differ")
    p_ref = float(np.mean(r ** 2)) if r.size else 0.0
    p_diff = float(np.mean((x - r) ** 2)) if r.size else 0.0
    if p_diff == 0.0:
        return SNR_CAP_DB
    if p_ref == 0.0:
        return -SNR_CAP_DB
    return float(np.clip(10 * math.log10(p_ref / p_diff), -SNR_CAP_DB, SNR_CAP_DB))


def waveform_cosine(signal, reference) -> float:
    x = np.asarray(signal, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    if x.shape != r.shape:
        raise DataError(f"signal {x.shape} and reference {r.shape} differ")
    nx, nr = np.linalg.norm(x), np.linalg.norm(r)
    if nx == 0 or nr == 0:
        raise DataError("cosine similarity undefined for a silent waveform")
    return float(np.dot(x, r) / (nx * nr))


# external clients --------------------------------------------------------------

class MetricFailure(Exception):
    """A client call failed after all retries; recorded per utterance."""


@dataclass
class ExternalMetricClient:
    """Wraps an external metric model behind ``{id, audio} -> {metric, value}``.

    Either ``handle`` (a local callable taking ``(utterance_id, audio_path,
    reference_path)``) or ``endpoint`` (HTTP URL accepting a JSON POST) must be
    set. ``output`` selects how the response is scored: ``value`` is used as is,
    ``text`` is scored with WER against the manifest transcript, ``phones`` is
    compared with the client's output on the reference audio.
    """

    name: str
    endpoint: Optional[str] = None
    handle: Optional[Callable] = None
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    needs_reference: bool = False
    output: str = "value"
    max_in_flight: int = 4

    def __post_init__(self):
        if (self.endpoint is None) == (self.handle is None):
            raise ConfigError(f"client {self.name!r}: set exactly one of endpoint / handle")
        if self.output not in ("value", "text", "phones"):
            raise ConfigError(f"client {self.name!r}: unknown output {self.output!r}")
        if self.output == "phones":
            self.needs_reference = True

    def _request(self, utterance_id, audio_path, reference_path):
        if self.handle is not None:
            return self.handle(utterance_id, audio_path, reference_path)
        import httpx
        payload = {"utterance_id": utterance_id, "audio_path": os.path.abspath(audio_path),
                   "metric": self.name}
        if reference_path is not None:
            payload["reference_path"] = os.path.abspath(reference_path)
        resp = httpx.post(self.endpoint, json=payload, timeout=self.timeout)
        resp.raise_for_status()
        body = resp.json()
        return body["value"] if isinstance(body, dict) else body

    def __call__(self, utterance_id, audio_path, reference_path=None):
        last = None
        for attempt in range(self.retries + 1):
            try:
                return self._request(utterance_id, audio_path,
                                     reference_path if self.needs_reference else None)
            except Exception as e:  # transport errors, timeouts, bad payloads
                last = e
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise MetricFailure(f"{self.name}: {type(last).__name__}: {last}")


def load_client_config(path: str) -> Dict[str, ExternalMetricClient]:
    """Read ``{metric: {endpoint, timeout, retries, needs_reference, output}}``."""
    import yaml
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of metric name to client settings")
    allowed = {"endpoint", "timeout", "retries", "backoff", "needs_reference", "output", "max_in_flight"}
    clients = {}
    for name, body in raw.items():
        body = body or {}
        unknown = set(body) - allowed
        if unknown:
            raise ConfigError(f"{path}: client {name!r} has unknown field {sorted(unknown)[0]!r}")
        clients[name] = ExternalMetricClient(name=name, **body)
    return clients


# report ------------------------------------------------------------------------

@dataclass
class MetricReport:
    per_utterance: Dict[str, Dict[str, Optional[float]]]
    aggregates: Dict[str, dict]
    config_hash: str
    skipped: Dict[str, str] = field(default_factory=dict)
    failures: Dict[str, Dict[str, str]] = field(default_factory=dict)
    utterances: List[str] = field(default_factory=list)

    @staticmethod
    def aggregate(values: Dict[str, Optional[float]]) -> dict:
        ok = [v for v in values.values() if v is not None]
        return {"mean": float(np.mean(ok)) if ok else None,
                "std": float(np.std(ok)) if ok else None,
                "count": len(ok), "excluded": len(values) - len(ok)}

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _read_rows(manifest: str) -> List[dict]:
    rows = []
    with open(manifest) as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{manifest}:{n}: {e}") from e
    for r in rows:
        if "id" not in r:
            raise DataError(f"{manifest}: row without an 'id' field")
    return rows


def _find_enhanced(enhanced_dir: str, uid: str) -> Optional[str]:
    for name in (f"{uid}_noisy.wav", f"{uid}.wav", f"{uid}_enhanced.wav"):
        p = os.path.join(enhanced_dir, name)
        if os.path.exists(p):
            return p
    return None


def _trim(x, r):
    n = min(len(x), len(r))
    if abs(len(x) - len(r)) > 0.01 * max(len(x), len(r)) + 320:
        raise DataError(f"enhanced length {len(x)} far from reference length {len(r)}")
    return x[:n], r[:n]


def evaluate(enhanced_dir: str, manifest: str, metrics: Sequence[str] = LOCAL_METRICS,
             clients: Optional[Dict[str, ExternalMetricClient]] = None,
             config: Optional[dict] = None) -> MetricReport:
    """Score every utterance listed in ``manifest`` (a test-set ``metadata.jsonl``).

    References are ``{id}_clean.wav`` beside the manifest. Local metrics always
    run; each other requested metric runs only through a configured client and
    is otherwise recorded as skipped.
    """
    clients = clients or {}
    rows = _read_rows(manifest)
    ref_dir = os.path.dirname(os.path.abspath(manifest))
    ids = [r["id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise DataError(f"{manifest}: duplicate utterance ids")
    paths = {uid: _find_enhanced(enhanced_dir, uid) for uid in ids}
    missing = [uid for uid, p in paths.items() if p is None]
    if missing:
        raise DataError(f"no enhanced audio for {len(missing)} ids, e.g. {missing[0]!r}")
    refs = {uid: os.path.join(ref_dir, f"{uid}_clean.wav") for uid in ids}
    for uid, p in refs.items():
        if not os.path.exists(p):
            raise DataError(f"reference audio missing for {uid!r}: {p}")

    per = {m: {} for m in LOCAL_METRICS if m in metrics}
    remote = [m for m in metrics if m not in LOCAL_METRICS]
    for uid in ids:
        x, _ = read_wav(paths[uid])
        r, _ = read_wav(refs[uid])
        x, r = _trim(x, r)
        if "snr" in per:
            per["snr"][uid] = snr_measure(x, r)
        if "cosine" in per:
            per["cosine"][uid] = waveform_cosine(x, r)

    skipped, failures = {}, {}
    transcripts = {r["id"]: r.get("transcript") for r in rows}
    for m in remote:
        client = clients.get(m)
        if client is None:
            skipped[m] = "no client configured"
            continue

        def run(uid, client=client):
            try:
                out = client(uid, paths[uid], refs[uid])
                if client.output == "text":
                    if transcripts[uid] is None:
                        raise MetricFailure(f"{m}: manifest has no transcript for {uid!r}")
                    return wer(transcripts[uid], out), None
                if client.output == "phones":
                    ref_out = client(uid, refs[uid], refs[uid])
                    return phoneme_similarity(ref_out, out), None
                value = float(out)
                if not math.isfinite(value):
                    raise MetricFailure(f"{m}: non-finite value {out!r}")
                return value, None
            except MetricFailure as e:
                return None, str(e)

        with ThreadPoolExecutor(max_workers=max(1, client.max_in_flight)) as pool:
            results = list(pool.map(run, ids))  # map preserves order
        per[m] = {}
        for uid, (value, err) in zip(ids, results):
            per[m][uid] = value
            if err is not None:
                failures.setdefault(m, {})[uid] = err
                log.warning("metric %s failed for %s: %s", m, uid, err)

    aggregates = {m: MetricReport.aggregate(v) for m, v in per.items()}
    cfg = {"metrics": list(metrics), "clients": sorted(clients), "manifest": os.path.abspath(manifest),
           **(config or {})}
    return MetricReport(per, aggregates, config_hash(cfg), skipped, failures, ids)
