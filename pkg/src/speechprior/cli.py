"""Command-line entry point: ``speechprior <command> [--config FILE] [--field value ...]``.

Every command reads its parameters from an optional YAML/JSON document, lets
flags override individual fields, and snapshots the merged result as
``resolved_config.json`` in ``--output_dir``. Passing that snapshot back via
``--config`` reproduces the run.
"""

import argparse
import glob
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .errors import AssetError, ConfigError, DataError, SpeechPriorError

log = logging.getLogger("speechprior")

PRETRAINED_NAME = "WavLM-Large.pt"


# --- config schema ---------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    name: str
    type: type
    default: Any = None
    help: str = ""
    choices: Optional[tuple] = None
    many: bool = False  # list-valued
    required: bool = False


GLOBAL_FIELDS = [
    Field("output_dir", str, None, "where artifacts and the resolved config go", required=True),
    Field("seed", int, 0, "global seed"),
    Field("asset_dir", str, None, "directory holding pretrained checkpoints (else $SPEECHPRIOR_ASSETS)"),
    Field("log_level", str, "INFO", "logging level", ("DEBUG", "INFO", "WARNING", "ERROR")),
    Field("deterministic", bool, False, "single-threaded deterministic numerics"),
]

_DATA_FIELDS = [
    Field("manifests", str, [], "manifest files with clean/noise/rir records", many=True),
    Field("toy_items", int, 8, "number of synthetic mixtures used when no manifests are given"),
    Field("crop_seconds", float, 1.0, "training crop length"),
    Field("snr_low", float, -5.0), Field("snr_high", float, 15.0),
    Field("rir_probability", float, 0.5),
]

_RUN_FIELDS = [
    Field("max_steps", int, None, "stop early; the schedule still spans total_steps"),
    Field("checkpoint_every", int, 0, "also keep a checkpoint every N steps"),
    Field("resume", str, None, "checkpoint to resume from, or 'auto' for <output_dir>/*_last.pt"),
]

SCHEMAS: Dict[str, List[Field]] = {
    "simulate": [
        Field("manifests", str, [], "manifest files with clean/noise/rir records", many=True),
        Field("toy_corpus", bool, False, "synthesise a small corpus instead of reading manifests"),
        Field("n_samples", int, 1000),
        Field("snr_low", float, -5.0), Field("snr_high", float, 15.0),
        Field("rir_probability", float, 0.5),
        Field("crop_seconds", float, 4.0),
        Field("early_reflection_ms", float, 50.0),
        Field("prefix", str, "utt"),
    ],
    "train-drd": [
        Field("teacher", str, "toy", "preset name, checkpoint path, or 'pretrained'"),
        Field("scratch", bool, False, "initialise the student randomly instead of from the teacher"),
        Field("objective", str, "KD", choices=("KD", "SSL", "SSL_KD")),
        Field("student_layer", int, None), Field("teacher_layer", int, None),
        Field("total_steps", int, 50), Field("batch_size", int, 4),
        Field("lr_max", float, 1e-3), Field("warmup_fraction", float, 0.1),
        Field("weight_decay", float, 0.01), Field("grad_clip", float, 5.0),
        Field("mask_ratio", float, None), Field("mask_span", int, None),
        Field("train_cnn", bool, True),
        Field("n_clusters", int, 50, "k-means units for SSL objectives"),
        Field("label_layer", int, None, "teacher layer clustered for pseudo labels (default final)"),
        *_DATA_FIELDS, *_RUN_FIELDS,
    ],
    "train-vocoder": [
        Field("encoder", str, "toy", "DRD checkpoint, encoder checkpoint, preset, or 'pretrained'"),
        Field("fusion", str, "Add", choices=("Add", "Cat", "CrossAttention", "FiLM", "none")),
        Field("fusion_heads", int, 8),
        Field("vocoder", str, "toy", choices=("toy", "full")),
        Field("discriminators", str, None, choices=("toy", "full")),
        Field("total_steps", int, 100), Field("batch_size", int, 4),
        Field("lr_max", float, 2e-3), Field("warmup_fraction", float, 0.1),
        Field("weight_decay", float, 0.01), Field("grad_clip", float, 5.0),
        Field("loss_weights", float, [15.0, 2.0, 1.0], many=True),
        *_DATA_FIELDS, *_RUN_FIELDS,
    ],
    "enhance": [
        Field("inputs", str, [], "wav files or directories of wavs", many=True, required=True),
        Field("encoder", str, None, "DRD/encoder checkpoint, preset, or 'pretrained'", required=True),
        Field("vocoder", str, None, "vocoder checkpoint", required=True),
        Field("fusion", str, None, "override the checkpoint's scheme; only 'none' is allowed to differ",
              choices=("Add", "Cat", "CrossAttention", "FiLM", "none")),
    ],
    "probe": [
        Field("probe", str, "rfs", choices=("rfs", "mrs", "pnmi", "orthogonality")),
        Field("checkpoint", str, None, "model to probe", required=True),
        Field("teacher", str, None, "reference model for rfs"),
        Field("manifest", str, None, "clean-speech manifest"),
        Field("toy_items", int, 4, "synthetic clean utterances used when no manifest is given"),
        Field("layer", int, None, "layer to probe (default final)"),
        Field("layer_b", int, None, "second layer for orthogonality (default final; first is --layer or 1)"),
        Field("mask_ratio", float, None), Field("mask_span", int, None),
        Field("alignments", str, None, "phone alignment jsonl for pnmi, or 'self' for a perfect alignment"),
        Field("n_clusters", int, 50),
    ],
    "evaluate": [
        Field("enhanced_dir", str, None, required=True),
        Field("manifest", str, None, "test-set metadata.jsonl", required=True),
        Field("metrics", str, ["snr", "cosine"], many=True),
        Field("clients", str, None, "external metric client config (YAML)"),
    ],
}


def _schema(command: str) -> Dict[str, Field]:
    return {f.name: f for f in GLOBAL_FIELDS + SCHEMAS[command]}


def _coerce(f: Field, value):
    def one(v):
        if v is None:
            return None
        if f.type is bool:
            if isinstance(v, bool):
                return v
            if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
                return v.lower() in ("true", "1", "yes")
            raise ConfigError(f"field '{f.name}': expected a boolean, got {v!r}")
        if f.type is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if f.type is int and isinstance(v, int) and not isinstance(v, bool):
            return v
        if f.type is str and isinstance(v, str):
            return v
        if isinstance(v, str) and f.type in (int, float):
            try:
                return f.type(v)
            except ValueError:
                pass
        raise ConfigError(f"field '{f.name}': expected {f.type.__name__}, got {v!r}")

    if f.many:
        if value is None:
            return []
        if not isinstance(value, (list, tuple)):
            value = [value]
        out = [one(v) for v in value]
    else:
        if isinstance(value, (list, dict)):
            raise ConfigError(f"field '{f.name}': expected a single {f.type.__name__}")
        out = one(value)
    if f.choices is not None and out is not None:
        for v in (out if f.many else [out]):
            if v not in f.choices:
                raise ConfigError(f"field '{f.name}': {v!r} not one of {list(f.choices)}")
    return out


def load_config_file(path: str) -> dict:
    import yaml
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} not found")
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)  # YAML is a superset of JSON
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON: {e}") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults < config file < flags, validated against the command schema."""
    schema = _schema(command)
    file_values = dict(file_values)
    declared = file_values.pop("command", command)
    if declared != command:
        raise ConfigError(f"config is for command {declared!r}, not {command!r}")
    for key in file_values:
        if key not in schema:
            raise ConfigError(f"unknown config field '{key}' for command {command!r}")
    cfg = {}
    for name, f in schema.items():
        if flag_values.get(name) is not None:
            value = flag_values[name]
        elif name in file_values:
            value = file_values[name]
        else:
            value = list(f.default) if isinstance(f.default, list) else f.default
        cfg[name] = _coerce(f, value)
        if f.required and (cfg[name] is None or cfg[name] == []):
            raise ConfigError(f"missing required field '{name}'")
    return cfg


def snapshot(cfg: dict, command: str) -> str:
    os.makedirs(cfg["output_dir"], exist_ok=True)
    path = os.path.join(cfg["output_dir"], "resolved_config.json")
    with open(path, "w") as f:
        json.dump({"command": command, **cfg}, f, indent=2, sort_keys=True)
    return path


# --- shared helpers --------------------------------------------------------------

class JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"time": round(record.created, 3), "level": record.levelname,
               "logger": record.name, "message": record.getMessage()}
        extra = getattr(record, "fields", None)
        if extra:
            doc.update(extra)
        return json.dumps(doc, default=str)


def _setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("speechprior")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _load_encoder(spec: str, cfg: dict):
    from .encoder import load_pretrained, require_asset
    if spec == "pretrained":
        spec = require_asset(PRETRAINED_NAME, cfg.get("asset_dir"))
    elif not os.path.exists(spec) and spec.endswith(".pt"):
        raise AssetError(f"checkpoint {spec!r} not found")
    return load_pretrained(spec, seed=cfg["seed"])


def _mixture_spec(cfg: dict):
    from .simulate import MixtureSpec
    keys = [f.name for f in fields(MixtureSpec) if f.name in cfg]
    return MixtureSpec(**{k: cfg[k] for k in keys})


def _split_manifests(paths: List[str]):
    from .audio import read_manifest
    records = [r for p in paths for r in read_manifest(p)]
    by = {k: [r for r in records if r.kind == k] for k in ("clean", "noise", "rir")}
    if not by["clean"] or not by["noise"]:
        raise DataError("manifests must contain at least one clean and one noise record")
    return by


def _training_data(cfg: dict):
    """Indexable mixtures: on-the-fly from manifests, or a fixed synthetic set."""
    if cfg["manifests"]:
        from .simulate import MixtureSource
        by = _split_manifests(cfg["manifests"])
        return MixtureSource(by["clean"], by["noise"], by["rir"], _mixture_spec(cfg), seed=cfg["seed"])
    from .toydata import toy_mixtures
    return toy_mixtures(cfg["toy_items"], cfg["crop_seconds"], seed=cfg["seed"],
                        rir_probability=cfg["rir_probability"])


def _resume_path(cfg: dict, last_name: str) -> Optional[str]:
    if cfg["resume"] is None:
        return None
    if cfg["resume"] == "auto":
        p = os.path.join(cfg["output_dir"], last_name)
        return p if os.path.exists(p) else None
    if not os.path.exists(cfg["resume"]):
        raise ConfigError(f"field 'resume': {cfg['resume']!r} does not exist")
    return cfg["resume"]


def _log_step(every: int = 10) -> Callable[[dict], None]:
    def on_step(record):
        if record["step"] % every == 0:
            log.info("step", extra={"fields": {k: v for k, v in record.items()}})
    return on_step


def _collect_wavs(inputs: List[str]) -> List[str]:
    out = []
    for p in inputs:
        if os.path.isdir(p):
            out.extend(sorted(glob.glob(os.path.join(p, "*.wav"))))
        elif os.path.exists(p):
            out.append(p)
        else:
            raise DataError(f"input {p!r} does not exist")
    if not out:
        raise DataError("no input wav files")
    names = [os.path.basename(p) for p in out]
    if len(set(names)) != len(names):
        raise DataError("input files share basenames; outputs would collide")
    return out


# --- commands --------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> dict:
    from .simulate import MixtureSource, export_test_set
    from .toydata import write_toy_corpus
    paths = list(cfg["manifests"])
    if not paths:
        if not cfg["toy_corpus"]:
            raise ConfigError("give 'manifests' or set 'toy_corpus: true'")
        corpus = os.path.join(cfg["output_dir"], "corpus")
        paths = [write_toy_corpus(corpus, seconds=max(1.0, cfg["crop_seconds"]), seed=cfg["seed"])]
    by = _split_manifests(paths)
    source = MixtureSource(by["clean"], by["noise"], by["rir"], _mixture_spec(cfg), seed=cfg["seed"])
    out_dir = os.path.join(cfg["output_dir"], "test_set")
    manifest = export_test_set(source, cfg["n_samples"], out_dir, prefix=cfg["prefix"])
    log.info("wrote test set", extra={"fields": {"manifest": manifest, "n": cfg["n_samples"]}})
    return {"manifest": manifest}


def cmd_train_drd(cfg: dict) -> dict:
    import torch
    from .drd import DrdConfig, PseudoLabeler, fit_pseudo_labels, init_student, train_drd
    from .encoder import DEFAULT_MASK_RATIO, DEFAULT_MASK_SPAN
    teacher = _load_encoder(cfg["teacher"], cfg)
    dcfg = DrdConfig(
        student_layer=cfg["student_layer"], teacher_layer=cfg["teacher_layer"],
        objective=cfg["objective"], total_steps=cfg["total_steps"], batch_size=cfg["batch_size"],
        lr_max=cfg["lr_max"], warmup_fraction=cfg["warmup_fraction"],
        weight_decay=cfg["weight_decay"], grad_clip=cfg["grad_clip"],
        mask_ratio=DEFAULT_MASK_RATIO if cfg["mask_ratio"] is None else cfg["mask_ratio"],
        mask_span=DEFAULT_MASK_SPAN if cfg["mask_span"] is None else cfg["mask_span"],
        train_cnn=cfg["train_cnn"], seed=cfg["seed"])
    data = _training_data(cfg)
    labeler = None
    if dcfg.objective != "KD":
        layer = cfg["label_layer"] or teacher.cfg.n_layers
        n_fit = min(len(data), 16) if hasattr(data, "__len__") else 16
        with torch.no_grad():
            feats = [teacher(torch.as_tensor(data[i].target, dtype=torch.float32).unsqueeze(0),
                             upto=layer).layers[layer][0] for i in range(n_fit)]
        codebook, _ = fit_pseudo_labels(feats, cfg["n_clusters"], np.random.default_rng(cfg["seed"]))
        labeler = PseudoLabeler(teacher, layer, codebook)
    torch.manual_seed(cfg["seed"])
    student = init_student(teacher, scratch=cfg["scratch"], seed=cfg["seed"])
    out = cfg["output_dir"]
    _, steps = train_drd(student, teacher, data, dcfg, labeler=labeler, max_steps=cfg["max_steps"],
                         checkpoint_dir=out, checkpoint_every=cfg["checkpoint_every"],
                         resume_from=_resume_path(cfg, "drd_last.pt"),
                         log_path=os.path.join(out, "train_log.jsonl"), on_step=_log_step())
    last = os.path.join(out, "drd_last.pt")
    log.info("finished", extra={"fields": {"checkpoint": last, "steps_run": len(steps)}})
    return {"checkpoint": last, "steps": len(steps)}


def cmd_train_vocoder(cfg: dict) -> dict:
    import torch
    from .fusion import Fusion, FusionConfig
    from .vocoder import (Discriminators, Vocoder, VocoderConfig, VocoderTrainConfig,
                          toy_discriminators, toy_vocoder_config, train_vocoder)
    encoder = _load_encoder(cfg["encoder"], cfg)
    dim = encoder.cfg.model_dim
    torch.manual_seed(cfg["seed"])
    fusion = Fusion(FusionConfig(cfg["fusion"], dim, dim, n_heads=cfg["fusion_heads"]))
    if cfg["vocoder"] == "toy":
        vocoder = Vocoder(toy_vocoder_config(fusion.out_dim))
    else:
        vocoder = Vocoder(VocoderConfig(in_dim=fusion.out_dim, hop=encoder.hop, fft_size=4 * encoder.hop))
    disc_kind = cfg["discriminators"] or cfg["vocoder"]
    disc = toy_discriminators() if disc_kind == "toy" else Discriminators()
    tcfg = VocoderTrainConfig(total_steps=cfg["total_steps"], batch_size=cfg["batch_size"],
                              lr_max=cfg["lr_max"], warmup_fraction=cfg["warmup_fraction"],
                              weight_decay=cfg["weight_decay"], grad_clip=cfg["grad_clip"],
                              loss_weights=cfg["loss_weights"], seed=cfg["seed"])
    out = cfg["output_dir"]
    _, steps = train_vocoder(vocoder, fusion, encoder, _training_data(cfg), tcfg, discriminators=disc,
                             max_steps=cfg["max_steps"], checkpoint_dir=out,
                             checkpoint_every=cfg["checkpoint_every"],
                             resume_from=_resume_path(cfg, "vocoder_last.pt"),
                             log_path=os.path.join(out, "train_log.jsonl"), on_step=_log_step())
    last = os.path.join(out, "vocoder_last.pt")
    log.info("finished", extra={"fields": {"checkpoint": last, "steps_run": len(steps)}})
    return {"checkpoint": last, "steps": len(steps)}


def cmd_enhance(cfg: dict) -> dict:
    import torch
    from .audio import read_wav, write_wav
    from .fusion import Fusion, FusionConfig
    from .vocoder.train import EnhancementModel, load_vocoder_checkpoint, match_length
    encoder = _load_encoder(cfg["encoder"], cfg).eval()
    if not os.path.exists(cfg["vocoder"]):
        raise AssetError(f"vocoder checkpoint {cfg['vocoder']!r} not found")
    fusion, vocoder, _ = load_vocoder_checkpoint(cfg["vocoder"])
    scheme = cfg["fusion"]
    if scheme is not None and scheme != fusion.cfg.scheme:
        if scheme != "none":
            raise ConfigError(f"field 'fusion': checkpoint was trained with {fusion.cfg.scheme!r}; "
                              "only 'none' (phonetic-only) may override it")
        fusion = Fusion(FusionConfig("none", fusion.cfg.d_phonetic, fusion.cfg.d_acoustic))
        if fusion.out_dim != vocoder.cfg.in_dim:
            raise ConfigError("phonetic-only routing does not fit this vocoder's input width")
    model = EnhancementModel(encoder, fusion, vocoder).eval()
    hop = encoder.hop
    out_dir = cfg["output_dir"]
    written = []
    for path in _collect_wavs(cfg["inputs"]):
        x, _ = read_wav(path)
        if len(x) < hop or encoder.cfg.n_frames(len(x)) < 1:
            raise DataError(f"{path}: {len(x)} samples is shorter than one encoder frame")
        with torch.no_grad():
            y = model(torch.as_tensor(x, dtype=torch.float32).unsqueeze(0))
        y = match_length(y, (len(x) // hop) * hop)[0].numpy()
        if not np.isfinite(y).all():
            from .errors import NumericError
            raise NumericError(f"{path}: non-finite samples in enhanced output")
        dst = os.path.join(out_dir, os.path.basename(path))
        write_wav(dst, y)
        written.append(dst)
    log.info("enhanced", extra={"fields": {"n": len(written), "fusion": fusion.cfg.scheme}})
    return {"outputs": written}


def _probe_audio(cfg: dict):
    """(ids, clean waveforms) from a manifest or synthetic speech."""
    if cfg["manifest"]:
        from .audio import read_manifest, read_wav
        recs = read_manifest(cfg["manifest"], kind="clean")
        if not recs:
            raise DataError(f"{cfg['manifest']}: no clean records")
        ids = [os.path.splitext(os.path.basename(r.audio_path))[0] for r in recs]
        return ids, [read_wav(r.audio_path)[0] for r in recs]
    from .toydata import toy_speech
    rng = np.random.default_rng(cfg["seed"])
    return [f"toy{i}" for i in range(cfg["toy_items"])], [toy_speech(16000, rng) for _ in range(cfg["toy_items"])]


def cmd_probe(cfg: dict) -> dict:
    import torch
    from . import probes
    from .encoder import DEFAULT_MASK_RATIO, DEFAULT_MASK_SPAN, make_mask
    model = _load_encoder(cfg["checkpoint"], cfg).eval()
    ids, wavs = _probe_audio(cfg)
    n = model.cfg.n_layers
    layer = n if cfg["layer"] is None else cfg["layer"]
    tens = [torch.as_tensor(w, dtype=torch.float32).unsqueeze(0) for w in wavs]
    name = cfg["probe"]
    with torch.no_grad():
        if name == "rfs":
            if cfg["teacher"] is None:
                raise ConfigError("missing required field 'teacher' for the rfs probe")
            teacher = _load_encoder(cfg["teacher"], cfg).eval()
            a = [model(t).layers[layer][0] for t in tens]
            b = [teacher(t).layers[layer][0] for t in tens]
            report = probes.rfs(a, b).report("rfs", cfg)
        elif name == "orthogonality":
            la = 1 if cfg["layer"] is None else cfg["layer"]
            lb = n if cfg["layer_b"] is None else cfg["layer_b"]
            report = probes.layer_orthogonality([model(t) for t in tens], la, lb).report(
                f"orthogonality_{la}_{lb}", cfg)
        elif name == "mrs":
            ratio = DEFAULT_MASK_RATIO if cfg["mask_ratio"] is None else cfg["mask_ratio"]
            span = DEFAULT_MASK_SPAN if cfg["mask_span"] is None else cfg["mask_span"]
            rng = np.random.default_rng(cfg["seed"])
            masks = [make_mask(model.cfg.n_frames(len(w)), ratio, span, rng) for w in wavs]
            if any(len(m) == 0 for m in masks):
                raise DataError(f"empty mask (mask_ratio={ratio}): masked reconstruction score is undefined")
            report = probes.mrs(model, [t for t in tens], masks, layer).report("mrs", cfg)
        else:
            feats = [model(t).layers[layer][0].numpy() for t in tens]
            codebook = probes.kmeans_fit(feats, cfg["n_clusters"], np.random.default_rng(cfg["seed"]))
            units = [codebook.assign(f) for f in feats]
            if cfg["alignments"] in (None, "self"):
                if cfg["alignments"] is None:
                    raise ConfigError("missing required field 'alignments' for the pnmi probe")
                phones = units
            else:
                ali = probes.read_alignments(cfg["alignments"])
                missing = [i for i in ids if i not in ali]
                if missing:
                    raise DataError(f"no alignment for utterance {missing[0]!r}")
                phones = [ali[i] for i in ids]
            ph, un = [], []
            for p, u in zip(phones, units):
                m = min(len(p), len(u))
                if abs(len(p) - len(u)) > 2:
                    raise DataError(f"alignment has {len(p)} frames, features {len(u)}")
                ph.append(np.asarray(p[:m]))
                un.append(np.asarray(u[:m]))
            table = probes.contingency_table(np.concatenate(ph), np.concatenate(un))
            report = {"metric": "pnmi", "value": probes.pnmi(table), "n_frames": int(table.sum()),
                      "config_hash": probes.config_hash(cfg)}
    path = os.path.join(cfg["output_dir"], "probe_report.json")
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    log.info("probe", extra={"fields": report})
    return {"report": path, **report}


def cmd_evaluate(cfg: dict) -> dict:
    from .evaluation import evaluate, load_client_config
    clients = load_client_config(cfg["clients"]) if cfg["clients"] else {}
    if not os.path.isdir(cfg["enhanced_dir"]):
        raise DataError(f"enhanced_dir {cfg['enhanced_dir']!r} is not a directory")
    if not os.path.exists(cfg["manifest"]):
        raise DataError(f"manifest {cfg['manifest']!r} not found")
    report = evaluate(cfg["enhanced_dir"], cfg["manifest"], cfg["metrics"], clients,
                      config={k: cfg[k] for k in ("metrics", "clients")})
    path = os.path.join(cfg["output_dir"], "report.json")
    report.save(path)
    log.info("evaluated", extra={"fields": {"report": path, "aggregates": report.aggregates,
                                            "skipped": report.skipped}})
    return {"report": path}


COMMANDS = {
    "simulate": cmd_simulate,
    "train-drd": cmd_train_drd,
    "train-vocoder": cmd_train_vocoder,
    "enhance": cmd_enhance,
    "probe": cmd_probe,
    "evaluate": cmd_evaluate,
}


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechprior", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        p.add_argument("--config", help="YAML or JSON config file; flags override its fields")
        for f in GLOBAL_FIELDS + SCHEMAS[name]:
            kw = dict(dest=f.name, default=None, help=f.help or None)
            if f.type is bool:
                p.add_argument(f"--{f.name}", action=argparse.BooleanOptionalAction, **kw)
            else:
                # values are type-checked by the schema so errors name the field
                p.add_argument(f"--{f.name}", nargs="+" if f.many else None, **kw)
    return parser


def run(argv: Optional[List[str]] = None) -> dict:
    """Parse, resolve, snapshot and run; raises package errors."""
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_config(args.command, file_values, flags)
    _setup_logging(cfg["log_level"])
    if cfg["deterministic"]:
        from .drd import set_deterministic
        set_deterministic(True)
    if cfg["asset_dir"]:
        os.environ["SPEECHPRIOR_ASSETS"] = cfg["asset_dir"]
    snapshot(cfg, args.command)
    t0 = time.time()
    result = COMMANDS[args.command](cfg)
    log.info("done", extra={"fields": {"command": args.command, "seconds": round(time.time() - t0, 2)}})
    return result


def main(argv: Optional[List[str]] = None) -> int:
    try:
        run(argv)
        return 0
    except SpeechPriorError as e:
        print(f"speechprior: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"speechprior: error: {e}", file=sys.stderr)
        return DataError.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
