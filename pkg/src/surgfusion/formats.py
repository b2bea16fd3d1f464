"""On-disk formats: feature files, the dataset index, checkpoints and experiment configs."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import os
import struct
from io import StringIO
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import PAPER_MODEL, ModelConfig
from .data import MODALITIES, VideoRecord
from .nn import Module
from .synthdata import SynthConfig
from .tensor import ConfigError
from .training import PAPER_TRAIN, PhaseConfig, TrainConfig

MAGIC = b"SFN1"
_HEADER = struct.Struct("<4sII")
INDEX_COLUMNS = ("video_id", "user_id", "supertrial_id", "task", "raw_label", "rgb_path", "flow_path", "mask_path")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# --------------------------------------------------------------------------
# feature files


def write_features(path: str, x: np.ndarray) -> None:
    """``SFN1``, u32 T, u32 d, then T*d float32 values, all little-endian, row-major."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise FormatError(f"feature arrays must be 2-D, got {x.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, x.shape[0], x.shape[1]))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, t, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = blob[_HEADER.size:]
    if len(body) != 4 * t * d:
        raise FormatError(f"{path}: expected {t}x{d} float32 values, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float64)


# --------------------------------------------------------------------------
# datasets


def save_dataset(records: Iterable[VideoRecord], out_dir: str, index_name: str = "index.csv") -> str:
    """Write one feature file per (video, modality) plus the index; returns the index path."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    index = os.path.join(out_dir, index_name)
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for r in records:
            rel = {}
            for m in MODALITIES:
                rel[m] = os.path.join("features", f"{r.video_id}_{m}.sfn")
                write_features(os.path.join(out_dir, rel[m]), r.features[m])
            w.writerow([r.video_id, r.user_id, r.supertrial_id, r.task, repr(float(r.raw_label))]
                       + [rel[m] for m in MODALITIES])
    return index


def load_dataset(index_path: str) -> list[VideoRecord]:
    """Records from an index file; relative feature paths resolve against the index directory."""
    if not os.path.isfile(index_path):
        raise FileNotFoundError(f"dataset index not found: {index_path}")
    base = os.path.dirname(os.path.abspath(index_path))
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in INDEX_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{index_path}: index lacks columns {missing}")
        records = []
        for row in reader:
            paths = {m: os.path.join(base, row[f"{m}_path"]) for m in MODALITIES}
            try:
                label = float(row["raw_label"])
            except ValueError as e:
                raise FormatError(f"{index_path}: bad raw_label for {row['video_id']!r}") from e
            records.append(VideoRecord(
                video_id=row["video_id"],
                user_id=row["user_id"] or None,
                supertrial_id=_maybe_int(row["supertrial_id"]),
                task=row["task"],
                raw_label=label,
                features={m: read_features(p) for m, p in paths.items()},
                paths=paths,
            ))
    if len({r.video_id for r in records}) != len(records):
        raise FormatError(f"{index_path}: duplicate video ids")
    return records


def _maybe_int(s: str):
    if s == "":
        return None
    return int(s) if s.lstrip("-").isdigit() else s


def tree_digest(root: str) -> str:
    """SHA-256 over relative paths and contents of every file below ``root``."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode() + b"\0")
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(module: Module, out_dir: str) -> str:
    """One SFN1 file per named tensor (flattened to 2-D) and ``manifest.json`` with the true shapes."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for name, arr in module.state_dict().items():
        fname = name.replace("/", "_") + ".sfn"
        flat = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(-1, arr.shape[-1])
        write_features(os.path.join(out_dir, fname), flat)
        manifest.append({"name": name, "file": fname, "shape": list(arr.shape)})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"format": "SFN1", "tensors": manifest}, fh, indent=1)
    return path


def load_checkpoint(module: Module, ckpt_dir: str) -> None:
    path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    state = {}
    for entry in manifest["tensors"]:
        arr = read_features(os.path.join(ckpt_dir, entry["file"]))
        state[entry["name"]] = arr.reshape(entry["shape"])
    module.load_state_dict(state)


def diff_checkpoints(dir_a: str, dir_b: str) -> list[str]:
    """Names of tensors whose files differ byte-for-byte (or exist on one side only)."""
    def files(d):
        with open(os.path.join(d, "manifest.json")) as fh:
            return {e["name"]: e["file"] for e in json.load(fh)["tensors"]}

    fa, fb = files(dir_a), files(dir_b)
    changed = sorted(set(fa) ^ set(fb))
    for name in sorted(set(fa) & set(fb)):
        with open(os.path.join(dir_a, fa[name]), "rb") as x, open(os.path.join(dir_b, fb[name]), "rb") as y:
            if x.read() != y.read():
                changed.append(name)
    return changed


# --------------------------------------------------------------------------
# experiment configs


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: str | None = None
    scheme: str = "kfold:4"
    out: str = "out"
    seed: int = 0
    jobs: int = 1
    eval_every: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.synth.d != self.model.d:
            raise ConfigError(f"synth.d ({self.synth.d}) must equal model.d ({self.model.d})")


PROFILES = ("desk", "paper")


def profile(name: str) -> ExperimentConfig:
    """``desk``: d=64, 100+100 epochs. ``paper``: d=256, K=10, H=2, 300+300 epochs, batch 16."""
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILES}")
    cfg = ExperimentConfig()
    if name == "paper":
        for k, v in PAPER_MODEL.items():
            setattr(cfg.model, k, v)
        cfg.synth.d = cfg.model.d
        for ph in (cfg.train.phase1, cfg.train.phase2):
            ph.epochs, ph.batch_size = PAPER_TRAIN["epochs"], PAPER_TRAIN["batch_size"]
    return cfg


_OPTIONAL_TYPES = {("train", "segments"): int, ("train", "grad_clip"): float, ("experiment", "dataset"): str}


def _coerce(section: str, key: str, current, raw: str):
    if raw.strip().lower() in ("none", "") and (section, key) in _OPTIONAL_TYPES:
        return None
    typ = _OPTIONAL_TYPES.get((section, key)) if current is None else type(current)
    try:
        if typ is bool:
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        return typ(raw.strip())
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from e


def _apply(section: str, target, items) -> None:
    names = {f.name for f in dataclasses.fields(target)}
    for key, raw in items:
        if key not in names or isinstance(getattr(target, key), PhaseConfig):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        setattr(target, key, _coerce(section, key, getattr(target, key), raw))


def load_config(path: str | None, profile_name: str = "desk") -> ExperimentConfig:
    """Profile defaults overridden by an INI-style file with sections
    ``[experiment]``, ``[model]``, ``[train]``, ``[phase1]``, ``[phase2]`` and ``[synth]``."""
    cfg = profile(profile_name)
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    targets = {"experiment": cfg, "model": cfg.model, "train": cfg.train, "phase1": cfg.train.phase1,
               "phase2": cfg.train.phase2, "synth": cfg.synth}
    for section in cp.sections():
        if section not in targets:
            raise ConfigError(f"{path}: unknown section [{section}]")
        items = cp.items(section)
        if section == "experiment":
            for key, _ in items:
                if key in ("model", "train", "synth"):
                    raise ConfigError(f"[experiment] unknown key {key!r}")
        _apply(section, targets[section], items)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """The config as an INI text that :func:`load_config` reads back to an equal config."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str

    def put(section, obj, skip=()):
        cp[section] = {f.name: "none" if getattr(obj, f.name) is None else str(getattr(obj, f.name))
                       for f in dataclasses.fields(obj) if f.name not in skip}

    put("experiment", cfg, skip=("model", "train", "synth"))
    put("model", cfg.model)
    put("train", cfg.train, skip=("phase1", "phase2"))
    put("phase1", cfg.train.phase1)
    put("phase2", cfg.train.phase2)
    put("synth", cfg.synth)
    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()
