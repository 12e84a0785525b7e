"""Datasets, synthetic generators, windowing and the on-disk binary formats.

Tensor file (``.gmds``), all integers little-endian::

    bytes 0-3    magic b"GMDS"
    bytes 4-7    uint32 format version (1)
    bytes 8-11   uint32 ndim
    bytes 12-15  uint32 reserved, always 0
    ndim x uint64 shape
    prod(shape) x float64 payload, row-major, little-endian

A dataset directory holds ``manifest.json`` plus ``{split}.{modality}.gmds``
and ``{split}.labels.gmds`` per split.

Checkpoint file (``.gmmb``)::

    bytes 0-3    magic b"GMMB"
    bytes 4-7    uint32 format version (1)
    bytes 8-15   uint64 header length H
    H bytes      UTF-8 JSON header {"tensors": [...], "metadata": {...}}
    payload      concatenated little-endian float64 tensors

Each header tensor entry is ``{"name", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the payload.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (CompatibilityError, CompletenessError, ContractError, DataError, DomainError,
                     FormatError, ManifestMissingError, NonFiniteError, ShapeMismatchError,
                     VersionError)
from .model import GramMambaModel, ModalitySpec, ModelConfig

DATASET_MAGIC = b"GMDS"
CHECKPOINT_MAGIC = b"GMMB"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class Split:
    arrays: dict  # modality name -> [W, L, C]
    labels: np.ndarray  # [W] int64 or [W, d] float64
    available: list  # modality names, declaration order

    @property
    def num_windows(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class Dataset:
    modalities: list
    splits: dict
    mode: str = "classification"
    n_classes: int = 0  # classes, or target width for regression

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def validate(self) -> None:
        names = self.modality_names
        for sname, split in self.splits.items():
            sizes = {split.arrays[n].shape[0] for n in names}
            if len(sizes) != 1:
                raise ShapeMismatchError(f"{sname}: modalities disagree on window count {sorted(sizes)}")
            if split.labels.shape[0] != sizes.pop():
                raise ShapeMismatchError(f"{sname}: label count does not match window count")
            for m in self.modalities:
                arr = split.arrays[m.name]
                if arr.ndim != 3 or arr.shape[2] != m.channels:
                    raise ShapeMismatchError(f"{sname}.{m.name}: shape {arr.shape} vs {m.channels} channels")
            if self.mode == "classification":
                if split.labels.size and (split.labels.min() < 0 or split.labels.max() >= self.n_classes):
                    raise ShapeMismatchError(f"{sname}: class index outside [0, {self.n_classes})")

    def copy(self) -> "Dataset":
        return copy.deepcopy(self)


# ---------------------------------------------------------------- windowing


def window(series, L: int, stride: int) -> np.ndarray:
    """Contiguous windows ``[num_windows, L, C]`` of a ``[T, C]`` series."""
    x = np.asarray(getattr(series, "data", series), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"window: expected [T, C], got {x.shape}")
    if stride < 1 or L < 1:
        raise DomainError("window: L and stride must be positive")
    T_len = x.shape[0]
    if T_len < L:
        raise DataError(f"window: series length {T_len} shorter than window {L}")
    count = (T_len - L) // stride + 1
    idx = np.arange(count)[:, None] * stride + np.arange(L)[None, :]
    return x[idx]


# ---------------------------------------------------------------- synthetic data


def _split_indices(n: int, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_tr = int(round(fractions[0] * n))
    n_va = int(round(fractions[1] * n))
    return [perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]]


LATENT_DIM = 4


def _latent(theta: np.ndarray, psi) -> np.ndarray:
    """Four-channel harmonic signature ``[W, L, 4]``."""
    return np.stack([np.sin(theta), np.cos(theta),
                     np.sin(2 * theta + psi), np.cos(2 * theta + psi)], axis=-1)


def _channel_map(rng: np.random.Generator, channels: int) -> np.ndarray:
    """Random ``[LATENT_DIM, channels]`` map with singular values in [0.7, 1.3]."""
    U, _, Vt = np.linalg.svd(rng.normal(size=(LATENT_DIM, channels)), full_matrices=False)
    return U @ np.diag(rng.uniform(0.7, 1.3, U.shape[1])) @ Vt


def generate_synthetic(n_classes: int = 3, n_modalities: int = 2, L: int = 48, channels=3,
                       samples_per_class: int = 100, noise_sigma: float = 0.3,
                       cross_modal_coupling: float = 0.8, seed: int = 0,
                       modality_names: Optional[Sequence[str]] = None,
                       sample_rate: float = 100.0, phase_jitter: float = 0.3,
                       fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """Multimodal classification data driven by one class-dependent latent.

    Class ``c`` owns a base frequency and phase. Every modality sees the shared
    latent (weight ``cross_modal_coupling``) mixed with a private
    class-independent latent, through its own fixed random channel map, plus a
    random-phase carrier and Gaussian noise.
    """
    if min(n_classes, n_modalities, L, samples_per_class) < 1:
        raise DomainError("generate_synthetic: counts must be positive")
    if noise_sigma < 0 or not 0.0 <= cross_modal_coupling <= 1.0:
        raise DomainError("generate_synthetic: need noise_sigma >= 0 and coupling in [0, 1]")
    chans = [channels] * n_modalities if np.isscalar(channels) else list(channels)
    if len(chans) != n_modalities or min(chans) < 1:
        raise DomainError("generate_synthetic: one positive channel count per modality")
    names = list(modality_names) if modality_names else [f"M{i}" for i in range(n_modalities)]
    rng = np.random.default_rng(seed)
    t = np.arange(L) / L
    freqs = 1.25 + 0.75 * np.arange(n_classes)
    phases = rng.uniform(0, 2 * np.pi, n_classes)
    psis = rng.uniform(0, 2 * np.pi, n_classes)
    maps = [_channel_map(rng, c) for c in chans]
    carrier_f = rng.uniform(3.0, 6.0, n_modalities)
    carrier_w = [rng.normal(size=c) * 0.3 for c in chans]

    n = n_classes * samples_per_class
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    amp = rng.uniform(0.8, 1.2, n)
    jitter = rng.uniform(-phase_jitter, phase_jitter, n)
    theta = 2 * np.pi * freqs[labels, None] * t[None, :] + (phases[labels] + jitter)[:, None]
    shared = _latent(theta, psis[labels, None]) * amp[:, None, None]
    arrays = {}
    for m, name in enumerate(names):
        pf = rng.uniform(0.5, 4.0, n)
        pth = 2 * np.pi * pf[:, None] * t[None, :] + rng.uniform(0, 2 * np.pi, n)[:, None]
        private = _latent(pth, rng.uniform(0, 2 * np.pi, n)[:, None])
        mixed = cross_modal_coupling * shared + (1.0 - cross_modal_coupling) * private
        carrier = np.sin(2 * np.pi * carrier_f[m] * t[None, :] + rng.uniform(0, 2 * np.pi, n)[:, None])
        x = mixed @ maps[m] + carrier[:, :, None] * carrier_w[m]
        x = x + noise_sigma * rng.normal(size=x.shape)
        arrays[name] = x
    parts = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        parts.append([idx[s] for s in _split_indices(idx.size, rng, fractions)])
    splits = {}
    for si, sname in enumerate(SPLITS):
        idx = np.sort(np.concatenate([p[si] for p in parts]))
        splits[sname] = Split({nm: arrays[nm][idx].copy() for nm in names}, labels[idx].astype(np.int64),
                              list(names))
    mods = [ModalitySpec(nm, c, sample_rate) for nm, c in zip(names, chans)]
    ds = Dataset(mods, splits, "classification", n_classes)
    ds.validate()
    return ds


def generate_positioning(n_modalities: int = 3, L: int = 32, channels=4, n_samples: int = 600,
                         noise_sigma: float = 0.1, seed: int = 0,
                         modality_names: Optional[Sequence[str]] = None,
                         sample_rate: float = 100.0, fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """2-D positioning data: each modality senses the position through its own
    static and oscillating channel responses."""
    if min(n_modalities, L, n_samples) < 1:
        raise DomainError("generate_positioning: counts must be positive")
    chans = [channels] * n_modalities if np.isscalar(channels) else list(channels)
    names = list(modality_names) if modality_names else [f"M{i}" for i in range(n_modalities)]
    rng = np.random.default_rng(seed)
    t = np.arange(L) / L
    pos = rng.uniform(-1.0, 1.0, size=(n_samples, 2))
    arrays = {}
    for m, name in enumerate(names):
        c = chans[m]
        static = rng.normal(size=(2, c))
        swing = rng.normal(size=(2, c)) * 0.5
        f = rng.uniform(1.0, 4.0)
        osc = np.sin(2 * np.pi * f * t[None, :] + rng.uniform(0, 2 * np.pi, n_samples)[:, None])
        x = (pos @ static)[:, None, :] + osc[:, :, None] * (pos @ swing)[:, None, :]
        arrays[name] = x + noise_sigma * rng.normal(size=x.shape)
    idx_parts = _split_indices(n_samples, rng, fractions)
    splits = {}
    for sname, idx in zip(SPLITS, idx_parts):
        idx = np.sort(idx)
        splits[sname] = Split({nm: arrays[nm][idx].copy() for nm in names}, pos[idx].copy(), list(names))
    mods = [ModalitySpec(nm, c, sample_rate) for nm, c in zip(names, chans)]
    ds = Dataset(mods, splits, "regression", 2)
    ds.validate()
    return ds


# ---------------------------------------------------------------- tensor files


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: refusing to write non-finite values")


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = DATASET_MAGIC + struct.pack("<III", DATASET_VERSION, arr.ndim, 0)
    shape = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + shape + arr.astype("<f8").tobytes(order="C")


def decode_array(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{source}: bad magic bytes")
    version, ndim, _ = struct.unpack("<III", buf[4:16])
    if version != DATASET_VERSION:
        raise VersionError(f"{source}: unsupported version {version}")
    end = 16 + 8 * ndim
    if len(buf) < end:
        raise FormatError(f"{source}: truncated shape vector")
    shape = struct.unpack(f"<{ndim}Q", buf[16:end])
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - end != 8 * count:
        raise ShapeMismatchError(f"{source}: payload holds {(len(buf) - end) // 8} values, shape {shape} needs {count}")
    return np.frombuffer(buf, dtype="<f8", offset=end, count=count).astype(np.float64).reshape(shape)


def write_array(path, arr: np.ndarray) -> None:
    _check_finite(np.asarray(arr, dtype=np.float64), str(path))
    Path(path).write_bytes(encode_array(arr))


def read_array(path) -> np.ndarray:
    path = Path(path)
    return decode_array(path.read_bytes(), str(path))


# ---------------------------------------------------------------- dataset dirs


def save_dataset(ds: Dataset, path) -> None:
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "GMDS", "version": DATASET_VERSION, "mode": ds.mode, "n_classes": ds.n_classes,
        "modalities": [{"name": m.name, "channels": m.channels, "sample_rate": m.sample_rate}
                       for m in ds.modalities],
        "splits": {},
    }
    for sname, split in ds.splits.items():
        first = split.arrays[ds.modality_names[0]]
        manifest["splits"][sname] = {
            "num_windows": split.num_windows, "length": int(first.shape[1]),
            "available": list(split.available),
            "label_shape": list(split.labels.shape),
        }
        for m in ds.modalities:
            write_array(root / f"{sname}.{m.name}.gmds", split.arrays[m.name])
        write_array(root / f"{sname}.labels.gmds", split.labels.astype(np.float64))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ManifestMissingError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format") != "GMDS":
        raise FormatError(f"{mpath}: not a GMDS manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(f"{mpath}: unsupported version {manifest.get('version')}")
    mods = [ModalitySpec(m["name"], int(m["channels"]), float(m.get("sample_rate", 100.0)))
            for m in manifest["modalities"]]
    mode = manifest["mode"]
    expected = [root / f"{s}.{m.name}.gmds" for s in manifest["splits"] for m in mods]
    expected += [root / f"{s}.labels.gmds" for s in manifest["splits"]]
    absent = [p.name for p in expected if not p.exists()]
    if absent:
        raise CompletenessError(f"{root}: manifest lists files that are missing: {absent}")
    splits = {}
    for sname, info in manifest["splits"].items():
        arrays = {}
        for m in mods:
            arr = read_array(root / f"{sname}.{m.name}.gmds")
            want = (info["num_windows"], info["length"], m.channels)
            if arr.shape != want:
                raise ShapeMismatchError(f"{sname}.{m.name}.gmds: shape {arr.shape}, manifest says {want}")
            arrays[m.name] = arr
        labels = read_array(root / f"{sname}.labels.gmds")
        if list(labels.shape) != list(info["label_shape"]):
            raise ShapeMismatchError(f"{sname}.labels.gmds: shape {labels.shape}, manifest says {info['label_shape']}")
        if mode == "classification":
            if not np.all(labels == np.round(labels)):
                raise FormatError(f"{sname}.labels.gmds: class labels must be integral")
            labels = labels.astype(np.int64)
        splits[sname] = Split(arrays, labels, list(info["available"]))
    ds = Dataset(mods, splits, mode, int(manifest["n_classes"]))
    ds.validate()
    return ds


# ---------------------------------------------------------------- checkpoints


def _encode_checkpoint(named: dict, metadata: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr, name)
        raw = arr.astype("<f8").tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "metadata": metadata}, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)


def _decode_checkpoint(buf: bytes, source: str) -> tuple[dict, dict]:
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic bytes")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from exc
    payload = memoryview(buf)[16 + hlen:]
    pos = 0
    named = {}
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] != pos or e["nbytes"] != 8 * count:
            raise FormatError(f"{source}: tensor {e['name']} overlaps or leaves a gap in the payload")
        named[e["name"]] = np.frombuffer(payload, dtype="<f8", offset=pos, count=count) \
            .astype(np.float64).reshape(e["shape"])
        pos += e["nbytes"]
    if pos != len(payload):
        raise FormatError(f"{source}: payload has {len(payload) - pos} trailing bytes")
    return named, header["metadata"]


def base_hash(model: GramMambaModel) -> str:
    """SHA-256 over base (non-adapter) tensor names, shapes and bytes."""
    h = hashlib.sha256()
    params = model.named_parameters()
    for name in model.base_param_names():
        arr = params[name].data
        h.update(name.encode())
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model: GramMambaModel, path, metadata: Optional[dict] = None) -> None:
    meta = {"kind": "full", "format_version": CHECKPOINT_VERSION,
            "model_config": model.config.to_dict(), "modality_order": model.modality_names,
            "seed": model.config.seed, "base_hash": base_hash(model)}
    meta.update(metadata or {})
    Path(path).write_bytes(_encode_checkpoint(model.state_dict(), meta))


def read_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such checkpoint")
    return _decode_checkpoint(path.read_bytes(), str(path))


def load_checkpoint(path) -> GramMambaModel:
    named, meta = read_checkpoint(path)
    if meta.get("kind") != "full":
        raise FormatError(f"{path}: not a full-model checkpoint")
    model = GramMambaModel(ModelConfig(**meta["model_config"]))
    try:
        model.load_state_dict(named)
    except (ContractError, ValueError) as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    return model


def save_adapters(model: GramMambaModel, path, keys: Optional[Iterable[str]] = None,
                  metadata: Optional[dict] = None) -> None:
    keys = list(model.adapters) if keys is None else list(keys)
    params = model.named_parameters()
    named = {n: params[n].data for k in keys for n in model.adapter_param_names(k)}
    meta = {"kind": "adapter", "format_version": CHECKPOINT_VERSION, "base_hash": base_hash(model),
            "modality_order": model.modality_names}
    meta.update(metadata or {})
    Path(path).write_bytes(_encode_checkpoint(named, meta))


def load_adapters(model: GramMambaModel, path) -> dict:
    """Copy adapter tensors from ``path`` into ``model``; returns the metadata."""
    named, meta = read_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise FormatError(f"{path}: not an adapter checkpoint")
    if meta.get("base_hash") != base_hash(model):
        raise CompatibilityError(f"{path}: adapters were trained against a different base model")
    params = model.named_parameters()
    for name, arr in named.items():
        if name not in params or params[name].shape != arr.shape:
            raise CompatibilityError(f"{path}: tensor {name} does not fit this model")
        params[name].data[...] = arr
    return meta
