"""Multimodal feature datasets: on-disk format, synthetic generator, batching.

A dataset directory holds ``dataset.json``::

    {"d_t": 16, "d_v": 8, "d_a": 12,
     "splits": {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}}

and one record file per split. Record files are either newline-delimited
JSON objects ``{"id", "label", "text", "visual", "acoustic"}`` (each modality
a list of equal-width rows) or the packed binary layout written by
:func:`write_records_binary`, recognised by its ``TCAN`` magic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

MODALITY_KEYS = ("text", "visual", "acoustic")
WIDTH_KEYS = {"text": "d_t", "visual": "d_v", "acoustic": "d_a"}
LABEL_MIN, LABEL_MAX = -3.0, 3.0
BINARY_MAGIC = b"TCAN"
BINARY_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Base class for dataset loading problems."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class WidthMismatchError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class CorruptRecordError(DatasetError):
    pass


@dataclass
class Sample:
    id: str
    text: np.ndarray
    visual: np.ndarray
    acoustic: np.ndarray
    label: float

    def __post_init__(self):
        for key in MODALITY_KEYS:
            arr = np.asarray(getattr(self, key), dtype=np.float32)
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise CorruptRecordError(
                    f"sample {self.id!r}: {key} must be a non-empty 2-D sequence, got shape {arr.shape}")
            setattr(self, key, arr)
        self.label = float(np.float32(self.label))
        if not LABEL_MIN <= self.label <= LABEL_MAX:
            raise LabelRangeError(f"sample {self.id!r}: label {self.label} outside [-3, 3]")

    def seq(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


@dataclass
class Dataset:
    dims: dict
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------------------
# JSON / binary I/O
# ---------------------------------------------------------------------------

def _record_to_json(s: Sample) -> str:
    return json.dumps({"id": s.id, "label": s.label, "text": s.text.tolist(),
                       "visual": s.visual.tolist(), "acoustic": s.acoustic.tolist()})


def write_records_jsonl(samples: Sequence[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_record_to_json(s) + "\n")


def write_records_binary(samples: Sequence[Sample], path) -> None:
    """Packed little-endian layout: magic, u32 version, u32 count, then records.

    Record: u32 id length, UTF-8 id, f32 label, and per modality
    (text, visual, acoustic) u32 rows, u32 width, f32 payload.
    """
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<II", BINARY_VERSION, len(samples)))
        for s in samples:
            sid = s.id.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)) + sid + struct.pack("<f", s.label))
            for key in MODALITY_KEYS:
                arr = s.seq(key)
                fh.write(struct.pack("<II", *arr.shape))
                fh.write(arr.astype("<f4").tobytes())


def _parse_json_records(text: str, source: str) -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorruptRecordError(f"{source}:{lineno}: unparseable record ({e.msg})") from None
        sid = str(rec.get("id", f"{source}:{lineno}")) if isinstance(rec, dict) else f"{source}:{lineno}"
        try:
            seqs = {}
            for key in MODALITY_KEYS:
                rows = rec[key]
                if not rows or len({len(r) for r in rows}) != 1:
                    raise ValueError(f"{key} rows are empty or ragged")
                seqs[key] = np.array(rows, dtype=np.float32)
            label = float(rec["label"])
        except LabelRangeError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptRecordError(f"sample {sid!r} in {source}: {e}") from None
        out.append(Sample(sid, seqs["text"], seqs["visual"], seqs["acoustic"], label))
    return out


def _parse_binary_records(buf: bytes, source: str) -> list:
    try:
        version, n = struct.unpack_from("<II", buf, 4)
    except struct.error:
        raise CorruptRecordError(f"{source}: truncated header") from None
    if version != BINARY_VERSION:
        raise CorruptRecordError(f"{source}: unsupported binary version {version}")
    off = 12
    out = []
    for i in range(n):
        sid = f"{source}#{i}"
        try:
            (n_id,) = struct.unpack_from("<I", buf, off)
            off += 4
            sid = buf[off:off + n_id].decode("utf-8")
            off += n_id
            (label,) = struct.unpack_from("<f", buf, off)
            off += 4
            seqs = {}
            for key in MODALITY_KEYS:
                rows, width = struct.unpack_from("<II", buf, off)
                off += 8
                count = rows * width
                if off + 4 * count > len(buf):
                    raise ValueError("payload truncated")
                seqs[key] = np.frombuffer(buf, dtype="<f4", count=count, offset=off) \
                    .reshape(rows, width).astype(np.float32)
                off += 4 * count
        except (struct.error, UnicodeDecodeError, ValueError) as e:
            raise CorruptRecordError(f"sample {sid!r} in {source}: {e}") from None
        out.append(Sample(sid, seqs["text"], seqs["visual"], seqs["acoustic"], label))
    if off != len(buf):
        raise CorruptRecordError(f"{source}: {len(buf) - off} trailing bytes")
    return out


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"record file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] == BINARY_MAGIC:
        return _parse_binary_records(buf, path.name)
    return _parse_json_records(buf.decode("utf-8"), path.name)


def write_dataset(ds: Dataset, directory, binary: bool = False) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "bin" if binary else "jsonl"
    manifest = {WIDTH_KEYS[m]: int(ds.dims[m]) for m in MODALITY_KEYS}
    manifest["splits"] = {name: f"{name}.{ext}" for name in SPLITS}
    manifest["sizes"] = {name: len(ds.split(name)) for name in SPLITS}
    writer = write_records_binary if binary else write_records_jsonl
    for name in SPLITS:
        writer(ds.split(name), directory / manifest["splits"][name])
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or its ``dataset.json``) into a :class:`Dataset`."""
    path = Path(path)
    manifest_path = path / "dataset.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        dims = {m: int(manifest[WIDTH_KEYS[m]]) for m in MODALITY_KEYS}
        split_files = manifest["splits"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{manifest_path}: malformed manifest ({e})") from None
    ds = Dataset(dims)
    for name in SPLITS:
        fname = split_files.get(name)
        samples = read_records(manifest_path.parent / fname) if fname else []
        for s in samples:
            for m in MODALITY_KEYS:
                if s.seq(m).shape[1] != dims[m]:
                    raise WidthMismatchError(
                        f"sample {s.id!r}: {m} width {s.seq(m).shape[1]} != manifest {dims[m]}")
        expected = manifest.get("sizes", {}).get(name)
        if expected is not None and expected != len(samples):
            raise DatasetError(f"split {name}: manifest declares {expected} samples, found {len(samples)}")
        setattr(ds, name, samples)
    return ds


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings; per-modality fields are keyed t / v / a.

    Every modality row carries ``signal_scale * snr * s * y * u_m`` plus unit
    Gaussian noise, where ``u_m`` is a fixed unit direction and ``s`` is -1
    with probability ``p_flip`` (the modality contradicts the label) and +1
    otherwise. Visual/acoustic rows are additionally hit by noise bursts of
    standard deviation ``burst_scale`` at the configured per-row rate.
    """

    n_samples: int = 500
    seed: int = 0
    snr_t: float = 4.0
    snr_v: float = 1.0
    snr_a: float = 1.0
    p_flip_t: float = 0.0
    p_flip_v: float = 0.0
    p_flip_a: float = 0.0
    burst_rate_v: float = 0.0
    burst_rate_a: float = 0.0
    burst_scale: float = 4.0
    signal_scale: float = 0.1
    d_t: int = 16
    d_v: int = 8
    d_a: int = 12
    len_t: tuple = (8, 20)
    len_v: tuple = (20, 40)
    len_a: tuple = (30, 60)
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        for m in "tva":
            if not getattr(self, f"snr_{m}") > 0:
                raise ValueError(f"snr_{m} must be > 0")
            if not 0.0 <= getattr(self, f"p_flip_{m}") < 0.5:
                raise ValueError(f"p_flip_{m} must lie in [0, 0.5)")
            lo, hi = getattr(self, f"len_{m}")
            if not 1 <= lo <= hi:
                raise ValueError(f"len_{m} must satisfy 1 <= lo <= hi")
            if getattr(self, f"d_{m}") < 1:
                raise ValueError(f"d_{m} must be >= 1")
        for m in "va":
            if not 0.0 <= getattr(self, f"burst_rate_{m}") <= 1.0:
                raise ValueError(f"burst_rate_{m} must lie in [0, 1]")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.val_fraction < 0 or self.test_fraction < 0 or \
                self.val_fraction + self.test_fraction > 1:
            raise ValueError("split fractions must be non-negative and sum to <= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        kw = dict(d)
        for key in ("len_t", "len_v", "len_a"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def _directions(seed: int, dims: Mapping[str, int]) -> dict:
    rng = np.random.default_rng([seed, 0x5EED])
    out = {}
    for m in "tva":
        u = rng.standard_normal(dims[m])
        out[m] = u / np.linalg.norm(u)
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a labelled corpus whose modalities differ in signal strength and reliability."""
    dims = {"t": cfg.d_t, "v": cfg.d_v, "a": cfg.d_a}
    u = _directions(cfg.seed, dims)
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for i in range(cfg.n_samples):
        y = float(np.float32(rng.uniform(LABEL_MIN, LABEL_MAX)))
        seqs = {}
        for m in "tva":
            lo, hi = getattr(cfg, f"len_{m}")
            n = int(rng.integers(lo, hi + 1))
            sign = -1.0 if rng.random() < getattr(cfg, f"p_flip_{m}") else 1.0
            amp = cfg.signal_scale * getattr(cfg, f"snr_{m}") * sign * y
            x = amp * u[m][None, :] + rng.standard_normal((n, dims[m]))
            if m != "t":
                rate = getattr(cfg, f"burst_rate_{m}")
                hit = rng.random(n) < rate
                x = x + hit[:, None] * (cfg.burst_scale * rng.standard_normal((n, dims[m])))
            seqs[m] = x.astype(np.float32)
        samples.append(Sample(f"syn-{cfg.seed}-{i:06d}", seqs["t"], seqs["v"], seqs["a"], y))
    n_val = int(round(cfg.n_samples * cfg.val_fraction))
    n_test = int(round(cfg.n_samples * cfg.test_fraction))
    n_train = cfg.n_samples - n_val - n_test
    return Dataset({"text": cfg.d_t, "visual": cfg.d_v, "acoustic": cfg.d_a},
                   train=samples[:n_train], val=samples[n_train:n_train + n_val],
                   test=samples[n_train + n_val:])


def pooled_features(samples: Sequence[Sample], modality: str) -> np.ndarray:
    return np.stack([s.seq(modality).mean(axis=0) for s in samples]).astype(np.float64)


def probe_accuracy(train: Sequence[Sample], test: Sequence[Sample], modality: str) -> float:
    """Sign accuracy of a least-squares linear probe on time-averaged features."""
    def design(samples):
        x = pooled_features(samples, modality)
        return np.hstack([x, np.ones((len(x), 1))])

    y = np.array([s.label for s in train])
    w, *_ = np.linalg.lstsq(design(train), y, rcond=None)
    pred = design(test) @ w
    truth = np.array([s.label for s in test])
    keep = truth != 0
    return float(np.mean(np.sign(pred[keep]) == np.sign(truth[keep])))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: list
    inputs: dict          # modality -> (B x T_max x d array, lengths)
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def collate(samples: Sequence[Sample], modalities: Sequence[str] = MODALITY_KEYS) -> Batch:
    """Right-pad each modality with zeros to the longest sequence in the batch."""
    inputs = {}
    for m in modalities:
        seqs = [s.seq(m) for s in samples]
        lengths = np.array([len(x) for x in seqs], dtype=np.int64)
        arr = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]), dtype=np.float32)
        for i, x in enumerate(seqs):
            arr[i, : len(x)] = x
        inputs[m] = (arr, lengths)
    labels = np.array([s.label for s in samples], dtype=np.float32)
    return Batch([s.id for s in samples], inputs, labels)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int = 0,
               shuffle: bool = True, modalities: Sequence[str] = MODALITY_KEYS) -> Iterator[Batch]:
    """Yield collated batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(samples), seed, epoch) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        yield collate([samples[i] for i in order[start:start + batch_size]], modalities)
