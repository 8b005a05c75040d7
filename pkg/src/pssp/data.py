"""CullPDB/CB513 ingestion, PSSM standardisation, splits, batching, toy datasets."""
import ast
import gzip
import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import RngStream
from .errors import ConfigError, FormatError, MalformedRecordError, MissingFileError

log = logging.getLogger(__name__)

GRID_LENGTH = 700
RAW_COLUMNS = 57
RAW_ROW = GRID_LENGTH * RAW_COLUMNS  # 39900
FEATURE_DEPTH = 42
NUM_CLASSES = 8

REAL_TRAIN_SIZE = 5534
REAL_VAL_SIZE = 256

NPY_MAGIC = b"\x93NUMPY"
GZIP_MAGIC = b"\x1f\x8b"

# secondary-structure label order of the public files
Q8_ALPHABET = "LBEGIHST"


@dataclass(frozen=True)
class ColumnLayout:
    """Where each field sits in a 57-column raw residue row.

    The residue block keeps 21 columns; the NoSeq column is folded into the
    ``noseq_fold_into`` slot so the block stays one-hot at padding positions.
    """

    residue_columns: tuple = tuple(range(0, 21))
    noseq_residue_column: int = 21
    noseq_fold_into: int = 20
    label_columns: tuple = tuple(range(22, 30))
    noseq_label_column: int = 30
    pssm_columns: tuple = tuple(range(35, 56))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


DEFAULT_LAYOUT = ColumnLayout()


@dataclass
class ProteinRecord:
    features: np.ndarray  # (grid, 42) float32: 21 residue one-hot + 21 PSSM
    labels: np.ndarray  # (grid,) int64, 0 at padding
    mask: np.ndarray  # (grid,) float32 in {0, 1}
    id: str = ""
    normalized: bool = False

    @property
    def length(self):
        return int(self.mask.sum())

    @property
    def grid_length(self):
        return self.features.shape[0]

    @property
    def decode_length(self):
        """Positions up to and including the last valid residue."""
        valid = np.flatnonzero(self.mask)
        return int(valid[-1]) + 1 if valid.size else 0


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------- npy parsing

def _read_bytes(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    path = Path(source)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    return path.read_bytes()


def parse_npy_array(source):
    """Decode an array container (optionally gzip-wrapped) into a float32 array."""
    buf = _read_bytes(source)
    if buf[:2] == GZIP_MAGIC:
        buf = gzip.decompress(buf)
    if buf[:6] != NPY_MAGIC:
        raise FormatError("bad magic bytes at offset 0: not an array container")
    if len(buf) < 10:
        raise FormatError("truncated header at offset 6")
    major = buf[6]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", buf, 8)
        start = 10
    elif major in (2, 3):
        (hlen,) = struct.unpack_from("<I", buf, 8)
        start = 12
    else:
        raise FormatError(f"unsupported format version {major}.{buf[7]} at offset 6")
    try:
        header = ast.literal_eval(buf[start:start + hlen].decode("latin1" if major < 3 else "utf-8"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"unreadable header at offset {start}") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise FormatError(f"header at offset {start} lacks descr/fortran_order/shape")
    if header["fortran_order"]:
        raise FormatError("Fortran-ordered arrays are not supported")
    descr = header["descr"]
    # f8 occurs in some published copies of the dataset; both narrow to float32
    if descr not in ("<f4", "<f8"):
        raise FormatError(f"unsupported dtype {descr!r}: need little-endian float")
    shape = tuple(header["shape"])
    dtype = np.dtype(descr)
    count = int(np.prod(shape)) if shape else 1
    body = buf[start + hlen:]
    if len(body) < count * dtype.itemsize:
        raise FormatError(f"payload holds {len(body)} bytes, header promises {count * dtype.itemsize}")
    arr = np.frombuffer(body, dtype=dtype, count=count).reshape(shape)
    return arr.astype(np.float32)


def parse_npy(source):
    """Raw dataset array reshaped to (N, 700, 57)."""
    arr = parse_npy_array(source)
    if arr.size % RAW_ROW != 0:
        raise FormatError(f"array of shape {arr.shape} is not divisible into {GRID_LENGTH}x{RAW_COLUMNS} proteins")
    return arr.reshape(-1, GRID_LENGTH, RAW_COLUMNS)


def write_npy(path, array):
    np.save(path, np.ascontiguousarray(array, dtype="<f4"), allow_pickle=False)


# ----------------------------------------------------------- record extraction

def extract_features(raw, layout=DEFAULT_LAYOUT, record_id=""):
    """Turn one (700, 57) raw protein into a :class:`ProteinRecord`."""
    raw = np.asarray(raw, dtype=np.float32)
    residues = raw[:, list(layout.residue_columns)].copy()
    noseq = raw[:, layout.noseq_residue_column] > 0.5
    present = (residues > 0.5).any(axis=1)
    bad = ~(present | noseq)
    if bad.any():
        raise MalformedRecordError(
            f"record {record_id!r}: position {int(np.flatnonzero(bad)[0])} has neither residue nor NoSeq set")
    fold = list(layout.residue_columns).index(layout.noseq_fold_into)
    residues[noseq & ~present, fold] = 1.0

    label_block = raw[:, list(layout.label_columns)]
    mask = (raw[:, layout.noseq_label_column] < 0.5) & (label_block > 0.5).any(axis=1)
    labels = np.where(mask, label_block.argmax(axis=1), 0).astype(np.int64)

    valid = np.flatnonzero(mask)
    if valid.size and valid[-1] + 1 != valid.size:
        log.warning("record %r: valid residues are not a contiguous prefix", record_id)

    pssm = raw[:, list(layout.pssm_columns)]
    features = np.concatenate([residues, pssm], axis=1).astype(np.float32)
    return ProteinRecord(features=features, labels=labels, mask=mask.astype(np.float32), id=record_id)


def load_records(source, layout=DEFAULT_LAYOUT, prefix="protein"):
    raw = parse_npy(source)
    return [extract_features(raw[i], layout, f"{prefix}{i}") for i in range(raw.shape[0])]


def save_record_cache(path, records):
    """Persist records as one (N, grid, 44) container: features, label, mask."""
    stacked = np.stack([
        np.concatenate([r.features, r.labels[:, None].astype(np.float32), r.mask[:, None]], axis=1)
        for r in records
    ])
    write_npy(path, stacked)


def load_record_cache(path):
    arr = parse_npy_array(path)
    if arr.ndim != 3 or arr.shape[2] != FEATURE_DEPTH + 2:
        raise FormatError(f"cache {path} has shape {arr.shape}, expected (N, grid, {FEATURE_DEPTH + 2})")
    return [
        ProteinRecord(features=a[:, :FEATURE_DEPTH].copy(), labels=a[:, FEATURE_DEPTH].astype(np.int64),
                      mask=a[:, FEATURE_DEPTH + 1].copy(), id=f"protein{i}")
        for i, a in enumerate(arr)
    ]


# -------------------------------------------------------------- normalisation

PSSM_SLICE = slice(21, 42)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def normalize_pssm(records):
    """Per-channel PSSM mean and standard deviation over valid training residues."""
    rows = [r.features[r.mask > 0, PSSM_SLICE] for r in records]
    values = np.concatenate(rows, axis=0).astype(np.float64) if rows else np.zeros((0, 21))
    if values.shape[0] < 2:
        raise ConfigError("need at least 2 valid residues to compute PSSM statistics")
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    if np.any(std <= 0):
        raise ConfigError(f"degenerate PSSM channel(s) with zero variance: {np.flatnonzero(std <= 0).tolist()}")
    return NormStats(mean, std)


def apply_normalization(stats, records):
    """Standardise PSSM channels at valid residues; padding stays 0."""
    out = []
    for r in records:
        if r.normalized:
            raise ConfigError(f"record {r.id!r} is already normalised")
        feats = r.features.copy()
        valid = r.mask > 0
        block = (feats[:, PSSM_SLICE].astype(np.float64) - stats.mean) / stats.std
        feats[:, PSSM_SLICE] = np.where(valid[:, None], block, 0.0).astype(np.float32)
        out.append(replace(r, features=feats, normalized=True))
    return out


# -------------------------------------------------------------- split / batch

def split_train_val(records, seed, val_size=None, val_fraction=REAL_VAL_SIZE / REAL_TRAIN_SIZE):
    """Deterministic shuffle then split; the real 5,534-protein set gives 5,278 / 256."""
    n = len(records)
    if n < 2:
        raise ConfigError(f"need at least 2 records to split, got {n}")
    if val_size is None:
        val_size = REAL_VAL_SIZE if n == REAL_TRAIN_SIZE else int(round(n * val_fraction))
    val_size = min(max(val_size, 1), n - 1)
    order = np.argsort(RngStream(seed).fork("split").uniform((n,)), kind="stable")
    val_idx = set(order[:val_size].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def make_batch(records, indices):
    chosen = [records[i] for i in indices]
    return Batch(
        features=np.stack([r.features for r in chosen]),
        labels=np.stack([r.labels for r in chosen]),
        mask=np.stack([r.mask for r in chosen]),
    )


# ---------------------------------------------------------------- toy data

TOY_AMINO_ACIDS = 20
# per-residue score and window weights of the local-window rule
_TOY_SCORE = np.arange(TOY_AMINO_ACIDS) % 4
_TOY_WEIGHTS = np.array([1, 2, 3, 2, 1])


def _toy_class_edges():
    """Score thresholds splitting the window score into 8 near-equal classes."""
    pmf = np.ones(1)
    per_residue = np.bincount(_TOY_SCORE, minlength=4) / TOY_AMINO_ACIDS
    for w in _TOY_WEIGHTS:
        step = np.zeros(3 * w + 1)
        step[::w] = per_residue
        pmf = np.convolve(pmf, step)
    cdf = np.cumsum(pmf)
    return np.searchsorted(cdf, np.arange(1, NUM_CLASSES) / NUM_CLASSES)


TOY_EDGES = _toy_class_edges()


def local_window_labels(residues, length):
    """Label = binned weighted score of residue identities at t-2 .. t+2."""
    scores = np.zeros(length, dtype=np.int64)
    padded = np.concatenate([np.full(2, -1), residues[:length], np.full(2, -1)])
    for k, w in enumerate(_TOY_WEIGHTS):
        window = padded[k:k + length]
        scores += w * np.where(window >= 0, _TOY_SCORE[np.clip(window, 0, None)], 0)
    return np.searchsorted(TOY_EDGES, scores, side="right")


def synth_toy_dataset(seed, n_proteins, length, rule="local-window", grid_length=None, switch_prob=0.1):
    """Synthetic records with a known labelling rule.

    ``local-window``: labels are a deterministic function of the residues
    within two positions, so a model seeing five residues can fit them exactly.
    ``copy-prone``: labels come in long runs (a new run starts with
    probability ``switch_prob``), each run's label half the time tied to the
    residue that starts it, so copying the previous label is usually right.
    """
    if rule not in ("local-window", "copy-prone"):
        raise ConfigError(f"unknown toy rule {rule!r}")
    grid = length if grid_length is None else grid_length
    if grid < length:
        raise ConfigError("grid_length must be >= length")
    root = RngStream(seed).fork("toy", rule)
    records = []
    for p in range(n_proteins):
        rng = root.fork(p)
        residues = rng.integers(0, TOY_AMINO_ACIDS, length)
        pssm = rng.normal((length, 21)) * 0.5
        pssm[np.arange(length), residues] += 1.0
        if rule == "local-window":
            labels = local_window_labels(residues, length)
        else:
            starts = rng.uniform((length,)) < switch_prob
            starts[0] = True
            tied = rng.uniform((length,)) < 0.5
            random_cls = rng.integers(0, NUM_CLASSES, length)
            labels = np.zeros(length, dtype=np.int64)
            for t in range(length):
                if starts[t]:
                    labels[t] = residues[t] % NUM_CLASSES if tied[t] else random_cls[t]
                else:
                    labels[t] = labels[t - 1]
        features = np.zeros((grid, FEATURE_DEPTH), dtype=np.float32)
        features[np.arange(length), residues] = 1.0
        features[length:, 20] = 1.0  # padding marker slot
        features[:length, 21:] = pssm
        full_labels = np.zeros(grid, dtype=np.int64)
        full_labels[:length] = labels
        mask = np.zeros(grid, dtype=np.float32)
        mask[:length] = 1.0
        records.append(ProteinRecord(features=features, labels=full_labels, mask=mask, id=f"toy{p}"))
    return records


def repeat_fraction(records):
    """Fraction of valid positions t >= 1 whose label equals the one before."""
    same = total = 0
    for r in records:
        n = r.length
        y = r.labels[:n]
        same += int((y[1:] == y[:-1]).sum())
        total += max(n - 1, 0)
    return same / total if total else 0.0


def summarize(records):
    lengths = np.array([r.length for r in records])
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for r in records:
        counts += np.bincount(r.labels[r.mask > 0], minlength=NUM_CLASSES)[:NUM_CLASSES]
    return {
        "records": len(records),
        "residues": int(lengths.sum()) if len(records) else 0,
        "length_min": int(lengths.min()) if len(records) else 0,
        "length_max": int(lengths.max()) if len(records) else 0,
        "length_mean": float(lengths.mean()) if len(records) else 0.0,
        "label_counts": {Q8_ALPHABET[i]: int(c) for i, c in enumerate(counts)},
    }
