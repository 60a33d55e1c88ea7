"""Preprocessing procedures and the on-disk dataset format.

The CSV dataset format stores one client per file::

    # fedbench-dataset 1
    # client_id=2
    # task=segmentation
    # shape=16x16
    # completeness=1
    split,feature_0,...,pixel_0,...,ignore_0,...
    train,0.12,...,1,...,0,...

Multi-label files use ``feature_*`` and ``label_*`` columns and have no
``shape`` line.  Images and masks are flattened row-major.  Floats are
written with 17 significant digits so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .datagen import UNIFIED_LABELS, InstitutionData
from .engine import Batch
from .errors import ConfigurationError, ParseError, SchemaError, ShapeError

ECG_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
ECG_TARGET_LEN = 5000
ECHO_TARGET_SIZE = 112
DATASET_FORMAT = "fedbench-dataset"
DATASET_VERSION = 1
DROP = None


def pad_or_truncate(signal, target_len=ECG_TARGET_LEN):
    """Fix a 12-lead recording to ``target_len`` samples.

    Longer recordings keep their first ``target_len`` samples; shorter ones
    are extended on the right by repeating the last sample of each lead.
    """
    signal = np.asarray(signal)
    if signal.ndim != 2 or signal.shape[0] != len(ECG_LEADS):
        raise ShapeError(f"expected a ({len(ECG_LEADS)}, T) signal, got {signal.shape}")
    if signal.shape[1] < 1:
        raise ShapeError("signal has no samples")
    if signal.shape[1] >= target_len:
        return signal[:, :target_len].copy()
    return np.pad(signal, ((0, 0), (0, target_len - signal.shape[1])), mode="edge")


@dataclass(frozen=True)
class RawRecord:
    source_id: str
    signal: np.ndarray
    raw_labels: tuple[str, ...]
    patient_meta: tuple | None = None


class LabelAlignmentTable:
    """Map from ``(source_id, raw_label)`` to a unified label code."""

    def __init__(self, entries, codes=UNIFIED_LABELS):
        self.codes = tuple(codes)
        self.entries = {(src, raw.strip()): code for (src, raw), code in entries.items()}
        unknown = set(self.entries.values()) - set(self.codes)
        if unknown:
            raise ConfigurationError(f"table maps to unknown codes {sorted(unknown)}")
        for code in self.codes:
            sources = {src for (src, _), c in self.entries.items() if c == code}
            if len(sources) < 2:
                raise ConfigurationError(f"code {code} must appear in at least two source databases")

    def lookup(self, source_id, raw_label):
        return self.entries.get((source_id, raw_label.strip()))

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_text(cls, text):
        entries, codes = {}, []
        rows = [r for r in text.splitlines() if r.strip() and not r.startswith("#")]
        if not rows or rows[0].split("\t") != ["code", "source", "raw_label"]:
            raise SchemaError("label table needs a 'code<TAB>source<TAB>raw_label' header")
        for lineno, row in enumerate(rows[1:], start=2):
            parts = row.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            code, src, raw = parts
            entries[(src, raw)] = code
            if code not in codes:
                codes.append(code)
        return cls(entries, codes)

    @classmethod
    def load(cls, path=None):
        """The bundled table, or a user-supplied one with the same layout."""
        if path is None:
            text = resources.files("fedbench").joinpath("data/label_alignment.tsv").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_text(text)


def align_labels(record, table):
    """Multi-hot vector over the unified codes, or ``None`` (drop) when no raw label maps."""
    vec = np.zeros(len(table.codes), dtype=np.int64)
    hit = False
    for raw in set(record.raw_labels):
        code = table.lookup(record.source_id, raw)
        if code is not None:
            vec[table.codes.index(code)] = 1
            hit = True
    return vec if hit else DROP


def resize_mask_nearest(mask, target=ECHO_TARGET_SIZE):
    """Nearest-neighbour resize of an integer class grid to ``target x target``."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ShapeError(f"expected a non-empty 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    rows = (np.arange(target) * h) // target
    cols = (np.arange(target) * w) // target
    return mask[np.ix_(rows, cols)]


def _fmt(v):
    return format(float(v), ".17g")


def save_dataset_csv(data, path, task):
    """Write one client to ``path`` in the CSV dataset format."""
    train, test = data.train, data.test
    seg = task == "segmentation"
    meta = [f"# {DATASET_FORMAT} {DATASET_VERSION}", f"# client_id={data.client_id}", f"# task={task}"]
    if seg:
        h, w = train.features.shape[1:]
        meta.append(f"# shape={h}x{w}")
        n_feat = h * w
        header = (["split"] + [f"feature_{i}" for i in range(n_feat)] + [f"pixel_{i}" for i in range(n_feat)]
                  + [f"ignore_{i}" for i in range(n_feat)])
    else:
        n_feat, n_lab = train.features.shape[1], train.targets.shape[1]
        header = ["split"] + [f"feature_{i}" for i in range(n_feat)] + [f"label_{j}" for j in range(n_lab)]
    meta.append("# completeness=" + ",".join(str(c) for c in sorted(data.completeness)))
    buf = io.StringIO()
    buf.write("\n".join(meta) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for split, batch in (("train", train), ("test", test)):
        for i in range(len(batch)):
            row = [split] + [_fmt(v) for v in batch.features[i].ravel()]
            row += [str(int(v)) for v in batch.targets[i].ravel()]
            if seg:
                ignore = batch.ignore_mask[i] if batch.ignore_mask is not None else np.zeros(batch.targets[i].shape)
                row += [str(int(v)) for v in ignore.ravel()]
            writer.writerow(row)
    Path(path).write_text(buf.getvalue())


def _columns(header, prefix):
    idx = [i for i, name in enumerate(header) if name.startswith(prefix + "_")]
    names = [header[i] for i in idx]
    if names != [f"{prefix}_{k}" for k in range(len(names))]:
        raise SchemaError(f"{prefix}_* columns must be numbered 0..n-1 in order")
    return idx


def load_dataset_csv(path):
    """Read one client file written by :func:`save_dataset_csv`; returns ``(InstitutionData, task)``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    meta, lineno = {}, 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        body = lines[lineno][1:].strip()
        if lineno == 0:
            if not body.startswith(DATASET_FORMAT):
                raise SchemaError("missing dataset format marker")
            version = int(body.split()[1])
            if version != DATASET_VERSION:
                raise SchemaError(f"unsupported dataset version {version}")
        elif "=" in body:
            key, value = body.split("=", 1)
            meta[key.strip()] = value.strip()
        lineno += 1
    if lineno == 0:
        raise SchemaError("missing dataset format marker")
    if lineno >= len(lines):
        raise ParseError("no header row", line=lineno + 1)
    for key in ("client_id", "task", "completeness"):
        if key not in meta:
            raise SchemaError(f"missing metadata field {key!r}")
    task = meta["task"]
    reader = csv.reader(lines[lineno:])
    header = next(reader)
    if not header or header[0] != "split":
        raise SchemaError("first column must be 'split'")
    feat = _columns(header, "feature")
    if not feat:
        raise SchemaError("no feature_* columns")
    if task == "segmentation":
        pix, ign = _columns(header, "pixel"), _columns(header, "ignore")
        if "shape" not in meta:
            raise SchemaError("segmentation files need a shape line")
        h, w = (int(v) for v in meta["shape"].split("x"))
        if not (len(feat) == len(pix) == len(ign) == h * w):
            raise SchemaError("feature/pixel/ignore column counts must all equal H*W")
    elif task == "multilabel":
        lab = _columns(header, "label")
        if not lab:
            raise SchemaError("no label_* columns")
    else:
        raise SchemaError(f"unknown task {task!r}")
    rows = {"train": [], "test": []}
    for offset, row in enumerate(reader):
        line = lineno + 2 + offset
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
        if row[0] not in rows:
            raise ParseError(f"unknown split {row[0]!r}", line=line)
        try:
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=line) from exc
        rows[row[0]].append(values)
    batches = {}
    for split, data in rows.items():
        if not data:
            raise ParseError(f"no {split} rows")
        arr = np.array(data)
        x = arr[:, [i - 1 for i in feat]]
        if task == "segmentation":
            n = len(arr)
            batches[split] = Batch(x.reshape(n, h, w),
                                   arr[:, [i - 1 for i in pix]].astype(np.int64).reshape(n, h, w),
                                   arr[:, [i - 1 for i in ign]].astype(np.int8).reshape(n, h, w))
        else:
            batches[split] = Batch(x, arr[:, [i - 1 for i in lab]].astype(np.int64))
    completeness = frozenset(int(c) for c in meta["completeness"].split(",") if c)
    data = InstitutionData(int(meta["client_id"]), batches["train"], batches["test"], completeness)
    return data, task
