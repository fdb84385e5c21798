"""Datasets on disk, synthetic generation and multi-label stratified splits.

Directory layout::

    hierarchy.json   coarse tag -> [fine tags]
    features.csv     id,f0,...,f{d-1}
    labels.csv       id,<fine tags in hierarchy order>, values 0 / 1 / NA

Rows of the two CSV files are matched by id; a loaded dataset is sorted by id.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadValue, EmptyDataset, HeaderMismatch, MissingFile, RaggedRows
from .hierarchy import NEG, POS, UNK, Hierarchy, induce_coarse_matrix, load_hierarchy

FILES = ("hierarchy.json", "features.csv", "labels.csv")
_CELL = {"0": NEG, "1": POS, "NA": UNK}
_TEXT = {NEG: "0", POS: "1", UNK: "NA"}


@dataclass(frozen=True)
class Dataset:
    ids: tuple[str, ...]
    features: np.ndarray
    fine_states: np.ndarray
    coarse_states: np.ndarray
    hierarchy: Hierarchy

    def __post_init__(self):
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.features.shape[1] < 1:
            raise RaggedRows(f"features shape {self.features.shape} for {n} ids")
        if self.fine_states.shape != (n, self.hierarchy.n_fine):
            raise RaggedRows(f"fine states shape {self.fine_states.shape}")
        if not np.array_equal(self.coarse_states, induce_coarse_matrix(self.fine_states, self.hierarchy)):
            raise BadValue("coarse states are not the induced ones")

    @classmethod
    def build(cls, ids: Sequence[str], features, fine_states, hierarchy: Hierarchy) -> "Dataset":
        fs = np.asarray(fine_states, dtype=np.int8)
        return cls(tuple(ids), np.asarray(features, dtype=np.float64), fs,
                   induce_coarse_matrix(fs, hierarchy), hierarchy)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(tuple(self.ids[i] for i in rows), self.features[rows], self.fine_states[rows],
                       self.coarse_states[rows], self.hierarchy)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.hierarchy.fingerprint().encode())
        h.update("\x00".join(self.ids).encode())
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.fine_states).tobytes())
        return h.hexdigest()


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "hierarchy.json").write_text(ds.hierarchy.to_json(), encoding="utf-8")
    with open(d / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"f{j}" for j in range(ds.dim)])
        for sid, row in zip(ds.ids, ds.features):
            w.writerow([sid] + [repr(float(v)) for v in row])
    with open(d / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + list(ds.hierarchy.fine_tags))
        for sid, row in zip(ds.ids, ds.fine_states):
            w.writerow([sid] + [_TEXT[int(v)] for v in row])
    return d


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise HeaderMismatch(f"{path} is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise RaggedRows(f"{path}:{k}: {len(r)} fields, header has {len(header)}")
    return header, body


def load_dataset(directory, hierarchy: Optional[Hierarchy] = None) -> Dataset:
    d = Path(directory)
    for name in FILES:
        if not (d / name).is_file() and not (name == "hierarchy.json" and hierarchy is not None):
            raise MissingFile(f"{d / name} not found")
    h = hierarchy if hierarchy is not None else load_hierarchy(d / "hierarchy.json")

    f_head, f_rows = _read_csv(d / "features.csv")
    if not f_head or f_head[0] != "id" or f_head[1:] != [f"f{j}" for j in range(len(f_head) - 1)]:
        raise HeaderMismatch(f"features.csv header must be id,f0,...; got {f_head[:4]}...")
    if len(f_head) < 2:
        raise HeaderMismatch("features.csv has no feature columns")
    l_head, l_rows = _read_csv(d / "labels.csv")
    if l_head != ["id"] + list(h.fine_tags):
        raise HeaderMismatch(f"labels.csv columns {l_head[1:]} != hierarchy fine tags {list(h.fine_tags)}")
    if not f_rows:
        raise EmptyDataset(f"{d} has no samples")

    f_rows.sort(key=lambda r: r[0])
    l_rows.sort(key=lambda r: r[0])
    ids = [r[0] for r in f_rows]
    if ids != [r[0] for r in l_rows]:
        raise RaggedRows("features.csv and labels.csv ids do not match")
    if len(set(ids)) != len(ids):
        raise BadValue("duplicate sample ids")
    try:
        feats = np.array([[float(v) for v in r[1:]] for r in f_rows], dtype=np.float64)
    except ValueError as exc:
        raise BadValue(f"features.csv: {exc}") from exc
    if not np.isfinite(feats).all():
        raise BadValue("features.csv contains non-finite values")
    states = np.empty((len(ids), h.n_fine), dtype=np.int8)
    for i, r in enumerate(l_rows):
        for j, cell in enumerate(r[1:]):
            try:
                states[i, j] = _CELL[cell.strip()]
            except KeyError:
                raise BadValue(f"labels.csv row {r[0]!r}: {cell!r} is not 0, 1 or NA") from None
    return Dataset.build(ids, feats, states, h)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    d: int
    hierarchy: Hierarchy
    label_noise: float = 0.0
    mask_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1 or self.d < 1:
            raise ValueError("n_samples and d must be >= 1")
        for name in ("label_noise", "mask_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def generate(cfg: SynthConfig) -> Dataset:
    """Linear-threshold fine labels over Gaussian features, plus noise and masking."""
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hierarchy
    weights = rng.standard_normal((h.n_fine, cfg.d))
    X = rng.standard_normal((cfg.n_samples, cfg.d))
    truth = X @ weights.T > 0
    flip = rng.random(truth.shape) < cfg.label_noise
    labels = truth ^ flip
    hidden = rng.random(truth.shape) < cfg.mask_rate
    states = np.where(hidden, UNK, np.where(labels, POS, NEG)).astype(np.int8)
    width = len(str(cfg.n_samples - 1))
    ids = [f"s{i:0{width}d}" for i in range(cfg.n_samples)]
    return Dataset.build(ids, X, states, h)


def stratified_split(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Iterative stratification into (remainder, held_out).

    Samples are dealt out label by label, rarest remaining positive label first;
    each goes to the fold that most lacks that label (then the fold that most
    lacks samples, then at random). Only observed positives count as labels.
    """
    if len(ds) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    Y = ds.fine_states == POS
    held = iterative_stratification(Y, np.array([1.0 - fraction, fraction]), rng) == 1
    return ds.subset(np.flatnonzero(~held)), ds.subset(np.flatnonzero(held))


def iterative_stratification(Y: np.ndarray, ratios: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fold index per row of a boolean (n, L) label matrix."""
    n, L = Y.shape
    ratios = np.asarray(ratios, dtype=np.float64)
    want = ratios * n
    want_label = np.outer(ratios, Y.sum(axis=0))
    fold = np.full(n, -1, dtype=np.intp)
    remaining = np.ones(n, dtype=bool)
    while True:
        counts = (Y & remaining[:, None]).sum(axis=0)
        live = np.flatnonzero(counts > 0)
        if live.size == 0:
            break
        rarest = counts[live].min()
        label = rng.choice(live[counts[live] == rarest])
        for i in np.flatnonzero(Y[:, label] & remaining):
            k = _pick_fold(want_label[:, label], want, rng)
            fold[i] = k
            remaining[i] = False
            want_label[k] -= Y[i]
            want[k] -= 1
    for i in np.flatnonzero(remaining):
        top = np.flatnonzero(want == want.max())
        k = top[0] if top.size == 1 else rng.choice(top)
        fold[i] = k
        want[k] -= 1
    return fold


def _pick_fold(label_need: np.ndarray, need: np.ndarray, rng) -> int:
    cand = np.flatnonzero(label_need == label_need.max())
    if cand.size > 1:
        cand = cand[need[cand] == need[cand].max()]
    return int(cand[0] if cand.size == 1 else rng.choice(cand))
