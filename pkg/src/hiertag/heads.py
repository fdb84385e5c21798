"""Encoder plus the seven classifier heads compared in the experiments.

Every head maps a batch of feature columns X (d, B) to fine probabilities
(N_fine, B) and, for the hierarchical heads, coarse probabilities
(N_coarse, B):

========== ===============================================================
flat       sigmoid(linear(z)); coarse only via inference-time grouped max
level_wise two parallel sigmoid linear layers sharing z
top_down   soft decision tree: fine = coarse[parent] * sigmoid leaf
joint_gmp  coarse = grouped max of the fine probabilities, trained jointly
joint_gap  coarse = grouped mean, trained jointly
joint_lp   coarse = sigmoid(linear(fine probabilities))
resatt     coarse = W^T fine, W = column softmax of a reshaped linear(z)
========== ===============================================================
"""

from __future__ import annotations

import enum
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcore as gc
from .errors import HierarchyMismatch, ShapeMismatch, VariantMismatch
from .hierarchy import Hierarchy, parse_hierarchy

CHECKPOINT_FORMAT = "hiertag-checkpoint"
CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    FLAT = "flat"
    LEVEL_WISE = "level_wise"
    TOP_DOWN = "top_down"
    JOINT_GMP = "joint_gmp"
    JOINT_GAP = "joint_gap"
    JOINT_LP = "joint_lp"
    RESATT = "resatt"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().lower().replace("-", "_")
        aliases = {"levelwise": "level_wise", "topdown": "top_down", "sdt": "top_down",
                   "gmp": "joint_gmp", "gap": "joint_gap", "lp": "joint_lp"}
        return cls(aliases.get(key, key))


@dataclass
class HeadModel:
    variant: Variant
    hierarchy: Hierarchy
    input_dim: int
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def copy(self) -> "HeadModel":
        return HeadModel(self.variant, self.hierarchy, self.input_dim, self.hidden,
                         {k: v.copy() for k, v in self.params.items()})

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.variant, self.hierarchy, self.input_dim, self.hidden)


@dataclass
class Prediction:
    """Sample-major probabilities: p_fine (n, N_fine), p_coarse (n, N_coarse),
    attention (n, N_fine, N_coarse) for ResAtt only."""

    p_fine: np.ndarray
    p_coarse: Optional[np.ndarray] = None
    attention: Optional[np.ndarray] = None


@dataclass
class Graph:
    """Differentiable outputs of one forward pass, columns = samples."""

    p_fine: gc.Node
    p_coarse: Optional[gc.Node]
    attention: Optional[gc.Node]
    params: dict[str, gc.Node]

    def to_prediction(self) -> Prediction:
        att = None
        if self.attention is not None:
            att = np.moveaxis(self.attention.value, -1, 0).copy()
        coarse = None if self.p_coarse is None else self.p_coarse.value.T.copy()
        return Prediction(self.p_fine.value.T.copy(), coarse, att)


def param_shapes(variant: Variant, h: Hierarchy, input_dim: int, hidden) -> dict[str, tuple[int, ...]]:
    shapes = {}
    prev = input_dim
    for i, width in enumerate(hidden):
        shapes[f"enc.W{i}"] = (width, prev)
        shapes[f"enc.b{i}"] = (width, 1)
        prev = width
    F, C = h.n_fine, h.n_coarse
    shapes["fine.W"] = (F, prev)
    shapes["fine.b"] = (F, 1)
    if variant in (Variant.LEVEL_WISE, Variant.TOP_DOWN):
        shapes["coarse.W"] = (C, prev)
        shapes["coarse.b"] = (C, 1)
    elif variant is Variant.JOINT_LP:
        shapes["lp.W"] = (C, F)
        shapes["lp.b"] = (C, 1)
    elif variant is Variant.RESATT:
        shapes["att.W"] = (F * C, prev)
        shapes["att.b"] = (F * C, 1)
    return shapes


def init_model(variant, hierarchy: Hierarchy, input_dim: int, hidden=(128,),
               rng: np.random.Generator | int = 0) -> HeadModel:
    """Weights and biases uniform in +-1/sqrt(fan_in) of their layer."""
    variant = Variant.parse(variant) if isinstance(variant, str) else variant
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hidden = tuple(int(w) for w in hidden)
    shapes = param_shapes(variant, hierarchy, input_dim, hidden)
    params = {}
    for name, shape in shapes.items():
        layer = name.rsplit(".", 1)[0] + "." + name.rsplit(".", 1)[1].replace("b", "W")
        fan_in = shapes[layer][1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return HeadModel(variant, hierarchy, input_dim, hidden, params)


def zero_model(variant, hierarchy: Hierarchy, input_dim: int, hidden=(128,)) -> HeadModel:
    m = init_model(variant, hierarchy, input_dim, hidden)
    for v in m.params.values():
        v[...] = 0.0
    return m


# ---------------------------------------------------------------------------
# forward passes


def _prepare(x, m: HeadModel, expected: Variant, nodes=None) -> tuple[gc.Node, dict[str, gc.Node]]:
    if m.variant is not expected:
        raise VariantMismatch(f"model is {m.variant.value}, expected {expected.value}")
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim == 1:
        xv = xv[:, None]
    if xv.shape[0] != m.input_dim:
        raise ShapeMismatch(f"input has {xv.shape[0]} features, model expects {m.input_dim}")
    if nodes is None:
        nodes = {k: gc.param(v) for k, v in m.params.items()}
    return gc.const(xv), dict(nodes)


def encode(x: gc.Node, m: HeadModel, nodes: dict[str, gc.Node]) -> gc.Node:
    z = x
    for i in range(len(m.hidden)):
        z = gc.tanh(gc.affine(z, nodes[f"enc.W{i}"], nodes[f"enc.b{i}"]))
    return z


def _fine(z, nodes):
    return gc.sigmoid(gc.affine(z, nodes["fine.W"], nodes["fine.b"]))


def forward_flat(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.FLAT, nodes)
    return Graph(_fine(encode(x, m, nodes), nodes), None, None, nodes)


def forward_level_wise(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.LEVEL_WISE, nodes)
    z = encode(x, m, nodes)
    coarse = gc.sigmoid(gc.affine(z, nodes["coarse.W"], nodes["coarse.b"]))
    return Graph(_fine(z, nodes), coarse, None, nodes)


def forward_top_down(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.TOP_DOWN, nodes)
    z = encode(x, m, nodes)
    coarse = gc.sigmoid(gc.affine(z, nodes["coarse.W"], nodes["coarse.b"]))
    leaf = _fine(z, nodes)
    fine = gc.mul(gc.take_rows(coarse, m.hierarchy.parent_index), leaf)
    return Graph(fine, coarse, None, nodes)


def forward_joint_gmp(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.JOINT_GMP, nodes)
    fine = _fine(encode(x, m, nodes), nodes)
    return Graph(fine, gc.grouped_max(fine, m.hierarchy), None, nodes)


def forward_joint_gap(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.JOINT_GAP, nodes)
    fine = _fine(encode(x, m, nodes), nodes)
    return Graph(fine, gc.grouped_avg(fine, m.hierarchy), None, nodes)


def forward_joint_lp(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.JOINT_LP, nodes)
    fine = _fine(encode(x, m, nodes), nodes)
    coarse = gc.sigmoid(gc.affine(fine, nodes["lp.W"], nodes["lp.b"]))
    return Graph(fine, coarse, None, nodes)


def forward_resatt(x, m: HeadModel, nodes=None) -> Graph:
    x, nodes = _prepare(x, m, Variant.RESATT, nodes)
    z = encode(x, m, nodes)
    fine = _fine(z, nodes)
    F, C = m.hierarchy.n_fine, m.hierarchy.n_coarse
    raw = gc.affine(z, nodes["att.W"], nodes["att.b"])  # (F*C, B), row f*C + c
    att = gc.softmax_cols(gc.reshape(raw, (F, C, raw.shape[1])))
    return Graph(fine, gc.unit_guard(gc.matvec_T(att, fine)), att, nodes)


_FORWARD = {
    Variant.FLAT: forward_flat,
    Variant.LEVEL_WISE: forward_level_wise,
    Variant.TOP_DOWN: forward_top_down,
    Variant.JOINT_GMP: forward_joint_gmp,
    Variant.JOINT_GAP: forward_joint_gap,
    Variant.JOINT_LP: forward_joint_lp,
    Variant.RESATT: forward_resatt,
}


def forward(x, m: HeadModel, nodes=None) -> Graph:
    """Dispatch on the model's variant. ``nodes`` optionally supplies the
    parameter nodes (keyed like ``m.params``) instead of fresh ones."""
    return _FORWARD[m.variant](x, m, nodes)


def aggregate_inference_bottom_up(p: Prediction, h: Hierarchy) -> Prediction:
    """Fill in coarse probabilities as the grouped max of the fine ones."""
    coarse = np.stack([p.p_fine[:, idx].max(axis=1) for idx in h.group_index], axis=1)
    return Prediction(p.p_fine, coarse, p.attention)


def predict(m: HeadModel, X: np.ndarray, batch_size: int = 4096) -> Prediction:
    """Sample-major prediction for an (n, d) feature matrix.

    Flat models get their coarse probabilities from inference-time bottom-up
    aggregation so that every prediction carries both levels.
    """
    X = np.asarray(X, dtype=np.float64)
    parts = [forward(X[i:i + batch_size].T, m).to_prediction() for i in range(0, len(X), batch_size)]
    fine = np.concatenate([p.p_fine for p in parts])
    coarse = np.concatenate([p.p_coarse for p in parts]) if parts[0].p_coarse is not None else None
    att = np.concatenate([p.attention for p in parts]) if parts[0].attention is not None else None
    pred = Prediction(fine, coarse, att)
    if pred.p_coarse is None:
        pred = aggregate_inference_bottom_up(pred, m.hierarchy)
    return pred


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive (fixed timestamps, stored uncompressed so the
# bytes depend only on content) holding
#   meta.json          format, version, variant, dims, hierarchy + fingerprint, extra
#   params/<name>.npy  one float64 array per parameter, numpy .npy format


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(m: HeadModel, path, extra: Optional[dict] = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": m.variant.value,
        "input_dim": m.input_dim,
        "hidden": list(m.hidden),
        "n_fine": m.hierarchy.n_fine,
        "n_coarse": m.hierarchy.n_coarse,
        "hierarchy": m.hierarchy.to_mapping(),
        "hierarchy_fingerprint": m.hierarchy.fingerprint(),
        "params": sorted(m.params),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE), json.dumps(meta, indent=2))
        for name in sorted(m.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(m.params[name], dtype=np.float64),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", _ZIP_DATE), buf.getvalue())


def load_checkpoint(path, hierarchy: Optional[Hierarchy] = None) -> tuple[HeadModel, dict]:
    """Load a checkpoint; if ``hierarchy`` is given its fingerprint must match."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        params = {
            name: np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
            for name in meta["params"]
        }
    h = parse_hierarchy(json.dumps(meta["hierarchy"]))
    if h.fingerprint() != meta["hierarchy_fingerprint"]:
        raise HierarchyMismatch(f"{path}: stored hierarchy does not match its fingerprint")
    if hierarchy is not None and hierarchy.fingerprint() != h.fingerprint():
        raise HierarchyMismatch(f"{path}: checkpoint hierarchy differs from the dataset's")
    model = HeadModel(Variant(meta["variant"]), h, int(meta["input_dim"]), tuple(meta["hidden"]), params)
    expected = model.param_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise ShapeMismatch(f"{path}: parameter shapes do not match the declared dims")
    return model, meta
