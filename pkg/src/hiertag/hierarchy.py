"""Two-level tag hierarchy and coarse label induction.

A hierarchy is stored as a JSON object mapping each coarse tag to the list of
its fine (child) tags::

    {"woodwind": ["flute", "clarinet", "saxophone"], "keys": ["piano", "organ"]}

Document order defines the index order of both levels everywhere else in the
package (CSV headers, attention map rows and columns).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateFineTag,
    DuplicateName,
    EmptyGroup,
    LengthMismatch,
    MalformedDocument,
)


class LabelState(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNOBSERVED = -1


POS = int(LabelState.POSITIVE)
NEG = int(LabelState.NEGATIVE)
UNK = int(LabelState.UNOBSERVED)


@dataclass(frozen=True)
class Hierarchy:
    fine_tags: tuple[str, ...]
    coarse_tags: tuple[str, ...]
    parent: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        _validate(self)

    @classmethod
    def from_groups(cls, mapping: dict[str, Sequence[str]]) -> "Hierarchy":
        coarse, fine, parent, groups = [], [], [], []
        seen_fine: dict[str, str] = {}
        for c_idx, (c_name, children) in enumerate(mapping.items()):
            coarse.append(c_name)
            if len(children) == 0:
                raise EmptyGroup(f"coarse tag {c_name!r} has no children")
            members = []
            for f_name in children:
                if f_name in seen_fine:
                    if seen_fine[f_name] == c_name:
                        raise DuplicateName(f"fine tag {f_name!r} listed twice under {c_name!r}")
                    raise DuplicateFineTag(
                        f"fine tag {f_name!r} appears under both {seen_fine[f_name]!r} and {c_name!r}"
                    )
                seen_fine[f_name] = c_name
                members.append(len(fine))
                fine.append(f_name)
                parent.append(c_idx)
            groups.append(tuple(members))
        return cls(tuple(fine), tuple(coarse), tuple(parent), tuple(groups))

    @property
    def n_fine(self) -> int:
        return len(self.fine_tags)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_tags)

    def to_mapping(self) -> dict[str, list[str]]:
        return {
            c: [self.fine_tags[i] for i in self.groups[k]]
            for k, c in enumerate(self.coarse_tags)
        }

    def to_json(self) -> str:
        return json.dumps(self.to_mapping(), indent=2) + "\n"

    def fingerprint(self) -> str:
        """Stable sha256 over the canonical document; order-sensitive on purpose."""
        canon = json.dumps(self.to_mapping(), separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @cached_property
    def parent_index(self) -> np.ndarray:
        return np.asarray(self.parent, dtype=np.intp)

    @cached_property
    def group_index(self) -> tuple[np.ndarray, ...]:
        return tuple(np.asarray(g, dtype=np.intp) for g in self.groups)


def _validate(h: Hierarchy) -> None:
    if len(h.fine_tags) < 1 or len(h.coarse_tags) < 1:
        raise MalformedDocument("hierarchy needs at least one coarse and one fine tag")
    names = list(h.fine_tags) + list(h.coarse_tags)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateName(f"tag names must be unique across levels: {dupes}")
    if len(h.parent) != len(h.fine_tags) or len(h.groups) != len(h.coarse_tags):
        raise MalformedDocument("parent/groups do not match tag counts")
    covered: list[int] = []
    for c, members in enumerate(h.groups):
        if not members:
            raise EmptyGroup(f"coarse tag {h.coarse_tags[c]!r} has no children")
        for i in members:
            if h.parent[i] != c:
                raise MalformedDocument(f"fine index {i} listed under {c} but parent is {h.parent[i]}")
        covered.extend(members)
    if sorted(covered) != list(range(len(h.fine_tags))):
        raise DuplicateFineTag("groups must partition the fine tags")


def _reject_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise DuplicateName(f"duplicate coarse tag in document: {keys}")
    return dict(pairs)


def parse_hierarchy(text: str) -> Hierarchy:
    """Parse and validate a hierarchy config document."""
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not doc:
        raise MalformedDocument("hierarchy must be a non-empty JSON object")
    for coarse, children in doc.items():
        if not isinstance(children, list):
            # nested objects would mean a deeper tree
            raise MalformedDocument(f"children of {coarse!r} must be an array of fine tag names")
        for name in children:
            if not isinstance(name, str) or not name:
                raise MalformedDocument(f"fine tags under {coarse!r} must be non-empty strings")
        if not coarse:
            raise MalformedDocument("coarse tag names must be non-empty")
    return Hierarchy.from_groups(doc)


def load_hierarchy(path) -> Hierarchy:
    with open(path, encoding="utf-8") as fh:
        return parse_hierarchy(fh.read())


def induce_coarse_labels(fine_states: Sequence[int], h: Hierarchy) -> list[LabelState]:
    """Coarse states for one sample.

    Positive if any child is positive, Negative if every child is observed and
    negative, Unobserved otherwise.
    """
    states = np.asarray(fine_states, dtype=np.int8)
    if states.ndim != 1 or states.shape[0] != h.n_fine:
        raise LengthMismatch(f"expected {h.n_fine} fine states, got shape {states.shape}")
    return [LabelState(int(v)) for v in induce_coarse_matrix(states[None, :], h)[0]]


def induce_coarse_matrix(fine_states: np.ndarray, h: Hierarchy) -> np.ndarray:
    """Row-wise ``induce_coarse_labels`` over an (n, N_fine) state matrix."""
    fs = np.asarray(fine_states, dtype=np.int8)
    if fs.ndim != 2 or fs.shape[1] != h.n_fine:
        raise LengthMismatch(f"expected (n, {h.n_fine}) fine states, got {fs.shape}")
    out = np.full((fs.shape[0], h.n_coarse), UNK, dtype=np.int8)
    for c, idx in enumerate(h.group_index):
        sub = fs[:, idx]
        any_pos = (sub == POS).any(axis=1)
        all_neg = (sub == NEG).all(axis=1)
        out[any_pos, c] = POS
        out[all_neg, c] = NEG
    return out
