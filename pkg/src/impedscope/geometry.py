"""Probe electrode layout, IIVV pattern enumeration and pattern masks.

An IIVV pattern pairs a current-injection electrode pair (II, drawn from the
outer ring) with a voltage-measurement pair (VV, drawn from the inner grid).
Masks are named subsets of the full pattern universe. Geometric masks are
defined declaratively in ``masks.json``; the impedance-threshold mask is
computed from measured data.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RELATIONS = {1: "adjacent", 2: "skip1", 3: "skip2", 4: "opposite"}
PAIRINGS = ("all", "within_line", "line_ends")


class GeometryError(ValueError):
    pass


class MaskValidationError(ValueError):
    """A mask's cardinality or rule set does not match its declaration."""

    def __init__(self, name, message):
        super().__init__(f"mask {name!r}: {message}")
        self.mask_name = name


@dataclass(frozen=True)
class Electrode:
    id: int
    role: str
    x: float
    y: float
    diameter: float
    row: int | None = None
    col: int | None = None


@dataclass(frozen=True)
class ElectrodeArray:
    """Inner voltage grid plus outer current-injection ring.

    ``ring_order`` lists outer electrode ids in angular order; the index
    difference along the ring defines the II relation (adjacent, skip1,
    skip2, opposite).
    """

    inner: tuple[Electrode, ...]
    outer: tuple[Electrode, ...]
    ring_order: tuple[int, ...] = ()
    excluded: tuple[int, ...] = ()
    name: str = "custom"
    calibration: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.inner] + [e.id for e in self.outer]
        if len(set(ids)) != len(ids):
            raise GeometryError("electrode ids must be unique")
        if len(self.inner) < 2 or len(self.outer) < 2:
            raise GeometryError("need at least two inner and two outer electrodes")
        if self.ring_order and sorted(self.ring_order) != sorted(e.id for e in self.outer):
            raise GeometryError("ring_order must be a permutation of the outer ids")

    @classmethod
    def from_dict(cls, cfg: dict) -> "ElectrodeArray":
        inner, outer = [], []
        for e in cfg["electrodes"]:
            el = Electrode(
                id=int(e["id"]),
                role=e["role"],
                x=float(e["x"]),
                y=float(e["y"]),
                diameter=float(e.get("diameter", 0.0)),
                row=e.get("row"),
                col=e.get("col"),
            )
            if el.role == "inner":
                inner.append(el)
            elif el.role == "outer":
                outer.append(el)
            else:
                raise GeometryError(f"unknown electrode role {el.role!r}")
        return cls(
            inner=tuple(sorted(inner, key=lambda e: e.id)),
            outer=tuple(sorted(outer, key=lambda e: e.id)),
            ring_order=tuple(cfg.get("ring_order", ())),
            excluded=tuple(cfg.get("excluded", ())),
            name=cfg.get("name", "custom"),
            calibration=dict(cfg.get("calibration", {})),
        )

    @classmethod
    def load(cls, path=None) -> "ElectrodeArray":
        return cls.from_dict(_load_json(path, "geometry.json"))

    @classmethod
    def default(cls) -> "ElectrodeArray":
        return _default_array()

    @cached_property
    def _xy(self) -> dict[int, tuple[float, float]]:
        return {e.id: (e.x, e.y) for e in self.inner + self.outer}

    def distance(self, a: int, b: int) -> float:
        (xa, ya), (xb, yb) = self._xy[a], self._xy[b]
        return math.hypot(xa - xb, ya - yb)

    @property
    def inner_ids(self) -> tuple[int, ...]:
        return tuple(e.id for e in self.inner)

    @property
    def outer_ids(self) -> tuple[int, ...]:
        return tuple(e.id for e in self.outer)

    def relation(self, a: int, b: int) -> str:
        """Ring relation of an outer pair: adjacent, skip1, skip2 or opposite."""
        if not self.ring_order:
            raise GeometryError("array has no ring_order; II relations undefined")
        n = len(self.ring_order)
        d = abs(self.ring_order.index(a) - self.ring_order.index(b))
        d = min(d, n - d)
        if n != 8:
            return f"step{d}"
        return RELATIONS[d]

    def lines(self) -> dict[str, tuple[int, ...]]:
        """Grid rows ``r<i>`` and columns ``c<j>`` of the inner electrodes."""
        out: dict[str, list[int]] = {}
        for e in self.inner:
            if e.row is None or e.col is None:
                continue
            out.setdefault(f"r{e.row}", []).append(e.id)
            out.setdefault(f"c{e.col}", []).append(e.id)
        return {k: tuple(sorted(v)) for k, v in sorted(out.items())}


@dataclass(frozen=True, order=True)
class IIVVPattern:
    ii: tuple[int, int]
    vv: tuple[int, int]

    def __post_init__(self):
        if set(self.ii) & set(self.vv):
            raise GeometryError("II and VV electrodes must be disjoint")
        object.__setattr__(self, "ii", tuple(sorted(self.ii)))
        object.__setattr__(self, "vv", tuple(sorted(self.vv)))


class PatternUniverse:
    """All II pairs x all VV pairs in canonical (lexicographic) order."""

    def __init__(self, array: ElectrodeArray):
        self.array = array
        self.ii_pairs = list(itertools.combinations(sorted(array.outer_ids), 2))
        self.vv_pairs = list(itertools.combinations(sorted(array.inner_ids), 2))
        n_vv = len(self.vv_pairs)
        self.ii = np.repeat(np.array(self.ii_pairs, dtype=np.int64), n_vv, axis=0)
        self.vv = np.tile(np.array(self.vv_pairs, dtype=np.int64), (len(self.ii_pairs), 1))
        self._ii_index = {p: i for i, p in enumerate(self.ii_pairs)}
        self._vv_index = {p: i for i, p in enumerate(self.vv_pairs)}

    def __len__(self):
        return len(self.ii_pairs) * len(self.vv_pairs)

    def __getitem__(self, i: int) -> IIVVPattern:
        return IIVVPattern(tuple(self.ii[i]), tuple(self.vv[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def index(self, ii, vv) -> int:
        a = self._ii_index[tuple(sorted(ii))]
        b = self._vv_index[tuple(sorted(vv))]
        return a * len(self.vv_pairs) + b

    @cached_property
    def ii_distance(self) -> np.ndarray:
        d = np.array([self.array.distance(a, b) for a, b in self.ii_pairs])
        return np.repeat(d, len(self.vv_pairs))

    @cached_property
    def vv_distance(self) -> np.ndarray:
        d = np.array([self.array.distance(a, b) for a, b in self.vv_pairs])
        return np.tile(d, len(self.ii_pairs))


def enumerate_all(array: ElectrodeArray) -> PatternUniverse:
    """Every (II pair, VV pair) combination, deterministic order."""
    return PatternUniverse(array)


@dataclass(frozen=True)
class MaskSet:
    name: str
    indices: np.ndarray
    expected_count: int | None = None
    mean_ii_distance: float | None = None
    mean_vv_distance: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return int(self.indices.size)


def mask_stats(mask: MaskSet, array: ElectrodeArray, universe: PatternUniverse | None = None):
    """Mean II and VV electrode-centre distances (mm) over the mask's patterns."""
    if len(mask) == 0:
        raise ValueError(f"mask {mask.name!r} is empty")
    universe = universe or _universe_for(array)
    ii = float(np.mean(universe.ii_distance[mask.indices]))
    vv = float(np.mean(universe.vv_distance[mask.indices]))
    return ii, vv


def load_mask_rules(path=None) -> dict[str, dict]:
    cfg = _load_json(path, "masks.json")
    return {m["name"]: m for m in cfg["masks"]}


def mask_names(rules: dict | None = None) -> list[str]:
    return list((rules or load_mask_rules()).keys())


def _rule_vv_pairs(rule: dict, pairing: str, lines: dict, array: ElectrodeArray, max_vv):
    chosen = [f"r{r}" for r in rule.get("rows", ())] + [f"c{c}" for c in rule.get("cols", ())]
    for name in chosen:
        if name not in lines:
            raise GeometryError(f"unknown grid line {name}")
    groups = [lines[n] for n in chosen]
    extra = tuple(rule.get("electrodes", ()))
    if pairing == "all":
        members = sorted(set(itertools.chain(extra, *groups)))
        pairs = set(itertools.combinations(members, 2))
    elif pairing == "within_line":
        pairs = {p for g in groups for p in itertools.combinations(g, 2)}
    elif pairing == "line_ends":
        pairs = {(g[0], g[-1]) for g in groups if len(g) >= 2}
    else:
        raise GeometryError(f"unknown pairing {pairing!r}")
    if max_vv is not None:
        pairs = {p for p in pairs if array.distance(*p) <= max_vv + 1e-9}
    return sorted(pairs)


def build_geometric_mask(
    name: str,
    array: ElectrodeArray | None = None,
    rules: dict | None = None,
    validate: bool = True,
) -> MaskSet:
    """Materialise a named geometric mask from its declarative rule entry.

    Raises ``MaskValidationError`` when ``validate`` is set and the resulting
    cardinality differs from the declared ``expected_count``, or when the
    per-pair rules do not cover the declared II relation exactly once.
    """
    array = array or ElectrodeArray.default()
    rules = rules if rules is not None else load_mask_rules()
    if name not in rules:
        raise KeyError(f"unknown mask {name!r}; known: {sorted(rules)}")
    spec = rules[name]
    universe = _universe_for(array)
    expected = spec.get("expected_count")

    if spec.get("select") == "all":
        idx = np.arange(len(universe))
    else:
        relation = spec["ii_relation"]
        pairing = spec.get("pairing", "all")
        lines = array.lines()
        seen = set()
        idx = []
        for rule in spec["rules"]:
            ii = tuple(sorted(rule["ii"]))
            if array.relation(*ii) != relation:
                raise MaskValidationError(name, f"II pair {ii} is not {relation}")
            if ii in seen:
                raise MaskValidationError(name, f"II pair {ii} listed twice")
            seen.add(ii)
            for vv in _rule_vv_pairs(rule, pairing, lines, array, spec.get("max_vv_mm")):
                idx.append(universe.index(ii, vv))
        if validate:
            want = {p for p in universe.ii_pairs if array.relation(*p) == relation}
            if seen != want:
                raise MaskValidationError(
                    name, f"rules cover {len(seen)} of {len(want)} {relation} II pairs"
                )
    mask = MaskSet(name=name, indices=np.asarray(idx, dtype=np.int64), expected_count=expected)
    if validate and expected is not None and len(mask) != expected:
        raise MaskValidationError(name, f"expected {expected} patterns, rules give {len(mask)}")
    if len(mask):
        ii_d, vv_d = mask_stats(mask, array, universe)
        mask = MaskSet(name, mask.indices, expected, ii_d, vv_d, dict(spec.get("reference", {})))
    return mask


def validate_masks(array: ElectrodeArray | None = None, rules: dict | None = None) -> list[dict]:
    """Compare every declared mask with its reference cardinality and distances."""
    array = array or ElectrodeArray.default()
    rules = rules if rules is not None else load_mask_rules()
    universe = _universe_for(array)
    rows = []
    for name, spec in rules.items():
        row = {"mask": name, "expected": spec.get("expected_count"), "error": ""}
        try:
            m = build_geometric_mask(name, array, rules, validate=False)
        except (GeometryError, MaskValidationError, KeyError) as exc:
            row.update(actual=None, ok=False, error=str(exc))
            rows.append(row)
            continue
        ii_e = set(universe.ii[m.indices].ravel().tolist())
        vv_e = set(universe.vv[m.indices].ravel().tolist())
        ref = spec.get("reference", {})
        row.update(
            actual=len(m),
            ii_electrodes=len(ii_e),
            vv_electrodes=len(vv_e),
            mean_ii_mm=m.mean_ii_distance,
            mean_vv_mm=m.mean_vv_distance,
            ref_ii_electrodes=ref.get("ii_electrodes"),
            ref_vv_electrodes=ref.get("vv_electrodes"),
            ref_ii_mm=ref.get("ii_distance_mm"),
            ref_vv_mm=ref.get("vv_distance_mm"),
        )
        try:
            build_geometric_mask(name, array, rules, validate=True)
            row["ok"] = True
        except MaskValidationError as exc:
            row["ok"] = False
            row["error"] = str(exc)
        rows.append(row)
    return rows


def frequency_index_nearest(frequencies, target_hz: float) -> int:
    f = np.asarray(frequencies, dtype=float)
    return int(np.argmin(np.abs(np.log(f) - math.log(target_hz))))


def pattern_means_at(zmag: np.ndarray, valid: np.ndarray, freq_index: int) -> np.ndarray:
    """Mean |Z| per pattern at one frequency over samples where it is valid.

    ``zmag`` is (samples, patterns, frequencies); patterns never valid give NaN.
    """
    z = zmag[:, :, freq_index]
    v = valid & np.isfinite(z)
    counts = v.sum(axis=0)
    sums = np.where(v, z, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def build_zthreshold_mask(pattern_means: np.ndarray, threshold_ohm: float, side: str) -> MaskSet:
    """Patterns whose cohort-mean |Z| at 100 Hz lies below or above a threshold.

    ``below`` keeps ``mean < threshold``; ``above`` keeps ``mean >= threshold``,
    so both sides partition every pattern with a finite mean.
    """
    if side not in ("below", "above"):
        raise ValueError("side must be 'below' or 'above'")
    m = np.asarray(pattern_means, dtype=float)
    finite = np.isfinite(m)
    if side == "below":
        keep = finite & (m < threshold_ohm)
    else:
        keep = finite & (m >= threshold_ohm)
    if not keep.any():
        logger.warning("z-threshold %.6g (%s) selects no patterns", threshold_ohm, side)
    return MaskSet(
        name="z-threshold",
        indices=np.flatnonzero(keep),
        meta={"threshold_ohm": float(threshold_ohm), "side": side},
    )


def _load_json(path, default_name):
    if path is None:
        text = resources.files("impedscope.data").joinpath(default_name).read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


_ARRAY_CACHE: dict[str, ElectrodeArray] = {}
_UNIVERSE_CACHE: dict[int, PatternUniverse] = {}


def _default_array() -> ElectrodeArray:
    if "default" not in _ARRAY_CACHE:
        _ARRAY_CACHE["default"] = ElectrodeArray.load()
    return _ARRAY_CACHE["default"]


def _universe_for(array: ElectrodeArray) -> PatternUniverse:
    key = id(array)
    u = _UNIVERSE_CACHE.get(key)
    if u is None or u.array is not array:
        u = PatternUniverse(array)
        _UNIVERSE_CACHE[key] = u
    return u
