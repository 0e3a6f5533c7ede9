"""Zone-based risk grids over the (true, predicted) plane.

Two kinds are supported: the Clarke error grid for glucose (built in) and
polygon grids loaded from YAML documents.

Clarke zone table (``t`` = reference, ``p`` = prediction, mg/dL), evaluated
top to bottom, first match wins:

====  ====================================================================
zone  condition
====  ====================================================================
A     ``t < 70 and p < 70``, or ``0.8 t <= p <= 1.2 t``
E     ``t <= 70 and p >= 180``, or ``t >= 180 and p <= 70``
C     ``70 <= t <= 290 and p >= t + 110``, or
      ``130 <= t <= 180 and p <= 1.4 t - 182``
D     ``t > 240 and 70 <= p <= 180``, or ``t < 70 and 70 <= p <= 180``
B     everything else
====  ====================================================================
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ConfigurationError, DomainError, GridValidationError, ParseError

CLARKE_WEIGHTS = {"A": 0.0, "B": 1.0, "C": 7.5, "D": 17.5, "E": 37.5}
CLARKE_MAX = 600.0
BUILTIN_GRIDS = ("clarke", "hypo-miss", "bp-example")


class RiskGrid:
    """Common surface: ``zone``, ``risk``, ``risky`` and domain handling.

    Subclasses implement ``_zone_index(true, pred)`` returning indices into
    ``labels``.
    """

    name = "grid"

    def __init__(self, labels, weights, domain, safe_set=("A", "B")):
        self.labels = tuple(labels)
        self.weights = {k: float(v) for k, v in weights.items()}
        missing = [lab for lab in self.labels if lab not in self.weights]
        if missing:
            raise ConfigurationError(f"zones without weights: {missing}")
        bad = [k for k, v in self.weights.items() if not np.isfinite(v) or v < 0]
        if bad:
            raise ConfigurationError(f"weights must be finite and >= 0: {bad}")
        self.domain = (float(domain[0]), float(domain[1]))
        self.safe_set = frozenset(safe_set)
        self._weight_arr = np.array([self.weights[lab] for lab in self.labels])
        self._label_arr = np.array(self.labels, dtype=object)

    @property
    def min_weight(self) -> float:
        return float(self._weight_arr.min())

    def check_domain(self, *arrays):
        lo, hi = self.domain
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            if np.any(~np.isfinite(a)) or np.any(a < lo) or np.any(a > hi):
                raise DomainError(f"{self.name}: values outside domain [{lo}, {hi}]")

    def clamp(self, values):
        lo, hi = self.domain
        return np.clip(values, lo, hi)

    def zone_index(self, true, pred):
        t, p = np.broadcast_arrays(np.asarray(true, dtype=np.float64),
                                   np.asarray(pred, dtype=np.float64))
        self.check_domain(t, p)
        return self._zone_index(t, p)

    def zone(self, true, pred):
        idx = self.zone_index(true, pred)
        out = self._label_arr[idx]
        return out if np.ndim(idx) else str(out)

    def risk(self, true, pred):
        w = self._weight_arr[self.zone_index(true, pred)]
        return w if np.ndim(w) else float(w)

    def risky(self, true, pred, safe_set=None):
        safe = self.safe_set if safe_set is None else frozenset(safe_set)
        safe_mask = np.array([lab in safe for lab in self.labels])
        r = ~safe_mask[self.zone_index(true, pred)]
        return r if np.ndim(r) else bool(r)

    def boundaries(self):
        """Polylines (lists of ``(true, pred)``) for plotting."""
        return []

    def _zone_index(self, t, p):
        raise NotImplementedError


def risk(grid: RiskGrid, true, pred):
    return grid.risk(true, pred)


def risky_flag(grid: RiskGrid, true, pred, safe_set=None):
    return grid.risky(true, pred, safe_set)


# ---------------------------------------------------------------------------
# Clarke

def clarke_zone_masks(t, p):
    """Disjoint boolean masks for zones A..E after priority resolution.

    Ratios are multiplied through (``5 p <= 6 t`` rather than ``p <= 1.2 t``)
    so integer inputs on zone boundaries classify exactly.
    """
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    a = ((t < 70) & (p < 70)) | ((5 * p >= 4 * t) & (5 * p <= 6 * t))
    e = ((t <= 70) & (p >= 180)) | ((t >= 180) & (p <= 70))
    c = (((t >= 70) & (t <= 290) & (p >= t + 110))
         | ((t >= 130) & (t <= 180) & (5 * p <= 7 * t - 910)))
    d = (((t > 240) & (p >= 70) & (p <= 180))
         | ((t < 70) & (p >= 70) & (p <= 180)))
    e &= ~a
    c &= ~(a | e)
    d &= ~(a | e | c)
    b = ~(a | e | c | d)
    return {"A": a, "B": b, "C": c, "D": d, "E": e}


class ClarkeGrid(RiskGrid):
    name = "clarke"

    def __init__(self, weights=None):
        super().__init__("ABCDE", weights or CLARKE_WEIGHTS, (1.0, CLARKE_MAX))

    def check_domain(self, *arrays):
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            if np.any(~np.isfinite(a)) or np.any(a <= 0) or np.any(a > CLARKE_MAX):
                raise DomainError(f"clarke: values must lie in (0, {CLARKE_MAX:g}] mg/dL")

    def _zone_index(self, t, p):
        m = clarke_zone_masks(t, p)
        return np.select([m[k] for k in "ABCDE"], range(5), default=1)

    def boundaries(self):
        top = CLARKE_MAX
        return [
            [(0, 70), (175 / 3, 70), (top / 1.2, top)],
            [(70, 84), (70, top)],
            [(0, 180), (70, 180), (290, 400)],
            [(70, 0), (70, 56), (top, 0.8 * top)],
            [(180, 0), (180, 70), (top, 70)],
            [(240, 70), (240, 180), (top, 180)],
            [(130, 0), (180, 70)],
        ]


def clarke_zone(true, pred):
    """Clarke zone label(s) for reference ``true`` and prediction ``pred``."""
    return ClarkeGrid().zone(true, pred)


# ---------------------------------------------------------------------------
# polygon grids

def _on_segment(px, py, ax, ay, bx, by, tol):
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    seg = np.hypot(bx - ax, by - ay)
    within = ((px >= min(ax, bx) - tol) & (px <= max(ax, bx) + tol)
              & (py >= min(ay, by) - tol) & (py <= max(ay, by) + tol))
    return within & (np.abs(cross) <= tol * max(seg, 1.0))


def polygon_contains(poly, x, y, tol=1e-9):
    """Return ``(inside_or_on_edge, on_edge)`` masks for points ``(x, y)``.

    Even-odd crossing test; ``poly`` is a ``(n, 2)`` vertex array, implicitly
    closed.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    edge = np.zeros_like(inside)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        edge |= _on_segment(x, y, ax, ay, bx, by, tol)
        if ay == by:
            continue
        straddle = (ay > y) != (by > y)
        xcross = ax + (y - ay) * (bx - ax) / (by - ay)
        inside ^= straddle & (x < xcross)
    return inside | edge, edge


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return int(v > 0) - int(v < 0)

    def on(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on(p1, p2, q1)) or (o2 == 0 and on(p1, p2, q2))
            or (o3 == 0 and on(q1, q2, p1)) or (o4 == 0 and on(q1, q2, p2)))


def is_simple_polygon(poly) -> bool:
    n = len(poly)
    if n < 3:
        return False
    edges = [(tuple(poly[i]), tuple(poly[(i + 1) % n])) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


class PolygonGrid(RiskGrid):
    """Risk grid defined by labelled polygons plus a default zone.

    A point lying on or inside several polygons takes the lowest-weight
    zone among them (ties: earliest polygon).  Points covered by no polygon
    take ``default_zone``.
    """

    def __init__(self, name, zones, weights, domain, default_zone=None,
                 safe_set=("A", "B"), validate=True, n_samples=100_000, seed=0):
        self.name = name
        self.zones = [(str(lab), np.asarray(poly, dtype=np.float64)) for lab, poly in zones]
        self.default_zone = default_zone
        labels = list(dict.fromkeys([lab for lab, _ in self.zones]
                                    + ([default_zone] if default_zone is not None else [])))
        super().__init__(labels, weights, domain, safe_set)
        self._poly_label_idx = np.array([self.labels.index(lab) for lab, _ in self.zones])
        poly_w = self._weight_arr[self._poly_label_idx]
        # stable: equal weights keep file order
        self._order = np.argsort(poly_w, kind="stable")
        if validate:
            self.validate(n_samples=n_samples, seed=seed)

    def _zone_index(self, t, p):
        out = np.full(t.shape, -1, dtype=np.int64)
        for k in self._order:
            hit, _ = polygon_contains(self.zones[k][1], t, p)
            take = hit & (out < 0)
            out[take] = self._poly_label_idx[k]
        if np.any(out < 0):
            if self.default_zone is None:
                bad = np.argwhere(out < 0)[0]
                raise DomainError(f"{self.name}: point ({t[tuple(bad)]}, {p[tuple(bad)]}) "
                                  "is covered by no zone and there is no default")
            out[out < 0] = self.labels.index(self.default_zone)
        return out

    def validate(self, n_samples=100_000, seed=0):
        for lab, poly in self.zones:
            if poly.ndim != 2 or poly.shape[1] != 2 or not np.all(np.isfinite(poly)):
                raise GridValidationError(f"zone {lab}: polygon must be a list of [true, pred]")
            if not is_simple_polygon(poly):
                raise GridValidationError(f"zone {lab}: polygon is not simple")
        lo, hi = self.domain
        if not hi > lo:
            raise GridValidationError(f"degenerate domain {self.domain}")
        rng = np.random.default_rng(seed)
        pts = rng.uniform(lo, hi, size=(n_samples, 2))
        strict_w = np.full(n_samples, np.nan)
        covered = np.zeros(n_samples, dtype=bool)
        for k, (lab, poly) in enumerate(self.zones):
            hit, edge = polygon_contains(poly, pts[:, 0], pts[:, 1])
            covered |= hit
            interior = hit & ~edge
            w = self.weights[lab]
            clash = interior & ~np.isnan(strict_w) & (strict_w != w)
            if np.any(clash):
                i = int(np.argmax(clash))
                raise GridValidationError(
                    f"{self.name}: zones with different weights overlap at point "
                    f"({pts[i, 0]:.6g}, {pts[i, 1]:.6g})")
            strict_w = np.where(interior, w, strict_w)
        if self.default_zone is None and not np.all(covered):
            i = int(np.argmin(covered))
            raise GridValidationError(
                f"{self.name}: point ({pts[i, 0]:.6g}, {pts[i, 1]:.6g}) is in no zone "
                "and no default_zone is set")

    def boundaries(self):
        return [[tuple(v) for v in poly] + [tuple(poly[0])] for _, poly in self.zones]

    def to_document(self) -> dict:
        return {
            "format": 1,
            "name": self.name,
            "domain": [self.domain[0], self.domain[1]],
            "default_zone": self.default_zone,
            "safe_set": sorted(self.safe_set),
            "weights": {lab: self.weights[lab] for lab in self.labels},
            "zones": [{"label": lab, "polygon": poly.tolist()} for lab, poly in self.zones],
        }


def load_polygon_grid(path, n_samples=100_000) -> PolygonGrid:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        raise ParseError(f"{path}: {exc}", line=None if line is None else line + 1) from None
    return grid_from_document(doc, n_samples=n_samples, source=str(path))


def grid_from_document(doc, n_samples=100_000, source="<document>") -> PolygonGrid:
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: expected a mapping at top level")
    if doc.get("format") != 1:
        raise ParseError(f"{source}: unsupported or missing format (expected 1)")
    for key in ("name", "domain", "weights", "zones"):
        if key not in doc:
            raise ParseError(f"{source}: missing field {key!r}")
    try:
        zones = [(z["label"], z["polygon"]) for z in doc["zones"]]
    except (TypeError, KeyError):
        raise ParseError(f"{source}: each zone needs 'label' and 'polygon'") from None
    return PolygonGrid(
        name=doc["name"], zones=zones, weights=doc["weights"], domain=doc["domain"],
        default_zone=doc.get("default_zone"), safe_set=doc.get("safe_set", ("A", "B")),
        n_samples=n_samples,
    )


def save_polygon_grid(grid: PolygonGrid, path) -> None:
    Path(path).write_text(yaml.safe_dump(grid.to_document(), sort_keys=False))


def builtin_grid(name: str) -> RiskGrid:
    if name == "clarke":
        return ClarkeGrid()
    if name in ("hypo-miss", "bp-example"):
        text = resources.files("softtraj.grids").joinpath(f"{name}.yaml").read_text()
        return grid_from_document(yaml.safe_load(text), source=name)
    raise ConfigurationError(f"unknown grid {name!r}; builtins are {BUILTIN_GRIDS}")


def resolve_grid(spec: str) -> RiskGrid:
    """Builtin grid name or path to a polygon grid file."""
    if spec in BUILTIN_GRIDS:
        return builtin_grid(spec)
    return load_polygon_grid(spec)
