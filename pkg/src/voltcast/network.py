"""Radial multi-phase feeder model.

A feeder is a tree of buses rooted at bus 0 (the substation). Each bus
carries a subset of the phases ``a``, ``b``, ``c``; each line carries a
3x3 series impedance block in per-unit with zero rows and columns for
the phases it does not carry.

Index conventions used throughout the package
---------------------------------------------
* Bus ids are ``0 .. N``; bus 0 is the slack.
* Branch ``b`` is the line feeding bus ``b + 1``, so branches are ordered
  by child bus id.
* The stacked load vector ``s`` has length ``6N``: all real powers
  (bus-major over buses ``1 .. N``, phase-minor) followed by all reactive
  powers in the same order.
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

PHASES = "abc"


class FeederError(ValueError):
    """Raised when a feeder document or a sensor set fails validation."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _phase_mask(phases: str) -> np.ndarray:
    return np.array([p in phases for p in PHASES])


@dataclass(frozen=True)
class Base:
    voltage_v: float
    power_va: float

    @property
    def impedance_ohm(self) -> float:
        return self.voltage_v**2 / self.power_va


@dataclass(frozen=True)
class Bus:
    id: int
    phases: str
    has_load: bool = False
    name: str | None = None
    # nominal (peak) per-phase load, shape (2, 3): rows p, q in per-unit
    peak: np.ndarray | None = field(default=None, compare=False)

    @property
    def mask(self) -> np.ndarray:
        return _phase_mask(self.phases)


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: np.ndarray = field(compare=False)
    x: np.ndarray = field(compare=False)
    phases: str = "abc"

    @property
    def mask(self) -> np.ndarray:
        return _phase_mask(self.phases)

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * self.x


class Feeder:
    """Immutable radial feeder with cached topology.

    Parameters
    ----------
    buses : sequence of Bus
        Bus ``i`` must have ``id == i``.
    lines : sequence of Line
        Exactly ``len(buses) - 1`` lines forming a tree rooted at bus 0.
    base : Base
        Per-unit base the impedances and peaks are expressed in.
    """

    def __init__(self, buses: Sequence[Bus], lines: Sequence[Line], base: Base):
        self.base = base
        self.buses = tuple(sorted(buses, key=lambda b: b.id))
        n_bus = len(self.buses)
        if n_bus < 2:
            raise FeederError("feeder needs at least two buses")
        for i, b in enumerate(self.buses):
            if b.id != i:
                raise FeederError(f"bus ids must be 0..{n_bus - 1}; missing bus {i}")
            if not b.phases:
                raise FeederError(f"bus {b.id}: empty phase set")
        if len(lines) != n_bus - 1:
            raise FeederError(
                f"non-tree topology: {len(lines)} lines for {n_bus} buses"
            )

        parent = [-1] * n_bus
        by_child: dict[int, Line] = {}
        for ln in lines:
            for end in (ln.from_bus, ln.to_bus):
                if not 0 <= end < n_bus:
                    raise FeederError(f"unknown bus reference: {end}")
            if ln.to_bus == 0 or ln.to_bus in by_child:
                raise FeederError(
                    f"non-tree topology: bus {ln.to_bus} has more than one parent"
                )
            by_child[ln.to_bus] = ln
            parent[ln.to_bus] = ln.from_bus

        children: list[list[int]] = [[] for _ in range(n_bus)]
        for j in range(1, n_bus):
            children[parent[j]].append(j)
        order, depth = [], [0] * n_bus
        stack = [0]
        while stack:
            k = stack.pop()
            order.append(k)
            for c in sorted(children[k], reverse=True):
                depth[c] = depth[k] + 1
                stack.append(c)
        if len(order) != n_bus:
            missing = sorted(set(range(n_bus)) - set(order))
            raise FeederError(
                f"non-tree topology: buses {missing} not reachable from bus 0"
            )

        for ln in lines:
            src, dst = self.buses[ln.from_bus], self.buses[ln.to_bus]
            for ph in ln.phases:
                if ph not in src.phases or ph not in dst.phases:
                    raise FeederError(
                        f"line ({ln.from_bus},{ln.to_bus}): phase {ph} not present "
                        "at both endpoints"
                    )
            if set(dst.phases) - set(ln.phases):
                raise FeederError(
                    f"bus {dst.id}: phases {dst.phases} not all fed by line "
                    f"({ln.from_bus},{ln.to_bus}) carrying {ln.phases}"
                )
            absent = ~ln.mask
            if np.any(ln.r[absent, :]) or np.any(ln.r[:, absent]) or np.any(
                ln.x[absent, :]
            ) or np.any(ln.x[:, absent]):
                raise FeederError(
                    f"line ({ln.from_bus},{ln.to_bus}): nonzero impedance on absent phase"
                )

        self.lines = tuple(by_child[j] for j in range(1, n_bus))
        self.parent = tuple(parent)
        self.children = tuple(tuple(sorted(c)) for c in children)
        self.depth = tuple(depth)
        self.preorder = tuple(order)
        self._rank = {b: i for i, b in enumerate(order)}

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    def phase_mask(self) -> np.ndarray:
        """Boolean array (n_buses, 3) of present phases."""
        return np.array([b.mask for b in self.buses])

    def subtree(self, bus: int) -> list[int]:
        out, stack = [], [bus]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children[k])
        return sorted(out)

    def path_to_root(self, bus: int) -> list[int]:
        out = [bus]
        while out[-1] != 0:
            out.append(self.parent[out[-1]])
        return out

    def hop_distance(self, u: int, v: int) -> int:
        pu, pv = self.path_to_root(u), set(self.path_to_root(v))
        meet = next(k for k in pu if k in pv)
        return self.depth[u] + self.depth[v] - 2 * self.depth[meet]

    def canonical_rank(self, bus: int) -> int:
        return self._rank[bus]

    def peaks(self) -> np.ndarray:
        """Nominal per-phase loads, shape (n_buses, 2, 3); zeros where undeclared."""
        out = np.zeros((self.n_buses, 2, 3))
        for b in self.buses:
            if b.peak is not None:
                out[b.id] = b.peak
        return out

    def to_dict(self) -> dict:
        buses = []
        for b in self.buses:
            d = {"id": b.id, "phases": b.phases, "load": b.has_load}
            if b.name is not None:
                d["name"] = b.name
            if b.peak is not None:
                d["peak"] = {"p": list(map(float, b.peak[0])),
                             "q": list(map(float, b.peak[1])), "unit": "pu"}
            buses.append(d)
        lines = [
            {"from": ln.from_bus, "to": ln.to_bus, "phases": ln.phases,
             "r": ln.r.tolist(), "x": ln.x.tolist(), "unit": "pu"}
            for ln in self.lines
        ]
        return {"base": {"voltage_v": self.base.voltage_v, "power_va": self.base.power_va},
                "buses": buses, "lines": lines}


def _matrix3(raw, what: str) -> np.ndarray:
    try:
        a = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FeederError(f"{what}: impedance entries must be numbers") from exc
    if a.size != 9:
        raise FeederError(f"{what}: impedance needs 9 entries, got {a.size}")
    a = a.reshape(3, 3)
    if not np.all(np.isfinite(a)):
        raise FeederError(f"{what}: non-finite impedance entry")
    return a


def _phase_string(raw, what: str) -> str:
    if not isinstance(raw, str) or not raw or set(raw) - set(PHASES) or len(set(raw)) != len(raw):
        raise FeederError(f"{what}: phases must be a nonempty subset of 'abc', got {raw!r}")
    return "".join(p for p in PHASES if p in raw)


def feeder_from_dict(doc: dict) -> Feeder:
    """Build a validated :class:`Feeder` from a decoded feeder document."""
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")
    for key in ("base", "buses", "lines"):
        if key not in doc:
            raise FeederError(f"schema violation: missing key {key!r}")
    try:
        base = Base(float(doc["base"]["voltage_v"]), float(doc["base"]["power_va"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError("schema violation: base needs voltage_v and power_va") from exc
    if base.voltage_v <= 0 or base.power_va <= 0:
        raise FeederError("schema violation: base values must be positive")

    buses = []
    seen = set()
    for raw in doc["buses"]:
        if not isinstance(raw, dict) or not isinstance(raw.get("id"), int):
            raise FeederError(f"schema violation: bus entry {raw!r} needs integer id")
        bid = raw["id"]
        if bid in seen:
            raise FeederError(f"schema violation: duplicate bus id {bid}")
        seen.add(bid)
        phases = _phase_string(raw.get("phases"), f"bus {bid}")
        peak = None
        if "peak" in raw:
            pk = raw["peak"]
            scale = 1.0
            if pk.get("unit", "pu") == "kw":
                scale = 1e3 / base.power_va
            elif pk.get("unit", "pu") != "pu":
                raise FeederError(f"bus {bid}: peak unit must be 'pu' or 'kw'")
            peak = np.array([pk.get("p", [0, 0, 0]), pk.get("q", [0, 0, 0])],
                            dtype=float) * scale
            if peak.shape != (2, 3):
                raise FeederError(f"bus {bid}: peak p and q need 3 entries each")
            peak[:, ~_phase_mask(phases)] = 0.0
            peak = _freeze(peak)
        buses.append(Bus(bid, phases, bool(raw.get("load", False)), raw.get("name"), peak))
    by_id = {b.id: b for b in buses}

    lines = []
    for raw in doc["lines"]:
        if not isinstance(raw, dict):
            raise FeederError(f"schema violation: line entry {raw!r}")
        try:
            src, dst = int(raw["from"]), int(raw["to"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"schema violation: line {raw!r} needs from/to") from exc
        what = f"line ({src},{dst})"
        for end in (src, dst):
            if end not in by_id:
                raise FeederError(f"unknown bus reference: {end}")
        r = _matrix3(raw.get("r"), what)
        x = _matrix3(raw.get("x"), what)
        unit = raw.get("unit", "pu")
        if unit == "ohm":
            r, x = r / base.impedance_ohm, x / base.impedance_ohm
        elif unit != "pu":
            raise FeederError(f"{what}: unit must be 'ohm' or 'pu'")
        if "phases" in raw:
            phases = _phase_string(raw["phases"], what)
        else:
            phases = by_id[dst].phases
        for name, m in (("resistance", r), ("reactance", x)):
            if not np.allclose(m, m.T, rtol=0.0, atol=1e-9):
                warnings.warn(f"{what}: {name} matrix is not symmetric", stacklevel=2)
        lines.append(Line(src, dst, _freeze(r), _freeze(x), phases))
    return Feeder(buses, lines, base)


def parse_feeder(text: str) -> Feeder:
    """Parse a JSON feeder document.

    Raises
    ------
    FeederError
        On schema violations, non-tree topologies, phase-subset violations
        or unknown bus references. The message names the offending element.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"schema violation: invalid JSON ({exc})") from exc
    return feeder_from_dict(doc)


def load_feeder(path) -> Feeder:
    with open(path) as fh:
        return parse_feeder(fh.read())


def ieee37() -> Feeder:
    """The bundled 37-bus three-phase test feeder (regulator removed)."""
    text = resources.files("voltcast.data").joinpath("ieee37.json").read_text()
    return parse_feeder(text)


class SensorSet:
    """Sensor buses in canonical (pre-order DFS) order, bus 0 first."""

    def __init__(self, feeder: Feeder, buses: Iterable[int]):
        ids = list(buses)
        for b in ids:
            if not isinstance(b, (int, np.integer)) or not 0 <= b < feeder.n_buses:
                raise FeederError(f"unknown bus reference: {b}")
        if len(set(ids)) != len(ids):
            raise FeederError(f"duplicate sensor buses in {ids}")
        ids = set(int(b) for b in ids) | {0}
        self.buses = tuple(sorted(ids, key=feeder.canonical_rank))

    def __len__(self) -> int:
        return len(self.buses)

    def __iter__(self):
        return iter(self.buses)

    def __contains__(self, bus) -> bool:
        return bus in self.buses

    def __repr__(self) -> str:
        return f"SensorSet{self.buses}"


def downstream_matrix(feeder: Feeder) -> np.ndarray:
    """Binary 6N x 6N map from nodal loads to lossless branch flows.

    Row ``3b + k`` (and ``3N + 3b + k`` for reactive power) selects the
    loads on phase ``k`` of every bus in the subtree below branch ``b``.
    """
    n = feeder.n_lines
    sel = np.zeros((n, n))
    for b in range(n):
        for k in feeder.subtree(b + 1):
            sel[b, k - 1] = 1.0
    block = np.kron(sel, np.eye(3))
    out = np.zeros((6 * n, 6 * n))
    out[: 3 * n, : 3 * n] = block
    out[3 * n :, 3 * n :] = block
    return out


def path_matrix(feeder: Feeder, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Signed selector summing per-branch squared-voltage rises along paths.

    For each pair ``(u, v)`` the three rows (one per phase) pick the
    branches between ``u`` and ``v``: ``+1`` where the path runs parent to
    child (towards ``v``) and ``-1`` where it runs child to parent (away
    from ``u``). Applied to per-branch rises ``y_child - y_parent`` this
    yields ``y_v - y_u``. Rows for phases missing at either endpoint are zero.
    """
    n = feeder.n_lines
    out = np.zeros((3 * len(pairs), 3 * n))
    present = feeder.phase_mask()
    for i, (u, v) in enumerate(pairs):
        for end in (u, v):
            if not 0 <= end < feeder.n_buses:
                raise FeederError(f"unknown bus reference: {end}")
        up, vp = feeder.path_to_root(u), feeder.path_to_root(v)
        common = set(up) & set(vp)
        for sign, path in ((-1.0, up), (1.0, vp)):
            for k in path:
                if k in common:
                    break
                line = feeder.lines[k - 1]
                for ph in range(3):
                    if line.mask[ph]:
                        out[3 * i + ph, 3 * (k - 1) + ph] = sign
        for ph in range(3):
            if not (present[u, ph] and present[v, ph]):
                out[3 * i + ph] = 0.0
    return out


def default_sensor_paths(
    feeder: Feeder, sensors: SensorSet
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Measurement and estimation pairs for a sensor placement.

    Returns
    -------
    measurement_pairs : list of (upstream sensor, sensor)
        One per non-root sensor, in canonical sensor order.
    estimation_pairs : list of (nearest sensor, bus)
        One per unmeasured bus, by ascending bus id. The nearest sensor is
        the closest by hop count among sensors carrying every phase of the
        bus; ties go to the smaller id.
    """
    sensor_ids = set(sensors.buses)
    meas = []
    for s in sensors.buses[1:]:
        k = feeder.parent[s]
        while k not in sensor_ids:
            k = feeder.parent[k]
        meas.append((k, s))

    dist = {s: _bfs_hops(feeder, s) for s in sensors.buses}
    phases = [set(b.phases) for b in feeder.buses]
    est = []
    for b in range(feeder.n_buses):
        if b in sensor_ids:
            continue
        cands = [s for s in sensors.buses if phases[b] <= phases[s]] or [0]
        near = min(cands, key=lambda s: (dist[s][b], s))
        est.append((near, b))
    return meas, est


def _bfs_hops(feeder: Feeder, src: int) -> np.ndarray:
    dist = np.full(feeder.n_buses, -1)
    dist[src] = 0
    queue = deque([src])
    while queue:
        k = queue.popleft()
        nbrs = list(feeder.children[k])
        if k != 0:
            nbrs.append(feeder.parent[k])
        for j in nbrs:
            if dist[j] < 0:
                dist[j] = dist[k] + 1
                queue.append(j)
    return dist


# ---------------------------------------------------------------------------
# synthetic feeders
# ---------------------------------------------------------------------------

def _doc(n_bus, edges, r, x, phases="abc", peak=None, base=(1.0, 1.0)):
    buses = []
    for i in range(n_bus):
        d = {"id": i, "phases": phases, "load": i > 0}
        if peak is not None and i > 0:
            p = np.asarray(peak[i], dtype=float)
            d["peak"] = {"p": p[0].tolist(), "q": p[1].tolist(), "unit": "pu"}
        buses.append(d)
    lines = []
    for (m, n) in edges:
        rr, xx = r(m, n), x(m, n)
        lines.append({"from": m, "to": n, "r": rr.tolist(), "x": xx.tolist(), "unit": "pu"})
    return {"base": {"voltage_v": base[0], "power_va": base[1]}, "buses": buses, "lines": lines}


def _block(diag: float, mutual: float, phases: str) -> np.ndarray:
    m = np.full((3, 3), mutual) + np.eye(3) * (diag - mutual)
    mask = _phase_mask(phases)
    m[~mask, :] = 0.0
    m[:, ~mask] = 0.0
    return m


def chain_feeder(n_bus: int, r: float = 0.01, x: float = 0.02, phases: str = "a",
                 r_mutual: float = 0.0, x_mutual: float = 0.0,
                 peak: float | None = None, power_factor: float = 0.9) -> Feeder:
    """Chain ``0 -> 1 -> ... -> n_bus-1`` with identical lines."""
    edges = [(i, i + 1) for i in range(n_bus - 1)]
    pk = None
    if peak is not None:
        pk = _uniform_peaks(n_bus, peak, power_factor, phases)
    doc = _doc(n_bus, edges, lambda m, n: _block(r, r_mutual, phases),
               lambda m, n: _block(x, x_mutual, phases), phases, pk)
    return feeder_from_dict(doc)


def _uniform_peaks(n_bus, peak, pf, phases):
    mask = _phase_mask(phases).astype(float)
    q = peak * np.tan(np.arccos(pf))
    return [np.array([peak * mask, q * mask]) for _ in range(n_bus)]


def random_feeder(n_bus: int, rng: np.random.Generator, phases: str = "abc",
                  r_range=(0.002, 0.01), xr_ratio=(1.0, 2.5), coupling: float = 0.3,
                  peak_range=(0.01, 0.05), power_factor: float = 0.9) -> Feeder:
    """Random radial tree with symmetric, mutually coupled line impedances.

    Each new bus attaches to a uniformly chosen earlier bus, so bus ids are
    already topologically ordered.
    """
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n_bus)]
    rs = rng.uniform(*r_range, size=n_bus)
    xs = rs * rng.uniform(*xr_ratio, size=n_bus)
    pk = []
    mask = _phase_mask(phases).astype(float)
    for i in range(n_bus):
        p = rng.uniform(*peak_range, size=3) * mask
        pk.append(np.array([p, p * np.tan(np.arccos(power_factor))]))
    doc = _doc(n_bus, edges,
               lambda m, n: _block(rs[n], coupling * rs[n], phases),
               lambda m, n: _block(xs[n], coupling * xs[n], phases), phases, pk)
    return feeder_from_dict(doc)
