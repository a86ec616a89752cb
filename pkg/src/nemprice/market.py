"""Network topology, panel datasets, CSV ingestion and the price transform."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    AlignmentError,
    ComplementarityError,
    DegenerateCovariateError,
    TransformDomainError,
    ValidationError,
)

log = logging.getLogger(__name__)

DEFAULT_FLOOR_OFFSET = 1001.0
DEFAULT_PRICE_FLOOR = -1000.0
CSV_FILES = {"prices": "prices.csv", "loads": "loads.csv", "flows": "flows.csv", "losses": "losses.csv"}


@dataclass(frozen=True)
class Arc:
    id: str
    origin: str
    destination: str
    nominal_capacity: float
    max_capacity: float


@dataclass(frozen=True)
class MarketNetwork:
    """Regions joined by directed arcs; each physical interconnector is a pair of arcs."""

    regions: tuple[str, ...]
    arcs: tuple[Arc, ...] = ()
    arc_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "arcs", tuple(self.arcs))
        object.__setattr__(self, "arc_pairs", tuple(tuple(p) for p in self.arc_pairs))
        if len(set(self.regions)) != len(self.regions):
            raise ValidationError("duplicate region identifiers")
        ids = [a.id for a in self.arcs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate arc identifiers")
        for a in self.arcs:
            if a.origin not in self.regions or a.destination not in self.regions:
                raise ValidationError(f"arc {a.id} references an unknown region")
            if a.origin == a.destination:
                raise ValidationError(f"arc {a.id} has origin == destination")
            if not (a.nominal_capacity > 0 and a.max_capacity > 0):
                raise ValidationError(f"arc {a.id} capacities must be positive")
        seen = [x for p in self.arc_pairs for x in p]
        if sorted(seen) != sorted(ids):
            raise ValidationError("every arc must appear in exactly one arc pair")
        for fwd, rev in self.arc_pairs:
            a, b = self.arc(fwd), self.arc(rev)
            if (a.origin, a.destination) != (b.destination, b.origin):
                raise ValidationError(f"arc pair ({fwd}, {rev}) is not a reverse pair")

    @property
    def r(self) -> int:
        return len(self.regions)

    @property
    def arc_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.arcs)

    def region_index(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise ValidationError(f"unknown region {region!r}") from None

    def arc(self, arc_id: str) -> Arc:
        for a in self.arcs:
            if a.id == arc_id:
                return a
        raise ValidationError(f"unknown arc {arc_id!r}")

    def arc_index(self, arc_id: str) -> int:
        return self.arc_ids.index(self.arc(arc_id).id)

    def arcs_between(self, origin: str, destination: str) -> list[str]:
        """The arc set E_{i,j}: all arcs from `origin` to `destination`."""
        self.region_index(origin)
        self.region_index(destination)
        return [a.id for a in self.arcs if a.origin == origin and a.destination == destination]

    def exports(self, region: str) -> list[str]:
        self.region_index(region)
        return [a.id for a in self.arcs if a.origin == region]

    def imports(self, region: str) -> list[str]:
        self.region_index(region)
        return [a.id for a in self.arcs if a.destination == region]

    def to_dict(self) -> dict:
        return {
            "regions": list(self.regions),
            "arcs": [
                {
                    "id": a.id,
                    "origin": a.origin,
                    "destination": a.destination,
                    "nominal_capacity": a.nominal_capacity,
                    "max_capacity": a.max_capacity,
                }
                for a in self.arcs
            ],
            "arc_pairs": [list(p) for p in self.arc_pairs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MarketNetwork":
        try:
            arcs = tuple(
                Arc(
                    id=str(a["id"]),
                    origin=str(a["origin"]),
                    destination=str(a["destination"]),
                    nominal_capacity=float(a["nominal_capacity"]),
                    max_capacity=float(a.get("max_capacity", a["nominal_capacity"])),
                )
                for a in d.get("arcs", [])
            )
            return cls(tuple(d["regions"]), arcs, tuple(tuple(p) for p in d.get("arc_pairs", [])))
        except KeyError as exc:
            raise ValidationError(f"network config missing field {exc}") from None

    @classmethod
    def nem(cls) -> "MarketNetwork":
        """The five-region NEM with its twelve directed interconnector flows."""
        rows = [
            ("v1", "QLD", "NSW", 180, 231),
            ("v2", "NSW", "QLD", 180, 50),
            ("v3", "QLD", "NSW", 1078, 1078),
            ("v4", "NSW", "QLD", 700, 410),
            ("v5", "NSW", "VIC", 1350, 1348),
            ("v6", "VIC", "NSW", 1550, 1525),
            ("v7", "SA", "VIC", 460, 455),
            ("v8", "VIC", "SA", 460, 457),
            ("v9", "SA", "VIC", 220, 172),
            ("v10", "VIC", "SA", 220, 220),
            ("v11", "VIC", "TAS", 480, 478),
            ("v12", "TAS", "VIC", 600, 594),
        ]
        arcs = tuple(Arc(i, o, d, float(n), float(m)) for i, o, d, n, m in rows)
        pairs = (("v1", "v2"), ("v3", "v4"), ("v5", "v6"), ("v7", "v8"), ("v9", "v10"), ("v11", "v12"))
        return cls(("NSW", "QLD", "SA", "TAS", "VIC"), arcs, pairs)


def load_network(path: str | Path) -> MarketNetwork:
    """Read a network from a TOML file with ``regions``, ``[[arcs]]`` and ``arc_pairs``."""
    import tomli

    with open(path, "rb") as fh:
        try:
            cfg = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    return MarketNetwork.from_dict(cfg.get("network", cfg))


@dataclass(frozen=True)
class TransformSpec:
    floor_offset: float = DEFAULT_FLOOR_OFFSET
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.floor_offset > 0:
            raise ValidationError("floor_offset must be positive")
        for name, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise DegenerateCovariateError(f"covariate {name!r} has max <= min")


def log_transform(price, spec: TransformSpec | float = DEFAULT_FLOOR_OFFSET):
    """Return ln(price + floor_offset)."""
    offset = spec.floor_offset if isinstance(spec, TransformSpec) else float(spec)
    p = np.asarray(price, dtype=float)
    shifted = p + offset
    if np.any(~(shifted > 0)):
        bad = np.flatnonzero(~(np.atleast_1d(shifted) > 0))[0]
        raise TransformDomainError(
            f"price {np.atleast_1d(p)[bad]} is at or below the floor offset -{offset}"
        )
    return np.log(shifted)


def inverse_log_transform(log_price, spec: TransformSpec | float = DEFAULT_FLOOR_OFFSET):
    offset = spec.floor_offset if isinstance(spec, TransformSpec) else float(spec)
    return np.exp(np.asarray(log_price, dtype=float)) - offset


def normalize_covariate(x, bounds: tuple[float, float]):
    """Affine map of `x` using training `bounds` so that min -> 0 and max -> 1.

    Values outside the training range are not clipped.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not hi > lo:
        raise DegenerateCovariateError(f"degenerate covariate bounds ({lo}, {hi})")
    out = (np.asarray(x, dtype=float) - lo) / (hi - lo)
    n_out = int(np.count_nonzero((out < 0) | (out > 1)))
    if n_out:
        log.debug("%d covariate values fall outside the training range", n_out)
    return out


def covariate_bounds(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise DegenerateCovariateError(f"covariate is constant ({lo})")
    return lo, hi


def flow_bounds(v) -> tuple[float, float]:
    """Bounds for an arc flow: anchored at zero so that c_a(0) = 0."""
    hi = float(np.max(v))
    if not hi > 0:
        raise DegenerateCovariateError("arc flow is identically zero")
    return 0.0, hi


def supply_from_arrays(network: MarketNetwork, region: str, load, flow, loss_adj):
    """b = load + exports - imports + loss adjustment.

    ``flow`` has shape (T, n_arcs) in ``network.arc_ids`` order.
    """
    flow = np.asarray(flow, dtype=float)
    ex = [network.arc_index(a) for a in network.exports(region)]
    im = [network.arc_index(a) for a in network.imports(region)]
    out = np.asarray(load, dtype=float) + np.asarray(loss_adj, dtype=float)
    if ex:
        out = out + flow[..., ex].sum(axis=-1)
    if im:
        out = out - flow[..., im].sum(axis=-1)
    return out


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Aligned, equally spaced series; arrays are (T, r) or (T, n_arcs) and read-only."""

    network: MarketNetwork
    timestamps: np.ndarray
    price: np.ndarray
    load: np.ndarray
    flow: np.ndarray
    loss_adj: np.ndarray
    supply: np.ndarray
    log_price: np.ndarray
    period_minutes: int
    floor_offset: float = DEFAULT_FLOOR_OFFSET

    @classmethod
    def build(
        cls,
        network: MarketNetwork,
        timestamps,
        price,
        load,
        flow=None,
        loss_adj=None,
        *,
        floor_offset: float = DEFAULT_FLOOR_OFFSET,
        price_floor: float = DEFAULT_PRICE_FLOOR,
        strict: bool = True,
    ) -> "PanelDataset":
        """Validate raw arrays and derive supply and log price.

        With ``strict=False`` a simultaneous positive flow on both arcs of a pair
        is repaired by zeroing the smaller one (with a warning).
        """
        ts = np.asarray(pd.to_datetime(np.asarray(timestamps)).values, dtype="datetime64[s]")
        T, r, A = len(ts), network.r, len(network.arcs)
        price = np.asarray(price, dtype=float).reshape(T, r)
        load = np.asarray(load, dtype=float).reshape(T, r)
        flow = np.zeros((T, A)) if flow is None else np.array(flow, dtype=float).reshape(T, A)
        loss_adj = np.zeros((T, r)) if loss_adj is None else np.asarray(loss_adj, dtype=float).reshape(T, r)
        if T < 2:
            raise ValidationError("a dataset needs at least two periods")
        steps = np.diff(ts).astype(np.int64)
        if np.any(steps <= 0):
            k = int(np.flatnonzero(steps <= 0)[0]) + 1
            raise ValidationError(f"timestamps not strictly increasing at {ts[k]}")
        if np.any(steps != steps[0]):
            k = int(np.flatnonzero(steps != steps[0])[0]) + 1
            raise ValidationError(f"timestamps not equally spaced at {ts[k]}")
        for name, arr in (("price", price), ("load", load), ("flow", flow), ("loss_adj", loss_adj)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        if np.any(flow < 0):
            t, a = (int(x) for x in np.argwhere(flow < 0)[0])
            raise ValidationError(f"negative flow on arc {network.arc_ids[a]} at t={t} ({ts[t]})")
        for fwd, rev in network.arc_pairs:
            i, j = network.arc_index(fwd), network.arc_index(rev)
            both = (flow[:, i] > 0) & (flow[:, j] > 0)
            if np.any(both):
                t = int(np.flatnonzero(both)[0])
                if strict:
                    raise ComplementarityError(
                        f"arcs {fwd} and {rev} both positive at t={t} ({ts[t]})"
                    )
                log.warning("zeroing smaller flow on pair (%s, %s) at %d periods", fwd, rev, both.sum())
                small_i = both & (flow[:, i] <= flow[:, j])
                small_j = both & ~small_i
                flow[small_i, i] = 0.0
                flow[small_j, j] = 0.0
        if np.any(price < price_floor):
            t, k = (int(x) for x in np.argwhere(price < price_floor)[0])
            raise ValidationError(f"price below floor {price_floor} in {network.regions[k]} at t={t}")
        log_price = log_transform(price, floor_offset)
        supply = np.column_stack(
            [supply_from_arrays(network, reg, load[:, k], flow, loss_adj[:, k]) for k, reg in enumerate(network.regions)]
        ) if r else np.zeros((T, 0))
        if np.any(supply <= 0):
            t, k = (int(x) for x in np.argwhere(supply <= 0)[0])
            raise ValidationError(f"non-positive supply in {network.regions[k]} at t={t}")
        return cls(
            network=network,
            timestamps=ts,
            price=_readonly(price),
            load=_readonly(load),
            flow=_readonly(flow),
            loss_adj=_readonly(loss_adj),
            supply=_readonly(supply),
            log_price=_readonly(log_price),
            period_minutes=int(steps[0] // 60),
            floor_offset=float(floor_offset),
        )

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def regions(self) -> tuple[str, ...]:
        return self.network.regions

    @property
    def periods_per_day(self) -> int:
        return int(round(24 * 60 / self.period_minutes))

    def column(self, kind: str, name: str) -> np.ndarray:
        """One series by kind ('price', 'load', 'loss_adj', 'supply', 'log_price', 'flow') and name."""
        if kind == "flow":
            return self.flow[:, self.network.arc_index(name)]
        return getattr(self, kind)[:, self.network.region_index(name)]

    def window(self, start: int, stop: int) -> "PanelDataset":
        """Rows ``start:stop`` as a new dataset (already validated, so only re-derived)."""
        sl = slice(start, stop)
        return PanelDataset(
            self.network, self.timestamps[sl], self.price[sl], self.load[sl], self.flow[sl],
            self.loss_adj[sl], self.supply[sl], self.log_price[sl], self.period_minutes, self.floor_offset,
        )

    def equals(self, other: "PanelDataset") -> bool:
        return (
            self.network == other.network
            and self.period_minutes == other.period_minutes
            and np.array_equal(self.timestamps, other.timestamps)
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("price", "load", "flow", "loss_adj", "supply", "log_price")
            )
        )


def build_supply(dataset: PanelDataset, network: MarketNetwork, region: str) -> np.ndarray:
    """Supply series for `region` recomputed from loads, flows and loss adjustment."""
    k = network.region_index(region)
    return supply_from_arrays(network, region, dataset.load[:, k], dataset.flow, dataset.loss_adj[:, k])


def _read_frame(path, columns: Sequence[str], kind: str) -> tuple[np.ndarray, np.ndarray]:
    df = pd.read_csv(path, float_precision="round_trip")
    if "timestamp" not in df.columns:
        raise ValidationError(f"{path}: missing 'timestamp' column")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing {kind} columns {missing}")
    ts = pd.to_datetime(df["timestamp"]).values.astype("datetime64[s]")
    return ts, df[list(columns)].to_numpy(dtype=float)


def ingest_csv(
    paths: Mapping[str, str | Path] | str | Path,
    network: MarketNetwork,
    *,
    strict: bool = True,
    floor_offset: float = DEFAULT_FLOOR_OFFSET,
) -> PanelDataset:
    """Read prices/loads/flows/losses CSV files into a validated dataset.

    ``paths`` is either a directory holding the standard file names or a
    mapping with keys ``prices``, ``loads`` and optionally ``flows``, ``losses``.
    """
    if isinstance(paths, (str, Path)):
        base = Path(paths)
        paths = {k: base / v for k, v in CSV_FILES.items() if (base / v).exists()}
    for key in ("prices", "loads"):
        if key not in paths:
            raise ValidationError(f"missing required input {key!r}")
    ts, price = _read_frame(paths["prices"], network.regions, "region")
    frames = {"loads": network.regions, "flows": network.arc_ids, "losses": network.regions}
    arrays = {}
    for key, cols in frames.items():
        if key not in paths:
            arrays[key] = None
            continue
        ts_k, arr = _read_frame(paths[key], cols, "arc" if key == "flows" else "region")
        if len(ts_k) != len(ts) or np.any(ts_k != ts):
            n = min(len(ts_k), len(ts))
            bad = np.flatnonzero(ts_k[:n] != ts[:n])
            stamp = ts_k[bad[0]] if len(bad) else (ts_k[n] if len(ts_k) > n else ts[n])
            raise AlignmentError(f"{paths[key]}: timestamps misaligned with prices at {stamp}")
        arrays[key] = arr
    if arrays["flows"] is None and network.arcs:
        raise ValidationError("network has arcs but no flows file was given")
    return PanelDataset.build(
        network, ts, price, arrays["loads"], arrays["flows"], arrays["losses"],
        floor_offset=floor_offset, strict=strict,
    )


def write_csv(dataset: PanelDataset, directory: str | Path) -> dict[str, Path]:
    """Write the four standard CSV files; floats keep full round-trip precision."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamps = pd.to_datetime(dataset.timestamps).strftime("%Y-%m-%dT%H:%M:%S")
    net = dataset.network
    out = {}
    for key, arr, cols in (
        ("prices", dataset.price, net.regions),
        ("loads", dataset.load, net.regions),
        ("flows", dataset.flow, net.arc_ids),
        ("losses", dataset.loss_adj, net.regions),
    ):
        df = pd.DataFrame(np.asarray(arr), columns=list(cols))
        df.insert(0, "timestamp", stamps)
        path = directory / CSV_FILES[key]
        df.to_csv(path, index=False, float_format="%.17g")
        out[key] = path
    return out


def to_hourly(dataset: PanelDataset) -> PanelDataset:
    """Aggregate half-hourly data to hours.

    Log prices are averaged within the hour; loads, losses and flows are
    averaged, with each interconnector pair netted so complementarity holds.
    """
    if dataset.period_minutes != 30:
        raise ValidationError("to_hourly needs half-hourly data")
    minutes = pd.to_datetime(dataset.timestamps).minute
    start = int(np.flatnonzero(np.asarray(minutes) == 0)[0])
    n = (dataset.T - start) // 2
    sl = slice(start, start + 2 * n)

    def pair_mean(a):
        a = np.asarray(a)[sl]
        return a.reshape(n, 2, *a.shape[1:]).mean(axis=1)

    net = dataset.network
    flow = pair_mean(dataset.flow)
    for fwd, rev in net.arc_pairs:
        i, j = net.arc_index(fwd), net.arc_index(rev)
        netflow = flow[:, i] - flow[:, j]
        flow[:, i] = np.maximum(netflow, 0.0)
        flow[:, j] = np.maximum(-netflow, 0.0)
    price = inverse_log_transform(pair_mean(dataset.log_price), dataset.floor_offset)
    return PanelDataset.build(
        net, dataset.timestamps[sl][::2], np.maximum(price, DEFAULT_PRICE_FLOOR), pair_mean(dataset.load), flow,
        pair_mean(dataset.loss_adj), floor_offset=dataset.floor_offset,
    )
