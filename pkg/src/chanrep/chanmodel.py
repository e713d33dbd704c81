"""Multipath MIMO-OFDM channel synthesis, temporal variation and dataset I/O.

Channels are built per subcarrier as a sum of plane-wave paths, each one a
complex gain times the outer product of the UE and BS array responses.  The
BS is a 3-D uniform array (x, y, z axes), the UE a uniform linear array.

All angles are radians internally; degrees only appear at the CSV boundary.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MAGIC = b"CRTENS01"
_HEADER = struct.Struct("<8s5Id")
SPEED_OF_LIGHT = 299_792_458.0

CSV_COLUMNS = (
    "bs_id", "ue_id", "t", "loc_x", "loc_y", "loc_z",
    "gain_lin", "phase_rad", "delay_s", "aoa_deg", "aod_az_deg", "aod_el_deg",
)


class DatasetFormatError(ValueError):
    """Raised when a dataset file is truncated, corrupted or inconsistent."""


@dataclass(frozen=True)
class ArrayGeometry:
    n_x: int = 2
    n_y: int = 2
    n_z: int = 2
    n_r: int = 2
    # wavenumber times element spacing; pi means half-wavelength spacing
    phase_const: float = math.pi

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_z", "n_r"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.phase_const > 0:
            raise ValueError("phase_const must be > 0")

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y * self.n_z


@dataclass(frozen=True)
class SceneConfig:
    n_subcarriers: int = 16
    bandwidth: float = 1.92e6
    n_times: int = 8
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    noise_var: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.n_times < 1:
            raise ValueError("n_subcarriers and n_times must be >= 1")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        g = self.geometry
        return (self.n_times, self.n_subcarriers, g.n_r, g.n_t)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["geometry"] = ArrayGeometry(**d.get("geometry", {}))
        return cls(**d)


@dataclass
class PathSet:
    """Multipath parameters of one (BS, UE, time) link.

    Every path carries its own angle triple.  When all paths share one triple
    the synthesis reduces exactly to the single-cluster form where the array
    responses factor out of the path sum; differing triples are the sum of
    several such clusters.
    """

    gains: np.ndarray
    phases: np.ndarray
    delays: np.ndarray
    aoa: np.ndarray
    aod_az: np.ndarray
    aod_el: np.ndarray
    bs_id: int = 0
    ue_id: int = 0
    t_index: int = 0

    def __post_init__(self):
        n = np.size(self.gains)
        if n < 1:
            raise ValueError("a PathSet needs at least one path")
        for name in ("gains", "phases", "delays", "aoa", "aod_az", "aod_el"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
            setattr(self, name, arr)
        if np.any(self.delays < 0):
            raise ValueError("delays must be >= 0")
        if np.any(self.gains < 0):
            raise ValueError("gains must be >= 0")

    @classmethod
    def shared(cls, gains, phases, delays, aoa, aod_az, aod_el, **ids) -> "PathSet":
        """PathSet whose paths all share one (aoa, aod_az, aod_el) triple."""
        return cls(np.atleast_1d(gains), np.atleast_1d(phases), np.atleast_1d(delays),
                   aoa, aod_az, aod_el, **ids)

    @property
    def n_paths(self) -> int:
        return self.gains.size

    def sorted(self) -> "PathSet":
        order = np.argsort(-self.gains, kind="stable")
        return self._take(order)

    def _take(self, idx) -> "PathSet":
        return PathSet(self.gains[idx], self.phases[idx], self.delays[idx], self.aoa[idx],
                       self.aod_az[idx], self.aod_el[idx], self.bs_id, self.ue_id, self.t_index)

    def merged(self, other: "PathSet") -> "PathSet":
        cat = lambda a, b: np.concatenate([a, b])
        return PathSet(cat(self.gains, other.gains), cat(self.phases, other.phases),
                       cat(self.delays, other.delays), cat(self.aoa, other.aoa),
                       cat(self.aod_az, other.aod_az), cat(self.aod_el, other.aod_el),
                       self.bs_id, self.ue_id, self.t_index)

    def equals(self, other: "PathSet") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("gains", "phases", "delays", "aoa", "aod_az", "aod_el")) and \
            (self.bs_id, self.ue_id, self.t_index) == (other.bs_id, other.ue_id, other.t_index)


@dataclass
class DatasetEntry:
    bs_id: int
    ue_id: int
    loc: np.ndarray
    data: np.ndarray  # (N_t, N_k, N_R, N_T) complex128


@dataclass
class Dataset:
    entries: list[DatasetEntry]
    scene: SceneConfig
    norm_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.norm_scale > 0:
            raise ValueError("norm_scale must be > 0")
        shapes = {e.data.shape for e in self.entries}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent tensor shapes {shapes}")

    def __len__(self):
        return len(self.entries)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.entries[0].data.shape

    def stacked(self) -> np.ndarray:
        """All channels as one (N_entries, N_t, N_k, N_R, N_T) array."""
        return np.stack([e.data for e in self.entries])

    def locs(self) -> np.ndarray:
        return np.stack([e.loc for e in self.entries])

    def index(self) -> dict[tuple[int, int], int]:
        return {(e.bs_id, e.ue_id): i for i, e in enumerate(self.entries)}

    def ue_ids(self) -> list[int]:
        return sorted({e.ue_id for e in self.entries})

    def bs_ids(self) -> list[int]:
        return sorted({e.bs_id for e in self.entries})

    def with_data(self, arrays: Sequence[np.ndarray]) -> "Dataset":
        ents = [DatasetEntry(e.bs_id, e.ue_id, e.loc.copy(), np.asarray(a, dtype=np.complex128))
                for e, a in zip(self.entries, arrays)]
        return Dataset(ents, self.scene, self.norm_scale, dict(self.meta))


# --------------------------------------------------------------------------
# array responses and synthesis


def array_response_ue(geometry: ArrayGeometry, aoa) -> np.ndarray:
    """ULA response; vectorizes over an array of angles (returns (..., N_R))."""
    m = np.arange(geometry.n_r)
    aoa = np.asarray(aoa, dtype=float)
    return np.exp(1j * geometry.phase_const * np.multiply.outer(np.cos(aoa), m))


def _axis_response(n: int, phase_const: float, direction) -> np.ndarray:
    return np.exp(1j * phase_const * np.multiply.outer(np.asarray(direction), np.arange(n)))


def array_response_bs(geometry: ArrayGeometry, aod_az, aod_el) -> np.ndarray:
    """a_z ⊗ a_y ⊗ a_x for a 3-D uniform array; vectorizes like array_response_ue."""
    az = np.asarray(aod_az, dtype=float)
    el = np.asarray(aod_el, dtype=float)
    kd = geometry.phase_const
    a_x = _axis_response(geometry.n_x, kd, np.sin(el) * np.cos(az))
    a_y = _axis_response(geometry.n_y, kd, np.sin(el) * np.sin(az))
    a_z = _axis_response(geometry.n_z, kd, np.cos(el))
    out = a_z[..., :, None, None] * a_y[..., None, :, None] * a_x[..., None, None, :]
    return out.reshape(out.shape[:-3] + (geometry.n_t,))


def _path_coefficients(paths: PathSet, scene: SceneConfig, ks: np.ndarray) -> np.ndarray:
    n_k = scene.n_subcarriers
    phase = paths.phases[None, :] + 2 * np.pi * np.outer(ks, paths.delays) * scene.bandwidth / n_k
    return np.sqrt(paths.gains / n_k)[None, :] * np.exp(1j * phase)


def synth_subcarrier(paths: PathSet, scene: SceneConfig, k: int) -> np.ndarray:
    if not 0 <= k < scene.n_subcarriers:
        raise IndexError(f"subcarrier {k} out of range [0, {scene.n_subcarriers})")
    return synth_link(paths, scene, ks=np.array([k]))[0]


def synth_link(paths: PathSet, scene: SceneConfig, ks: np.ndarray | None = None) -> np.ndarray:
    """Channel of one PathSet at the given subcarriers, shape (len(ks), N_R, N_T)."""
    if ks is None:
        ks = np.arange(scene.n_subcarriers)
    g = scene.geometry
    coef = _path_coefficients(paths, scene, ks)
    a_ue = array_response_ue(g, paths.aoa)
    a_bs = array_response_bs(g, paths.aod_az, paths.aod_el)
    return np.einsum("kl,lr,lt->krt", coef, a_ue, a_bs.conj())


def synth_tensor(path_sets: Sequence[PathSet], scene: SceneConfig, loc=None) -> np.ndarray:
    """Stack the per-time channels of one link into (N_t, N_k, N_R, N_T)."""
    ts = [p.t_index for p in path_sets]
    if sorted(ts) != list(range(scene.n_times)):
        raise ValueError(f"expected one PathSet per t_index 0..{scene.n_times - 1}, got {ts}")
    by_t = {p.t_index: p for p in path_sets}
    return np.stack([synth_link(by_t[t], scene) for t in range(scene.n_times)])


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class JitterConfig:
    """Small-scale temporal variation at a fixed location."""

    gain_sigma: float = 0.1       # log-normal sigma (natural log units)
    delay_sigma: float = 5e-9     # seconds
    redraw_phase: bool = True
    phase_sigma: float = 0.0      # Gaussian phase jitter, used only when redraw_phase is False

    def __post_init__(self):
        if self.gain_sigma < 0 or self.delay_sigma < 0 or self.phase_sigma < 0:
            raise ValueError("jitter magnitudes must be >= 0")


@dataclass(frozen=True)
class LayoutConfig:
    """Geometry and path statistics for the synthetic stand-in of ray tracing."""

    n_paths: int = 4
    grid_spacing: float = 5.0
    grid_origin: tuple[float, float] = (30.0, 20.0)
    ue_height: float = 1.5
    bs_positions: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 12.0), (100.0, 0.0, 12.0))
    ref_distance: float = 40.0
    scatter_loss_db: float = 6.0
    gain_sigma_db: float = 4.0
    mean_excess_delay: float = 3e-7
    scatter_angle_sigma: float = 0.35  # radians
    jitter: JitterConfig = field(default_factory=JitterConfig)


class Link(NamedTuple):
    bs_id: int
    ue_id: int
    loc: np.ndarray          # UE position relative to the BS
    path_sets: list          # one PathSet per time index


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (tag, bs, ue, t, ...) key; order of use never matters."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, key)]))


_TAG_BASE, _TAG_TIME = 1, 2


def grid_locations(n_locations: int, layout: LayoutConfig) -> np.ndarray:
    side = math.ceil(math.sqrt(n_locations))
    i = np.arange(n_locations)
    x = layout.grid_origin[0] + layout.grid_spacing * (i % side)
    y = layout.grid_origin[1] + layout.grid_spacing * (i // side)
    return np.stack([x, y, np.full(n_locations, layout.ue_height)], axis=1)


def _geometric_angles(rel: np.ndarray) -> tuple[float, float, float]:
    dist = float(np.linalg.norm(rel))
    az = math.atan2(rel[1], rel[0])
    el = math.acos(rel[2] / dist)
    # UE array lies along x; arrival direction points back toward the BS
    aoa = math.acos(-rel[0] / dist)
    return aoa, az, el


def base_paths(rel: np.ndarray, scene: SceneConfig, layout: LayoutConfig,
               rng: np.random.Generator, bs_id=0, ue_id=0) -> PathSet:
    n_p = layout.n_paths
    dist = float(np.linalg.norm(rel))
    aoa0, az0, el0 = _geometric_angles(rel)
    jitter = rng.normal(0.0, layout.scatter_angle_sigma, size=(3, n_p))
    jitter[:, 0] = 0.0
    loss_db = np.full(n_p, -layout.scatter_loss_db)
    loss_db[0] = 0.0
    loss_db += rng.normal(0.0, layout.gain_sigma_db, size=n_p)
    gains = scene.n_subcarriers * (layout.ref_distance / dist) ** 2 * 10 ** (loss_db / 10)
    delays = dist / SPEED_OF_LIGHT + np.concatenate(
        [[0.0], rng.exponential(layout.mean_excess_delay, size=n_p - 1)])
    phases = rng.uniform(0.0, 2 * np.pi, size=n_p)
    ps = PathSet(gains, phases, delays, np.clip(aoa0 + jitter[0], 0.0, np.pi), az0 + jitter[1],
                 np.clip(el0 + jitter[2], 0.0, np.pi), bs_id=bs_id, ue_id=ue_id, t_index=0)
    return ps.sorted()


def perturb_temporal(base: PathSet, t_index: int, jitter: JitterConfig,
                     rng: np.random.Generator) -> PathSet:
    """Re-draw phases and jitter gains/delays while keeping every angle fixed.

    Gain jitter is mean-one log-normal so E[gain] is unchanged.
    """
    n = base.n_paths
    if jitter.redraw_phase:
        phases = rng.uniform(0.0, 2 * np.pi, size=n)
    elif jitter.phase_sigma > 0:
        phases = np.mod(base.phases + jitter.phase_sigma * rng.standard_normal(n), 2 * np.pi)
    else:
        phases = base.phases.copy()
    s = jitter.gain_sigma
    gains = base.gains * np.exp(s * rng.standard_normal(n) - 0.5 * s * s) if s > 0 else base.gains.copy()
    if jitter.delay_sigma > 0:
        delays = np.maximum(base.delays + jitter.delay_sigma * rng.standard_normal(n), 0.0)
    else:
        delays = base.delays.copy()
    return PathSet(gains, phases, delays, base.aoa.copy(), base.aod_az.copy(), base.aod_el.copy(),
                   base.bs_id, base.ue_id, t_index)


def sample_scene(scene: SceneConfig, n_locations: int, n_bs: int,
                 layout: LayoutConfig | None = None) -> list[Link]:
    """Draw a deterministic synthetic scene: one Link per (location, BS)."""
    if n_locations < 1:
        raise ValueError("n_locations must be >= 1")
    layout = layout or LayoutConfig()
    if n_bs > len(layout.bs_positions):
        raise ValueError(f"layout defines only {len(layout.bs_positions)} BS positions")
    ues = grid_locations(n_locations, layout)
    links = []
    for u, ue_pos in enumerate(ues):
        for b in range(n_bs):
            rel = ue_pos - np.asarray(layout.bs_positions[b], dtype=float)
            base = base_paths(rel, scene, layout, rng_stream(scene.rng_seed, _TAG_BASE, b, u), b, u)
            sets = [perturb_temporal(base, t, layout.jitter, rng_stream(scene.rng_seed, _TAG_TIME, b, u, t))
                    for t in range(scene.n_times)]
            links.append(Link(b, u, rel, sets))
    return links


def rms_frobenius(arrays: np.ndarray) -> float:
    """RMS over all (entry, t) of the Frobenius norm of each (N_k, N_R, N_T) channel."""
    a = np.asarray(arrays)
    per = np.sum(np.abs(a) ** 2, axis=(-3, -2, -1))
    return float(np.sqrt(np.mean(per)))


def build_dataset(links: Sequence[Link], scene: SceneConfig, meta: dict | None = None) -> Dataset:
    entries = [DatasetEntry(l.bs_id, l.ue_id, np.asarray(l.loc, dtype=float),
                            synth_tensor(l.path_sets, scene)) for l in links]
    scale = rms_frobenius(np.stack([e.data for e in entries]))
    return Dataset(entries, scene, scale if scale > 0 else 1.0, dict(meta or {}))


# --------------------------------------------------------------------------
# persistence


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> None:
    """Write the CRT1 binary plus a JSON sidecar (scene config, entry keys, meta)."""
    path = Path(path)
    n_t, n_k, n_r, n_tx = ds.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, len(ds), n_t, n_k, n_r, n_tx, float(ds.norm_scale)))
        for e in ds.entries:
            f.write(np.asarray(e.loc, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(e.data, dtype="<c16").tobytes())
    side = {"format": "CRT1", "scene": ds.scene.to_dict(),
            "keys": [[e.bs_id, e.ue_id] for e in ds.entries], "meta": ds.meta}
    _sidecar(path).write_text(json.dumps(side, indent=2, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file shorter than CRT1 header")
    magic, n_loc, n_t, n_k, n_r, n_tx, scale = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    per_entry = 3 * 8 + n_t * n_k * n_r * n_tx * 16
    if len(raw) != _HEADER.size + n_loc * per_entry:
        raise DatasetFormatError(
            f"size mismatch: header implies {_HEADER.size + n_loc * per_entry} bytes, found {len(raw)}")
    side = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    keys = side.get("keys") or [[0, i] for i in range(n_loc)]
    if len(keys) != n_loc:
        raise DatasetFormatError("sidecar key count does not match header")
    if "scene" in side:
        scene = SceneConfig.from_dict(side["scene"])
        if scene.tensor_shape != (n_t, n_k, n_r, n_tx):
            raise DatasetFormatError("sidecar scene does not match header shape")
    else:
        scene = SceneConfig(n_subcarriers=n_k, n_times=n_t, geometry=ArrayGeometry(n_tx, 1, 1, n_r))
    entries = []
    off = _HEADER.size
    for (b, u) in keys:
        loc = np.frombuffer(raw, dtype="<f8", count=3, offset=off).copy()
        off += 24
        data = np.frombuffer(raw, dtype="<c16", count=n_t * n_k * n_r * n_tx, offset=off)
        off += data.nbytes
        entries.append(DatasetEntry(int(b), int(u), loc, data.reshape(n_t, n_k, n_r, n_tx).astype(np.complex128)))
    return Dataset(entries, scene, scale, side.get("meta", {}))


def import_raypaths_csv(path, scene: SceneConfig) -> list[Link]:
    """Group a ray-path CSV export into one Link per (bs_id, ue_id).

    Each (bs_id, ue_id, t) group of rows becomes one PathSet; angle columns are
    degrees.  The link location is taken from the group's first row.
    """
    groups: dict[tuple[int, int], dict[int, list]] = defaultdict(lambda: defaultdict(list))
    locs: dict[tuple[int, int], np.ndarray] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"missing column(s): {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                b, u, t = int(row["bs_id"]), int(row["ue_id"]), int(row["t"])
                vals = [float(row[c]) for c in CSV_COLUMNS[3:]]
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed row at line {lineno}: {exc}") from None
            if not all(map(math.isfinite, vals)):
                raise ValueError(f"malformed row at line {lineno}: non-finite value")
            locs.setdefault((b, u), np.array(vals[:3]))
            groups[(b, u)][t].append(vals[3:])
    if not groups:
        raise ValueError("empty ray-path file")
    links = []
    for (b, u) in sorted(groups):
        sets = []
        for t in sorted(groups[(b, u)]):
            rows = np.array(groups[(b, u)][t])
            if rows.size == 0:
                raise ValueError(f"empty group ({b}, {u}, {t})")
            gain, phase, delay = rows[:, 0], rows[:, 1], rows[:, 2]
            aoa, az, el = np.deg2rad(rows[:, 3]), np.deg2rad(rows[:, 4]), np.deg2rad(rows[:, 5])
            sets.append(PathSet(gain, phase, delay, aoa, az, el, b, u, t).sorted())
        links.append(Link(b, u, locs[(b, u)], sets))
    return links
