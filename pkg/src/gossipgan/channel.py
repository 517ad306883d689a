"""Multipath mMIMO-OFDM channel synthesis, normalisation and the CSID dataset format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CSID"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIId")
MAX_ELEMENTS = 1 << 31


class DatasetFormatError(ValueError):
    """A CSID file is malformed: bad magic or version, truncated payload or absurd dimensions."""


@dataclass(frozen=True)
class ArrayGeometry:
    n_x: int
    n_y: int = 1
    n_z: int = 1
    spacing_phase: float = np.pi  # psi = 2*pi*d/lambda with d = lambda/2

    def __post_init__(self):
        if min(self.n_x, self.n_y, self.n_z) < 1:
            raise ValueError("antenna counts per axis must be >= 1")
        if not np.isfinite(self.spacing_phase):
            raise ValueError("spacing_phase must be finite")

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y * self.n_z


@dataclass(frozen=True)
class PathParams:
    power: float
    phase: float
    delay: float
    azimuth: float
    elevation: float

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("path power must be non-negative")
        if self.delay < 0:
            raise ValueError("path delay must be non-negative")


@dataclass(frozen=True)
class ChannelConfig:
    """``literal`` puts the subcarrier index inside the array-response exponent.

    ``n_paths`` of None defers the path count to the scenario spec.
    """

    n_t: int
    n_c: int
    bandwidth: float = 50e6
    n_paths: int | None = None
    geometry: ArrayGeometry | None = None
    literal: bool = False

    def __post_init__(self):
        if self.n_t < 1 or self.n_c < 1 or (self.n_paths is not None and self.n_paths < 1):
            raise ValueError("n_t, n_c and n_paths must be >= 1")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.geometry is None:
            object.__setattr__(self, "geometry", ArrayGeometry(self.n_t))
        elif self.geometry.n_t != self.n_t:
            raise ValueError(f"geometry has {self.geometry.n_t} elements, config says n_t={self.n_t}")


def _direction_cosines(az, el):
    az, el = np.asarray(az, dtype=float), np.asarray(el, dtype=float)
    return np.sin(el) * np.cos(az), np.sin(el) * np.sin(az), np.cos(el)


def array_response(geometry: ArrayGeometry, azimuth, elevation, n: int | None = None) -> np.ndarray:
    """Unit-modulus response a_z (x) a_y (x) a_x; vectorised over leading angle dimensions.

    With ``n`` given, the per-element phase becomes n*psi (the literal form).
    """
    psi = geometry.spacing_phase * (1 if n is None else n)
    ux, uy, uz = _direction_cosines(azimuth, elevation)
    ax = np.exp(1j * psi * np.multiply.outer(ux, np.arange(geometry.n_x)))
    ay = np.exp(1j * psi * np.multiply.outer(uy, np.arange(geometry.n_y)))
    az = np.exp(1j * psi * np.multiply.outer(uz, np.arange(geometry.n_z)))
    # index = iz*(n_y*n_x) + iy*n_x + ix, matching np.kron(np.kron(a_z, a_y), a_x)
    full = az[..., :, None, None] * ay[..., None, :, None] * ax[..., None, None, :]
    return full.reshape(full.shape[:-3] + (geometry.n_t,))


def _path_arrays(paths) -> dict[str, np.ndarray]:
    if isinstance(paths, dict):
        return {k: np.asarray(v, dtype=float) for k, v in paths.items()}
    paths = list(paths)
    if not paths:
        raise ValueError("at least one path is required")
    return {
        k: np.array([getattr(p, k) for p in paths], dtype=float)
        for k in ("power", "phase", "delay", "azimuth", "elevation")
    }


def _path_phasors(config: ChannelConfig, p: dict, n: np.ndarray) -> np.ndarray:
    # (L, len(n)) complex gains sqrt(rho/Nc) * exp(j(theta + 2 pi n tau B / Nc))
    amp = np.sqrt(p["power"] / config.n_c)
    arg = p["phase"][:, None] + 2 * np.pi * np.outer(p["delay"], n) * config.bandwidth / config.n_c
    return amp[:, None] * np.exp(1j * arg)


def _columns(config: ChannelConfig, p: dict, n: np.ndarray) -> list[np.ndarray]:
    # one matrix-vector product per subcarrier so a single column and the full matrix agree bit for bit
    gains = _path_phasors(config, p, n)  # (L, len(n))
    if config.literal:
        return [np.ascontiguousarray(gains[:, i]) @ array_response(config.geometry, p["azimuth"], p["elevation"], k)
                for i, k in enumerate(n)]
    a = array_response(config.geometry, p["azimuth"], p["elevation"])  # (L, Nt)
    return [np.ascontiguousarray(gains[:, i]) @ a for i in range(len(n))]


def subcarrier_channel(config: ChannelConfig, paths, n: int) -> np.ndarray:
    """Channel vector h_n (length N_t) on subcarrier n, 1-based."""
    if not 1 <= n <= config.n_c:
        raise ValueError(f"subcarrier index {n} outside 1..{config.n_c}")
    return _columns(config, _path_arrays(paths), np.arange(1, config.n_c + 1))[n - 1]


def channel_matrix(config: ChannelConfig, paths) -> np.ndarray:
    """H = [h_1 ... h_Nc], complex N_t x N_c."""
    return np.stack(_columns(config, _path_arrays(paths), np.arange(1, config.n_c + 1)), axis=1)


def to_planes(h: np.ndarray) -> np.ndarray:
    """Complex (..., N_t, N_c) to real (..., 2, N_t, N_c)."""
    return np.stack([h.real, h.imag], axis=-3)


def from_planes(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    """Parametric stand-in for a ray-traced area.

    Paths are grouped in clusters whose mean directions are fixed for the
    area by ``env_seed``. Each sample (a user position) shifts every
    cluster by ``location_jitter`` and each path spreads around its cluster
    by the angular spreads. Delays are exponential with mean
    ``delay_spread``; powers follow an exponential profile and are sorted in
    descending order.
    """

    name: str = "custom"
    n_paths: int = 8
    n_clusters: int = 2
    power_decay: float = 0.5
    delay_spread: float = 100e-9
    az_spread: float = 0.1
    el_spread: float = 0.05
    location_jitter: float = 0.1
    env_seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1 or self.n_clusters < 1:
            raise ValueError("scenario needs at least one path and one cluster")
        if min(self.power_decay, self.delay_spread, self.az_spread, self.el_spread, self.location_jitter) < 0:
            raise ValueError("scenario spreads must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "sparse": ScenarioSpec("sparse", n_paths=4, n_clusters=1, power_decay=1.0, delay_spread=20e-9,
                           az_spread=0.05, el_spread=0.02, location_jitter=0.1, env_seed=11),
    "dense": ScenarioSpec("dense", n_paths=12, n_clusters=3, power_decay=0.25, delay_spread=150e-9,
                          az_spread=0.25, el_spread=0.1, location_jitter=0.1, env_seed=23),
}


def preset(name: str) -> ScenarioSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown scenario preset {name!r}; choose from {sorted(PRESETS)}") from None


def _cluster_centres(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.env_seed)
    az = rng.uniform(-np.pi / 3, np.pi / 3, spec.n_clusters)
    el = rng.uniform(np.pi / 3, 2 * np.pi / 3, spec.n_clusters)
    return az, el


def sample_scenario(rng: np.random.Generator, spec: ScenarioSpec | None) -> list[PathParams]:
    arrays = sample_path_arrays(rng, spec)
    return [PathParams(*(float(arrays[k][i]) for k in ("power", "phase", "delay", "azimuth", "elevation")))
            for i in range(spec.n_paths)]


def sample_path_arrays(rng: np.random.Generator, spec: ScenarioSpec | None, n_c: int = 1) -> dict:
    """Draw one user's paths as arrays. Total power is ``n_c`` so entries have unit mean power."""
    if spec is None or spec.n_paths < 1:
        raise ValueError("empty scenario spec")
    L = spec.n_paths
    c_az, c_el = _cluster_centres(spec)
    shift_az, shift_el = rng.normal(0.0, spec.location_jitter, 2)
    cluster = np.arange(L) % spec.n_clusters
    raw = np.sort(rng.exponential(1.0, L))[::-1]
    power = raw * np.exp(-spec.power_decay * np.arange(L))
    power = n_c * power / power.sum()
    return {
        "power": power,
        "phase": rng.uniform(0.0, 2 * np.pi, L),
        "delay": rng.exponential(spec.delay_spread, L) if spec.delay_spread > 0 else np.zeros(L),
        "azimuth": c_az[cluster] + shift_az + rng.normal(0.0, spec.az_spread, L),
        "elevation": c_el[cluster] + shift_el + rng.normal(0.0, spec.el_spread, L),
    }


def generate_channels(config: ChannelConfig, spec: ScenarioSpec, count: int, seed) -> np.ndarray:
    """``count`` complex channel matrices (count, N_t, N_c) for one area."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if config.n_paths is not None and config.n_paths != spec.n_paths:
        spec = _with_paths(spec, config.n_paths)
    rng = np.random.default_rng(seed)
    return np.stack([channel_matrix(config, sample_path_arrays(rng, spec, config.n_c)) for _ in range(count)])


def _with_paths(spec: ScenarioSpec, n_paths: int) -> ScenarioSpec:
    d = asdict(spec)
    d["n_paths"] = n_paths
    return ScenarioSpec(**d)


# ---------------------------------------------------------------- normalisation


@dataclass
class NormalizedDataset:
    """Real (count, 2, N_t, N_c) tensors in [-1, 1] plus the scale that restores them."""

    tensors: np.ndarray
    scale: float
    train: np.ndarray = field(default=None)
    test: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors, dtype=float)
        if self.tensors.ndim != 4 or self.tensors.shape[1] != 2:
            raise ValueError(f"tensors must be (count, 2, N_t, N_c), got {self.tensors.shape}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        n = len(self.tensors)
        self.train = np.arange(n) if self.train is None else np.asarray(self.train, dtype=int)
        self.test = np.zeros(0, dtype=int) if self.test is None else np.asarray(self.test, dtype=int)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def train_tensors(self) -> np.ndarray:
        return self.tensors[self.train]

    @property
    def test_tensors(self) -> np.ndarray:
        return self.tensors[self.test]

    def denormalized(self, x: np.ndarray | None = None) -> np.ndarray:
        return denormalize(self.tensors if x is None else x, self.scale)


def normalize_dataset(samples, test_fraction: float = 0.0, split_seed=0) -> NormalizedDataset:
    """Split complex samples into real/imag planes and divide by the global max |entry|.

    ``samples`` may be complex (count, N_t, N_c) or already real (count, 2, N_t, N_c).
    """
    arr = np.asarray(samples)
    if arr.size == 0:
        raise ValueError("empty sample list")
    planes = to_planes(arr) if np.iscomplexobj(arr) else np.asarray(arr, dtype=float)
    if planes.ndim == 3:
        planes = planes[None]
    scale = float(np.max(np.abs(planes)))
    if scale == 0.0:
        raise ValueError("all-zero dataset: normalisation scale undefined")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    n = len(planes)
    perm = np.random.default_rng(split_seed).permutation(n) if test_fraction else np.arange(n)
    n_test = int(round(test_fraction * n))
    return NormalizedDataset(planes / scale, scale, np.sort(perm[n_test:]), np.sort(perm[:n_test]))


def denormalize(x: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(x) * scale


# ---------------------------------------------------------------- CSID files


def export_dataset(dataset: NormalizedDataset, path) -> None:
    count, planes, n_t, n_c = dataset.tensors.shape[0], *dataset.tensors.shape[1:]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, planes, n_t, n_c, count, float(dataset.scale))
    payload = dataset.tensors.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def import_dataset(path) -> NormalizedDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, planes, n_t, n_c, count, scale = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    if planes != 2:
        raise DatasetFormatError(f"{path}: expected 2 real/imag planes, header says {planes}")
    n = planes * n_t * n_c * count
    if n == 0 or n > MAX_ELEMENTS:
        raise DatasetFormatError(f"{path}: header dims {planes}x{n_t}x{n_c}x{count} out of range")
    expected = _HEADER.size + 4 * n
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: header dims {planes}x{n_t}x{n_c}x{count} imply {n} float32 values ({4 * n} bytes), "
            f"payload holds {len(blob) - _HEADER.size} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, planes, n_t, n_c)
    if not np.isfinite(data).all() or not scale > 0:
        raise DatasetFormatError(f"{path}: non-finite payload or non-positive scale")
    return NormalizedDataset(data.astype(float), float(scale))
