"""Synthetic head-like phantoms, a portable PRNG and the volume file format.

Phantoms are nested, smoothly banded ellipsoidal shells in normalized
coordinates ``u = (2i - (n - 1)) / (n - 1)`` per axis. Four dataset tags
differ in shell contrast and shape statistics:

* ``pretrain``: bright outer shell, darker interior (T1-like bands)
* ``shiftA``: inverted band contrast
* ``shiftB``: pretrain contrast, flatter shells and stronger deformation
* ``lesion``: pretrain plus hyperintense spheres at intensity 1.0

Shell intensities stay below 0.9 so lesions are separable by a threshold.
All randomness comes from :class:`Xoshiro256pp` so a ``(config, seed)``
pair fully determines a volume.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "TAGS",
    "Xoshiro256pp",
    "PhantomConfig",
    "VolumeRecord",
    "VolumeFormatError",
    "generate_phantom",
    "write_volume",
    "read_volume",
    "make_split",
    "to_model_range",
    "from_model_range",
]

TAGS = ("pretrain", "shiftA", "shiftB", "lesion")
MAGIC = b"TVOOVOL1"
_MASK = (1 << 64) - 1

# Band intensities from the outermost shell inwards.
_PROFILES = {
    "pretrain": (0.80, 0.35, 0.60, 0.25, 0.50, 0.30),
    "shiftA": (0.25, 0.70, 0.40, 0.75, 0.45, 0.65),
}


class VolumeFormatError(ValueError):
    pass


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256pp:
    """xoshiro256++ seeded through splitmix64.

    ``random()`` maps the top 53 bits to ``[0, 1)``; ``normal(n)`` uses
    Box-Muller pairs ``(r cos θ, r sin θ)`` with ``u1 = 1 - random()``.
    """

    def __init__(self, seed: int):
        x = int(seed) & _MASK
        s = []
        for _ in range(4):
            x = (x + 0x9E3779B97F4A7C15) & _MASK
            z = x
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
            s.append(z ^ (z >> 31))
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        out = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return out

    def u64_block(self, n: int) -> np.ndarray:
        return np.array([self.next_u64() for _ in range(n)], dtype=np.uint64)

    def random(self, n: int | None = None):
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.random(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


@dataclass(frozen=True)
class PhantomConfig:
    grid: tuple[int, int, int] = (32, 32, 32)
    tag: str = "pretrain"
    n_shells: int = 4
    amplitude: float = 0.05
    noise_sigma: float = 0.01
    lesion_count: int = 0
    lesion_radius: tuple[float, float] = (0.08, 0.15)
    smoothness: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "lesion_radius", tuple(float(r) for r in self.lesion_radius))
        if len(self.grid) != 3 or any(g < 2 for g in self.grid):
            raise ValueError(f"grid must be three sizes >= 2, got {self.grid}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}; choose from {TAGS}")
        if not 1 <= self.n_shells <= len(_PROFILES["pretrain"]):
            raise ValueError(f"n_shells must be in [1, {len(_PROFILES['pretrain'])}]")
        if self.amplitude < 0 or self.noise_sigma < 0 or self.smoothness <= 0:
            raise ValueError("amplitude and noise_sigma must be >= 0, smoothness > 0")
        if self.lesion_count < 0:
            raise ValueError("lesion_count must be >= 0")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi <= 0.3:
            raise ValueError(f"lesion radii {self.lesion_radius} must satisfy 0 < lo <= hi <= 0.3")
        if self.lesion_count and self.tag != "lesion":
            raise ValueError("lesion_count > 0 requires tag 'lesion'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["lesion_radius"] = list(self.lesion_radius)
        return d


@dataclass
class VolumeRecord:
    voxels: np.ndarray
    tag: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {self.voxels.shape}")

    @property
    def shape(self):
        return self.voxels.shape


def _coords(grid):
    axes = [(2.0 * np.arange(n) - (n - 1)) / (n - 1) for n in grid]
    return np.meshgrid(*axes, indexing="ij")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_phantom(cfg: PhantomConfig, seed: int) -> VolumeRecord:
    """Deterministic phantom for ``(cfg, seed)``; voxels are float32 in [0, 1]."""
    rng = Xoshiro256pp(seed)
    x, y, z = _coords(cfg.grid)
    flat = cfg.tag == "shiftB"
    axes = (rng.uniform(0.78, 0.92), rng.uniform(0.80, 0.94), rng.uniform(0.82, 0.95))
    if flat:
        axes = (axes[0], axes[1] * 0.85, axes[2] * 0.7)
    amp = cfg.amplitude * (2.0 if flat else 1.0)
    rho = np.sqrt((x / axes[0]) ** 2 + (y / axes[1]) ** 2 + (z / axes[2]) ** 2)
    if amp > 0:
        warp = np.zeros_like(rho)
        for _ in range(3):
            f = (rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0))
            phase = rng.uniform(0.0, 2.0 * math.pi)
            warp += np.sin(math.pi * (f[0] * x + f[1] * y + f[2] * z) + phase)
        rho = rho * (1.0 + amp * warp / 3.0)

    profile = _PROFILES["shiftA" if cfg.tag == "shiftA" else "pretrain"][: cfg.n_shells]
    jitter = [rng.uniform(-0.03, 0.03) for _ in profile]
    levels = [min(v + j, 0.85) for v, j in zip(profile, jitter)]
    radii = [1.0 - 0.7 * k / cfg.n_shells for k in range(cfg.n_shells)]
    vol = np.zeros(cfg.grid)
    prev = 0.0
    for level, radius in zip(levels, radii):
        vol += (level - prev) * _sigmoid((radius - rho) / cfg.smoothness)
        prev = level

    for _ in range(cfg.lesion_count):
        rad = rng.uniform(*cfg.lesion_radius)
        reach = 0.55 - rad
        c = [rng.uniform(-reach, reach) for _ in range(3)]
        d = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        blob = _sigmoid((rad - d) / (0.25 * cfg.smoothness))
        vol = vol * (1.0 - blob) + blob

    if cfg.noise_sigma > 0:
        vol = vol + cfg.noise_sigma * rng.normal(vol.size).reshape(cfg.grid)
    vol = np.clip(vol, 0.0, 1.0)
    return VolumeRecord(vol.astype(np.float32), cfg.tag, int(seed))


def to_model_range(v) -> np.ndarray:
    return 2.0 * np.asarray(v, dtype=np.float64) - 1.0


def from_model_range(v) -> np.ndarray:
    return np.clip((np.asarray(v, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def write_volume(path, rec: VolumeRecord) -> None:
    header = json.dumps({"dims": list(rec.shape), "tag": rec.tag, "seed": int(rec.seed),
                         "dtype": "f32"}, sort_keys=True).encode()
    payload = np.ascontiguousarray(rec.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header + payload)


def read_volume(path) -> VolumeRecord:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a volume file")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise VolumeFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen])
        dims = tuple(int(d) for d in header["dims"])
        tag, seed = header["tag"], int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from None
    if header.get("dtype") != "f32" or len(dims) != 3:
        raise VolumeFormatError(f"{path}: unsupported header {header}")
    need = 4 * dims[0] * dims[1] * dims[2]
    body = data[12 + hlen:]
    if len(body) != need:
        raise VolumeFormatError(f"{path}: payload has {len(body)} bytes, expected {need}")
    vox = np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    return VolumeRecord(vox, tag, seed)


def make_split(records: Sequence, fraction: float, seed: int):
    """Shuffle with ``Xoshiro256pp(seed)`` and cut at ``round(fraction * n)``."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty record list")
    order = Xoshiro256pp(seed).permutation(n)
    n_train = int(math.floor(fraction * n + 0.5))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    train = [records[i] for i in order[:n_train]]
    held = [records[i] for i in order[n_train:]]
    return train, held
