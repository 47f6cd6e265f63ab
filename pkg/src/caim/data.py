"""Time-series cubes, change labels, synthetic scenes and storage.

A scene is a stack of T co-registered images plus a per-image semantic
label grid. Change labels are derived from the semantic series: per pixel,
the moment class is the index of the last adjacent pair of images that
differ (0 means the pixel never changed; class i means the change happened
between images i and i+1, counting images from 1), and the binary change
area is simply ``moment != 0``.

Everything here is a pure value-producing function; loaded cubes are never
mutated after construction, so concurrent use on distinct inputs is safe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, GenerationError, ShapeError

CUBE_MAGIC = b"CAIM"
CUBE_VERSION = 1

MAP_MAGIC = b"CMAP"
MAP_VERSION = 1


@dataclass
class TsiCube:
    """One time series of images, float32 [T, C, H, W]."""

    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ShapeError("cube images must be [T, C, H, W]")
        t, c, h, w = self.images.shape
        if t < 2:
            raise ShapeError(f"a cube needs at least two images, got T={t}")
        if min(c, h, w) < 1:
            raise ShapeError("empty cube dimension")
        if not np.all(np.isfinite(self.images)):
            raise ShapeError("cube contains non-finite values")

    @property
    def t_len(self):
        return self.images.shape[0]

    @property
    def band_count(self):
        return self.images.shape[1]

    @property
    def shape(self):
        return self.images.shape


@dataclass
class SemanticSeries:
    """Per-image class-id grids, int [T, H, W]."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError("semantic series must be [T, H, W]")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ShapeError("semantic labels must be integers")

    @property
    def t_len(self):
        return self.labels.shape[0]


@dataclass
class ChangeLabels:
    """Binary change area [H, W] and last-change moment class [H, W]."""

    area: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        self.area = np.asarray(self.area, dtype=np.uint8)
        self.moment = np.asarray(self.moment, dtype=np.uint16)
        if self.area.shape != self.moment.shape or self.area.ndim != 2:
            raise ShapeError("area and moment grids must share an [H, W] shape")
        if not np.array_equal(self.area != 0, self.moment != 0):
            raise ShapeError("label consistency violated: area must equal (moment != 0)")


@dataclass
class SceneConfig:
    t_len: int = 6
    bands: int = 4
    height: int = 64
    width: int = 64
    n_objects: int = 6
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.t_len < 2:
            raise ConfigError("t_len must be >= 2")
        if self.height < 8 or self.width < 8:
            raise ConfigError("height and width must be >= 8")
        if self.bands < 1:
            raise ConfigError("bands must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")


def derive_change_labels(series):
    """Last-change labels from a semantic series.

    Per pixel: moment = largest i in {1..T-1} with labels[i] != labels[i-1],
    or 0 when no adjacent pair differs; area = (moment != 0).
    """
    if isinstance(series, SemanticSeries):
        lab = series.labels
    else:
        lab = np.asarray(series)
    if lab.ndim != 3:
        raise ShapeError("expected [T, H, W] semantic labels")
    t = lab.shape[0]
    if t < 2:
        raise ShapeError(f"need at least two images to derive change labels, got T={t}")
    diffs = lab[1:] != lab[:-1]  # [T-1, H, W]; slot i-1 is the (i, i+1) pair
    idx = np.arange(1, t, dtype=np.int64)[:, None, None]
    moment = np.max(diffs * idx, axis=0)
    return ChangeLabels(area=(moment != 0), moment=moment)


# -- synthetic scenes --------------------------------------------------------

_N_CLASSES = 5  # background plus four object classes


def _class_reflectance(bands, rng):
    """Per-class base reflectance vectors, well separated in every band."""
    base = np.linspace(0.1, 0.9, _N_CLASSES)[:, None] * np.ones((1, bands))
    jitter = rng.uniform(-0.05, 0.05, size=(_N_CLASSES, bands))
    return (base + jitter).astype(np.float32)


def generate_synthetic_scene(cfg):
    """Background plus rectangles that appear, disappear or change class.

    Deterministic for a fixed seed. Returns (TsiCube, SemanticSeries,
    ChangeLabels); the labels are exactly derive_change_labels(series).
    Raises GenerationError when the requested rectangles cannot be placed
    without overlap.
    """
    if not isinstance(cfg, SceneConfig):
        cfg = SceneConfig(**cfg) if isinstance(cfg, dict) else cfg
    rng = np.random.default_rng(cfg.seed)
    t, h, w = cfg.t_len, cfg.height, cfg.width

    series = np.zeros((t, h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    min_side = 6
    max_side = max(min_side, min(h, w) // 3)

    for k in range(cfg.n_objects):
        placed = False
        for _ in range(200):
            oh = int(rng.integers(min_side, max_side + 1))
            ow = int(rng.integers(min_side, max_side + 1))
            if oh > h or ow > w:
                continue
            y = int(rng.integers(0, h - oh + 1))
            x = int(rng.integers(0, w - ow + 1))
            if occupied[y:y + oh, x:x + ow].any():
                continue
            occupied[y:y + oh, x:x + ow] = True
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place object {k + 1}/{cfg.n_objects} in a {h}x{w} scene")

        moment = int(rng.integers(1, t))  # change between images moment and moment+1
        kind = ("appear", "disappear", "recolor")[int(rng.integers(0, 3))]
        cls_a = int(rng.integers(1, _N_CLASSES))
        cls_b = int(rng.integers(1, _N_CLASSES))
        if kind == "appear":
            series[moment:, y:y + oh, x:x + ow] = cls_a
        elif kind == "disappear":
            series[:moment, y:y + oh, x:x + ow] = cls_a
        else:
            if cls_b == cls_a:
                cls_b = cls_a % (_N_CLASSES - 1) + 1
            series[:moment, y:y + oh, x:x + ow] = cls_a
            series[moment:, y:y + oh, x:x + ow] = cls_b

    reflectance = _class_reflectance(cfg.bands, rng)
    images = reflectance[series]  # [T, H, W, bands]
    images = np.ascontiguousarray(images.transpose(0, 3, 1, 2))
    if cfg.noise_std > 0:
        images = images + rng.normal(0.0, cfg.noise_std,
                                     size=images.shape).astype(np.float32)

    sem = SemanticSeries(series)
    return TsiCube(images.astype(np.float32)), sem, derive_change_labels(sem)


# -- storage ------------------------------------------------------------------


def save_cube(cube, labels, path):
    """Write a cube (and optional labels) to the binary container.

    Layout, little-endian: magic "CAIM", version u32, T/C/H/W u32, flags u8
    (bit 0: labels present), then T*C*H*W float32 image values in (t, c, h, w)
    order, then area as H*W u8 and moment as H*W u16 when present.
    """
    t, c, h, w = cube.images.shape
    flags = 0
    if labels is not None:
        if labels.area.shape != (h, w):
            raise ShapeError("label grids do not match the cube's spatial size")
        flags |= 1
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        f.write(struct.pack("<IIIIIB", CUBE_VERSION, t, c, h, w, flags))
        f.write(np.ascontiguousarray(cube.images, dtype="<f4").tobytes())
        if labels is not None:
            f.write(np.ascontiguousarray(labels.area, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(labels.moment, dtype="<u2").tobytes())


def load_cube(path):
    """Inverse of :func:`save_cube`; round-trips bit-exactly.

    Returns (TsiCube, ChangeLabels or None). Raises FormatError on bad
    magic/version or when the payload size disagrees with the header.
    """
    with open(path, "rb") as f:
        blob = f.read()
    header = struct.calcsize("<IIIIIB")
    if len(blob) < len(CUBE_MAGIC) + header:
        raise FormatError("cube file truncated before header")
    if blob[:len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise FormatError("bad cube magic")
    version, t, c, h, w, flags = struct.unpack_from("<IIIIIB", blob, len(CUBE_MAGIC))
    if version != CUBE_VERSION:
        raise FormatError(f"unsupported cube version {version}")
    n_img = t * c * h * w
    expected = len(CUBE_MAGIC) + header + 4 * n_img
    if flags & 1:
        expected += h * w * (1 + 2)
    if len(blob) != expected:
        raise FormatError(
            f"cube payload size mismatch: header implies {expected} bytes, file has {len(blob)}")
    off = len(CUBE_MAGIC) + header
    images = np.frombuffer(blob, dtype="<f4", count=n_img, offset=off).reshape(t, c, h, w)
    cube = TsiCube(images.copy())
    labels = None
    if flags & 1:
        off += 4 * n_img
        area = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
        off += h * w
        moment = np.frombuffer(blob, dtype="<u2", count=h * w, offset=off).reshape(h, w)
        labels = ChangeLabels(area=area.copy(), moment=moment.copy())
    return cube, labels


# -- patching and splits -------------------------------------------------------


def extract_patches(cube, labels, patch, stride=None):
    """Tile the spatial plane into patch x patch crops (temporal axis kept).

    Origins run over range(0, dim - patch + 1, stride); trailing pixels that
    do not fit a full tile are dropped.
    """
    if stride is None:
        stride = patch
    t, c, h, w = cube.images.shape
    if patch > h or patch > w:
        raise ConfigError(f"patch {patch} exceeds scene size {h}x{w}")
    if patch < 1 or stride < 1:
        raise ConfigError("patch and stride must be positive")
    out = []
    for y in range(0, h - patch + 1, stride):
        for x in range(0, w - patch + 1, stride):
            sub = TsiCube(cube.images[:, :, y:y + patch, x:x + patch].copy())
            sub_labels = None
            if labels is not None:
                sub_labels = ChangeLabels(
                    area=labels.area[y:y + patch, x:x + patch].copy(),
                    moment=labels.moment[y:y + patch, x:x + patch].copy())
            out.append((sub, sub_labels))
    return out


def split_dataset(items, ratios=(8, 1, 1), seed=0):
    """Deterministic shuffled split into (train, val, test).

    Non-train parts each get max(1, floor(n * ratio / total)) items; the
    remainder goes to train. Disjoint and exhaustive.
    """
    items = list(items)
    n = len(items)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios must be three positive numbers")
    if n < len(ratios):
        raise ConfigError(f"cannot split {n} items into {len(ratios)} parts")
    total = sum(ratios)
    n_val = max(1, int(n * ratios[1] // total))
    n_test = max(1, int(n * ratios[2] // total))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ConfigError("split leaves no training items")
    order = np.random.default_rng(seed).permutation(n)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val:]]
    return train, val, test


# -- prediction map files ------------------------------------------------------


def save_prediction_maps(area_argmax, moment_argmax, path):
    """Write predicted per-pixel argmax grids, same conventions as the cube
    container: magic "CMAP", version u32, H/W u32, area u8 grid, moment u16."""
    area = np.asarray(area_argmax, dtype=np.uint8)
    moment = np.asarray(moment_argmax, dtype=np.uint16)
    if area.shape != moment.shape or area.ndim != 2:
        raise ShapeError("prediction grids must share an [H, W] shape")
    h, w = area.shape
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<III", MAP_VERSION, h, w))
        f.write(area.tobytes())
        f.write(np.ascontiguousarray(moment, dtype="<u2").tobytes())


def load_prediction_maps(path):
    with open(path, "rb") as f:
        blob = f.read()
    header = struct.calcsize("<III")
    if len(blob) < len(MAP_MAGIC) + header or blob[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise FormatError("bad prediction-map file")
    version, h, w = struct.unpack_from("<III", blob, len(MAP_MAGIC))
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map version {version}")
    if len(blob) != len(MAP_MAGIC) + header + h * w * 3:
        raise FormatError("prediction-map payload size mismatch")
    off = len(MAP_MAGIC) + header
    area = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
    moment = np.frombuffer(blob, dtype="<u2", count=h * w, offset=off + h * w).reshape(h, w)
    return area.copy(), moment.copy()
