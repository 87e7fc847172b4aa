"""Dataset ingestion, preprocessing, rebalancing and splitting.

Images are ``[H, W, 3]`` float64 arrays.  Decoding yields values in
``[0, 255]``; :func:`normalize_255` maps them into ``[0, 1]``.
"""

from __future__ import annotations

import math
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, DataError, DecodeError, ParameterError, SchemaError


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_id: str


@dataclass
class Manifest:
    rows: list[tuple[str, str]]
    class_names: list[str]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_index(self, name: str) -> int:
        return self.class_names.index(name)


@dataclass(frozen=True)
class RebalancePolicy:
    target: int | str = "mean"
    seed: int = 0

    def resolve(self, counts: Sequence[int]) -> int:
        if isinstance(self.target, str):
            if self.target == "mean":
                target = math.floor(sum(counts) / len(counts) + 0.5)
            elif self.target == "max":
                target = max(counts)
            elif self.target == "min":
                target = min(counts)
            else:
                raise ParameterError(f"unknown rebalance target {self.target!r}")
        else:
            target = int(self.target)
        if target < 1:
            raise ParameterError(f"rebalance target must be >= 1, got {target}")
        return target


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.15
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ParameterError(f"test fraction must lie in (0, 1), got {self.test_fraction}")


# ---------------------------------------------------------------- files


def load_manifest(path) -> Manifest:
    """Parse a manifest: a ``classes:`` line, then one ``path,label`` per row."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    classes = None
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if classes is None:
            if not line.startswith("classes:"):
                raise SchemaError(f"{path}:{lineno}: expected 'classes:' header")
            classes = [c.strip() for c in line[len("classes:"):].split(",") if c.strip()]
            if not classes or len(set(classes)) != len(classes):
                raise SchemaError(f"{path}:{lineno}: class list empty or repeated")
            continue
        parts = [p.strip() for p in line.rsplit(",", 1)]
        if len(parts) != 2 or not parts[0]:
            raise SchemaError(f"{path}:{lineno}: expected 'path,label', got {raw!r}")
        img, label = parts
        if label not in classes:
            raise SchemaError(f"{path}:{lineno}: label {label!r} not in declared classes")
        if img in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate path {img!r}")
        seen.add(img)
        rows.append((img, label))
    if classes is None:
        raise SchemaError(f"{path}: missing 'classes:' header")
    if not rows:
        warnings.warn(f"manifest {path} has no sample rows", stacklevel=2)
    return Manifest(rows=rows, class_names=classes, root=path.parent)


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary 8-bit PPM (P6) bytes to a ``[H, W, 3]`` float array."""
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise DecodeError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DecodeError("malformed PPM header") from None
    if width < 1 or height < 1 or maxval != 255:
        raise DecodeError(f"unsupported PPM geometry {width}x{height}, maxval {maxval}")
    need = width * height * 3
    pixels = buf[pos:pos + need]
    if len(pixels) != need:
        raise DecodeError(f"PPM pixel data truncated: {len(pixels)} of {need} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).astype(np.float64)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"PPM needs an [H,W,3] image, got {img.shape}")
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + pixels.tobytes()


def save_image(path, image: np.ndarray) -> None:
    """Write an ``[H, W, 3]`` image with values in ``[0, 255]`` (PPM or PNG)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8), "RGB").save(path)
    else:
        path.write_bytes(encode_ppm(image))


def load_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image
        import io

        try:
            with Image.open(io.BytesIO(buf)) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float64)
        except OSError as exc:
            raise DecodeError(f"{path}: {exc}") from None
    raise DecodeError(f"{path}: unsupported image format")


# ---------------------------------------------------------------- preprocessing


def resize_bilinear(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[H, W, C]`` with half-pixel centres and edge clamping."""
    x = np.asarray(x, dtype=np.float64)
    th, tw = (int(v) for v in target)
    if th < 1 or tw < 1:
        raise ParameterError(f"target dims must be >= 1, got {target}")
    h, w = x.shape[:2]
    if h < 1 or w < 1:
        raise ParameterError(f"source dims must be >= 1, got {x.shape}")

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(th, h)
    c0, c1, fc = axis(tw, w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = x[r0][:, c0] + fc * (x[r0][:, c1] - x[r0][:, c0])
    bot = x[r1][:, c0] + fc * (x[r1][:, c1] - x[r1][:, c0])
    return top + fr * (bot - top)


def normalize_255(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 255.0):
        raise ContractError("normalize_255 expects entries in [0, 255]")
    return x / 255.0


def load_dataset(manifest: Manifest, size: tuple[int, int] | None = None) -> list[Sample]:
    """Decode, optionally resize, and normalize every manifest row."""
    samples = []
    for img_path, label in manifest.rows:
        full = Path(img_path) if os.path.isabs(img_path) else manifest.root / img_path
        img = load_image(full)
        if size is not None and img.shape[:2] != tuple(size):
            img = np.clip(resize_bilinear(img, size), 0.0, 255.0)
        samples.append(Sample(normalize_255(img), manifest.label_index(label), img_path))
    return samples


# ---------------------------------------------------------------- sampling


def _by_class(samples: Sequence[Sample]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.label, []).append(i)
    return dict(sorted(groups.items()))


def rebalance(samples: Sequence[Sample], policy: RebalancePolicy,
              num_classes: int | None = None) -> list[Sample]:
    """Under/over-sample so every class has the policy's target count."""
    groups = _by_class(samples)
    if num_classes is not None:
        missing = [c for c in range(num_classes) if c not in groups]
        if missing:
            raise DataError(f"classes {missing} have no samples to rebalance")
    if not groups:
        raise DataError("nothing to rebalance")
    target = policy.resolve([len(v) for v in groups.values()])
    rng = np.random.Generator(np.random.PCG64(policy.seed))
    chosen: list[int] = []
    for idx in groups.values():
        idx = np.asarray(idx)
        if len(idx) >= target:
            chosen.extend(np.sort(rng.choice(idx, size=target, replace=False)))
        else:
            chosen.extend(idx)
            chosen.extend(rng.choice(idx, size=target - len(idx), replace=True))
    order = rng.permutation(len(chosen))
    return [samples[chosen[i]] for i in order]


def stratified_split(samples: Sequence[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Partition into (train, test); per class, ceil(fraction * n_c) go to test."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    test_idx: list[int] = []
    if spec.stratified:
        for label, idx in _by_class(samples).items():
            if len(idx) < 2:
                raise DataError(f"class {label} has {len(idx)} sample(s); stratification needs 2")
            n_test = math.ceil(spec.test_fraction * len(idx) - 1e-9)
            test_idx.extend(rng.permutation(idx)[:n_test])
    else:
        n_test = math.ceil(spec.test_fraction * len(samples) - 1e-9)
        test_idx.extend(rng.permutation(len(samples))[:n_test])
    in_test = set(int(i) for i in test_idx)
    train = [s for i, s in enumerate(samples) if i not in in_test]
    test = [s for i, s in enumerate(samples) if i in in_test]
    return train, test


def class_counts(samples: Sequence[Sample]) -> dict[int, int]:
    return dict(sorted(Counter(s.label for s in samples).items()))


# ---------------------------------------------------------------- synthetic data

_PATCH_RE = re.compile(r"-r(\d+)-c(\d+)-p(\d+)$")

BACKGROUND_LEVEL = 0.3
LESION_BOOST = 0.55


def synth_lesion_dataset(n_per_class: int, image_size: int = 32, patch_size: int = 8,
                         noise: float = 0.1, rng: np.random.Generator | None = None) -> list[Sample]:
    """Two-class toy data: class 1 carries a bright square patch over textured noise.

    The patch location is encoded in the source id as ``-r<row>-c<col>-p<size>``
    (see :func:`patch_from_source_id`).
    """
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 1 <= patch_size < image_size:
        raise ParameterError(f"need 1 <= patch size < image size, got {patch_size}, {image_size}")
    if noise < 0:
        raise ParameterError(f"noise stddev must be >= 0, got {noise}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    s = image_size
    samples = []
    for label in (0, 1):
        for i in range(n_per_class):
            white = rng.normal(0.0, 1.0, (s, s, 3))
            smooth = uniform_filter(rng.normal(0.0, 1.0, (s, s, 3)), size=(5, 5, 1), mode="wrap")
            smooth /= smooth.std()
            img = BACKGROUND_LEVEL + noise * (0.6 * white + 0.8 * smooth)
            r, c = (int(v) for v in rng.integers(0, s - patch_size + 1, size=2))
            sid = f"synth-c{label}-{i:04d}"
            if label == 1:
                img[r:r + patch_size, c:c + patch_size] += LESION_BOOST
                sid += f"-r{r}-c{c}-p{patch_size}"
            samples.append(Sample(np.clip(img, 0.0, 1.0), label, sid))
    return samples


def patch_from_source_id(source_id: str) -> tuple[int, int, int] | None:
    """(row, col, size) of the synthetic lesion patch, or None for class 0."""
    m = _PATCH_RE.search(source_id)
    return tuple(int(g) for g in m.groups()) if m else None


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples])
