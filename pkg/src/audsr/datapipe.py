"""Manifests, face alignment, crop/flip augmentation, paired batching and a
procedural two-domain face generator.

Coordinate conventions: a pixel with column ``j`` and row ``i`` sits at
``(x, y) = (j, i)``; normalised coordinates divide pixel coordinates by the
image side. Manifests store the full 68-point layout normalised by the raw
image size; training uses the 49 non-contour points.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

MANIFEST_FORMAT = "audsr-manifest"
MANIFEST_VERSION = 1
N_LAND_FULL = 68
LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
# 68-point layout without the jaw contour (0-16) and the inner mouth corners (60, 64)
TRAIN_LANDMARKS = tuple(list(range(17, 60)) + [61, 62, 63, 65, 66, 67])
AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU12", "AU17")


class ManifestError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def _template_68() -> np.ndarray:
    """Mirror-symmetric mean face in normalised aligned coordinates, dlib point order."""
    pts = []
    for k in range(17):  # jaw, image-left to image-right through the chin
        a = math.pi * (1.0 - k / 16.0)
        pts.append((0.5 + 0.36 * math.cos(a), 0.42 + 0.48 * math.sin(a)))
    for x0 in (0.20, 0.60):  # brows
        pts += [(x0 + 0.05 * k, 0.31 - 0.03 * math.sin(math.pi * k / 4)) for k in range(5)]
    pts += [(0.5, 0.40 + 0.055 * k) for k in range(4)]  # nose bridge
    pts += [(0.42 + 0.04 * k, 0.62 + 0.015 * (1 - abs(k - 2) / 2)) for k in range(5)]  # nostrils
    for cx in (0.35, 0.65):  # eyes, outer-left corner first, clockwise
        pts += [(cx - 0.06, 0.40), (cx - 0.025, 0.38), (cx + 0.025, 0.38),
                (cx + 0.06, 0.40), (cx + 0.025, 0.42), (cx - 0.025, 0.42)]
    for n, rx, ry in ((12, 0.11, 0.05), (8, 0.07, 0.02)):  # outer lip, inner lip
        for k in range(n):
            a = math.pi - 2 * math.pi * k / n
            pts.append((0.5 + rx * math.cos(a), 0.76 - ry * math.sin(a)))
    return np.array(pts, dtype=np.float64)


TEMPLATE_68 = _template_68()


def mirror_permutation(points: np.ndarray) -> list[int]:
    """Index map i -> j such that point j is the horizontal mirror of point i."""
    mirrored = points.copy()
    mirrored[:, 0] = 1.0 - mirrored[:, 0]
    d = np.linalg.norm(points[None, :, :] - mirrored[:, None, :], axis=2)
    perm = [int(j) for j in np.argmin(d, axis=1)]
    if sorted(perm) != list(range(len(points))):
        raise ValueError("template is not mirror symmetric")
    return perm


FLIP_PERMUTATION = tuple(mirror_permutation(TEMPLATE_68))


# -- manifest -------------------------------------------------------------------
@dataclass
class Record:
    path: str
    domain: str
    split: str
    landmarks: np.ndarray  # (68, 2), normalised by the raw image size
    au: np.ndarray | None

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "domain": self.domain,
            "split": self.split,
            "landmarks": [round(float(v), 10) for v in self.landmarks.reshape(-1)],
            "au": "-" if self.au is None else [int(v) for v in self.au],
        }


@dataclass
class Geometry:
    """Aligned canvas, crop size and canonical eye centres (normalised)."""

    aligned_size: int = 200
    crop_size: int = 176
    left_eye: tuple[float, float] = (0.35, 0.40)
    right_eye: tuple[float, float] = (0.65, 0.40)

    def __post_init__(self):
        if self.crop_size > self.aligned_size:
            raise ValueError("crop_size must not exceed aligned_size")

    @property
    def max_offset(self) -> int:
        return self.aligned_size - self.crop_size

    @classmethod
    def for_crop(cls, crop_size: int) -> "Geometry":
        """Aligned canvas in the same 200:176 proportion as the full-size pipeline."""
        return cls(aligned_size=int(round(crop_size * 200 / 176)), crop_size=crop_size)


@dataclass
class Manifest:
    records: list[Record]
    n_au: int = len(AU_NAMES)
    au_names: tuple[str, ...] = AU_NAMES
    train_landmarks: tuple[int, ...] = TRAIN_LANDMARKS
    flip_permutation: tuple[int, ...] = FLIP_PERMUTATION
    left_eye: tuple[int, ...] = LEFT_EYE
    right_eye: tuple[int, ...] = RIGHT_EYE
    root: Path = field(default_factory=Path)
    au_rates: np.ndarray | None = None
    mean_face: np.ndarray | None = None  # (68, 2) in the aligned frame, normalised

    @property
    def n_land(self) -> int:
        return len(self.train_landmarks)

    def header(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "n_land_full": N_LAND_FULL,
            "n_au": self.n_au,
            "au_names": list(self.au_names),
            "train_landmarks": list(self.train_landmarks),
            "flip_permutation": list(self.flip_permutation),
            "left_eye": list(self.left_eye),
            "right_eye": list(self.right_eye),
        }

    def select(self, domain: str | None = None, split: str | None = None) -> list[int]:
        return [i for i, r in enumerate(self.records)
                if (domain is None or r.domain == domain) and (split is None or r.split == split)]

    def compute_stats(self, geometry: Geometry | None = None) -> None:
        """AU occurrence rates and mean face over source training records only."""
        geometry = geometry or Geometry()
        idx = self.select("source", "train")
        labelled = [self.records[i].au for i in idx if self.records[i].au is not None]
        self.au_rates = np.mean(labelled, axis=0) if labelled else None
        faces = []
        for i in idx:
            lm = self.records[i].landmarks
            # alignment depends on landmarks only, so the aligned layout needs no pixels
            m = similarity_from_eyes(lm, self.left_eye, self.right_eye, geometry, scale=1.0)
            faces.append(apply_similarity(m, lm))
        self.mean_face = np.mean(faces, axis=0) if faces else None

    def write(self, path) -> None:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, geometry: Geometry | None = None) -> Manifest:
    """Parse a line-delimited JSON manifest; the first line is the header."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: malformed header ({exc.msg})") from None
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}:1: not an {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported manifest version {header.get('version')}")
    n_full = int(header.get("n_land_full", N_LAND_FULL))
    n_au = int(header["n_au"])
    records: list[Record] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rec_path = str(raw["path"])
            domain = raw["domain"]
            split = raw.get("split", "train")
            lm = np.asarray(raw["landmarks"], dtype=np.float64)
            au_raw = raw.get("au", "-")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None
        if domain not in ("source", "target"):
            raise ManifestError(f"{path}:{lineno}: domain must be 'source' or 'target', got {domain!r}")
        if lm.shape != (2 * n_full,):
            raise ManifestError(f"{path}:{lineno}: expected {2 * n_full} landmark values, got {lm.size}")
        if au_raw in ("-", None, []):
            au = None
        else:
            au = np.asarray(au_raw, dtype=np.int64)
            if au.shape != (n_au,) or not np.isin(au, (0, 1)).all():
                raise ManifestError(f"{path}:{lineno}: AU labels must be {n_au} values in {{0, 1}}")
        if domain == "source" and au is None:
            raise ManifestError(f"{path}:{lineno}: source records must carry AU labels")
        if rec_path in seen:
            warnings.warn(f"{path}:{lineno}: duplicate image path {rec_path!r}; keeping both", stacklevel=2)
        seen.add(rec_path)
        records.append(Record(rec_path, domain, split, lm.reshape(n_full, 2), au))
    man = Manifest(
        records=records,
        n_au=n_au,
        au_names=tuple(header.get("au_names", AU_NAMES[:n_au])),
        train_landmarks=tuple(header.get("train_landmarks", TRAIN_LANDMARKS)),
        flip_permutation=tuple(header.get("flip_permutation", FLIP_PERMUTATION)),
        left_eye=tuple(header.get("left_eye", LEFT_EYE)),
        right_eye=tuple(header.get("right_eye", RIGHT_EYE)),
        root=path.parent,
    )
    man.compute_stats(geometry)
    return man


# -- alignment --------------------------------------------------------------------
def similarity_from_eyes(landmarks: np.ndarray, left_eye: Sequence[int], right_eye: Sequence[int],
                         geometry: Geometry, scale: float) -> np.ndarray:
    """2x3 matrix taking coordinates in units of ``scale`` to the aligned canvas.

    With ``scale`` = 1 both sides are normalised; with ``scale`` = raw image side
    and ``geometry.aligned_size`` the mapping is in pixels on both sides.
    """
    src_l = landmarks[list(left_eye)].mean(axis=0)
    src_r = landmarks[list(right_eye)].mean(axis=0)
    out_scale = 1.0 if scale == 1.0 else geometry.aligned_size
    dst_l = np.asarray(geometry.left_eye) * out_scale
    dst_r = np.asarray(geometry.right_eye) * out_scale
    v_src = src_r - src_l
    v_dst = dst_r - dst_l
    n_src = float(np.hypot(*v_src))
    if n_src < 1e-9:
        raise AlignmentError("eye centres coincide; similarity transform is degenerate")
    s = float(np.hypot(*v_dst)) / n_src
    ang = math.atan2(v_dst[1], v_dst[0]) - math.atan2(v_src[1], v_src[0])
    rot = s * np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    t = dst_l - rot @ src_l
    return np.hstack([rot, t[:, None]])


def apply_similarity(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ m[:, :2].T + m[:, 2]


def warp_image(image: np.ndarray, m: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resampling of a C x H x W image under ``m`` (source -> output), edge clamped."""
    inv_rot = np.linalg.inv(m[:, :2])
    ys, xs = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    dst = np.stack([xs.ravel(), ys.ravel()], axis=1) - m[:, 2]
    src = dst @ inv_rot.T
    coords = np.stack([src[:, 1], src[:, 0]])  # (row, col)
    out = np.stack([map_coordinates(ch, coords, order=1, mode="nearest").reshape(out_size, out_size)
                    for ch in image])
    return out


@dataclass
class AlignedFace:
    image: np.ndarray  # C x S x S in [0, 1]
    landmarks: np.ndarray  # (68, 2), normalised by S
    inter_ocular: float  # normalised by S


def align_face(image: np.ndarray, landmarks: np.ndarray, geometry: Geometry | None = None,
               left_eye: Sequence[int] = LEFT_EYE, right_eye: Sequence[int] = RIGHT_EYE) -> AlignedFace:
    """Rotate, scale and translate so the eye centres land on their canonical positions.

    ``landmarks`` are pixel coordinates of ``image`` (C x H x W, square).
    """
    geometry = geometry or Geometry()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    m = similarity_from_eyes(landmarks, left_eye, right_eye, geometry, scale=float(image.shape[-1]))
    size = geometry.aligned_size
    warped = np.clip(warp_image(image, m, size), 0.0, 1.0)
    pts = apply_similarity(m, landmarks) / size
    eyes = pts[list(left_eye)].mean(axis=0), pts[list(right_eye)].mean(axis=0)
    return AlignedFace(warped, pts, float(np.hypot(*(eyes[1] - eyes[0]))))


# -- augmentation ------------------------------------------------------------------
@dataclass
class Sample:
    image: np.ndarray  # C x crop x crop
    landmarks: np.ndarray  # (2 * n_land,), interleaved x, y, normalised by crop size
    au_labels: np.ndarray | None
    domain: str
    inter_ocular: float


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image; a flat image is only centred."""
    centred = image - image.mean()
    sd = centred.std()
    return centred / sd if sd > 1e-8 else centred


def crop_and_flip(face: AlignedFace, offset: tuple[int, int], flip: bool, geometry: Geometry,
                  flip_permutation: Sequence[int] = FLIP_PERMUTATION) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic part of augmentation; returns (image, full 68 x 2 landmarks)."""
    ox, oy = offset
    c = geometry.crop_size
    if not (0 <= ox <= geometry.max_offset and 0 <= oy <= geometry.max_offset):
        raise ValueError(f"crop offset {offset} outside [0, {geometry.max_offset}]")
    img = face.image[:, oy:oy + c, ox:ox + c]
    pts = face.landmarks * geometry.aligned_size - np.array([ox, oy], dtype=np.float64)
    if flip:
        img = img[:, :, ::-1]
        pts = pts.copy()
        pts[:, 0] = (c - 1) - pts[:, 0]
        pts = pts[list(flip_permutation)]
    return np.ascontiguousarray(img), pts / c


def augment(face: AlignedFace, seed, geometry: Geometry | None = None, domain: str = "source",
            au_labels: np.ndarray | None = None, train_landmarks: Sequence[int] = TRAIN_LANDMARKS,
            flip_permutation: Sequence[int] = FLIP_PERMUTATION, enabled: bool = True) -> Sample:
    """Random crop (offset uniform in [0, aligned - crop]^2) and horizontal flip with p = 0.5.

    With ``enabled`` False the crop is centred and never flipped.
    """
    geometry = geometry or Geometry()
    if enabled:
        rng = np.random.default_rng(seed)
        ox, oy = (int(v) for v in rng.integers(0, geometry.max_offset + 1, size=2))
        flip = bool(rng.random() < 0.5)
    else:
        ox = oy = geometry.max_offset // 2
        flip = False
    img, pts = crop_and_flip(face, (ox, oy), flip, geometry, flip_permutation)
    scale = geometry.aligned_size / geometry.crop_size
    return Sample(
        image=standardize(img),
        landmarks=pts[list(train_landmarks)].reshape(-1),
        au_labels=None if au_labels is None else np.asarray(au_labels, dtype=np.float64),
        domain=domain,
        inter_ocular=face.inter_ocular * scale,
    )


# -- dataset and batching -------------------------------------------------------------
def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


@dataclass
class Batch:
    images: np.ndarray  # B x C x S x S
    landmarks: np.ndarray  # B x 2 n_land
    inter_ocular: np.ndarray  # B
    au: np.ndarray | None  # B x n_au
    indices: np.ndarray


class FaceDataset:
    """Aligned faces of one manifest, cached in memory after the first access."""

    def __init__(self, manifest: Manifest, geometry: Geometry | None = None):
        self.manifest = manifest
        self.geometry = geometry or Geometry()
        self._cache: dict[int, AlignedFace] = {}

    def aligned(self, i: int) -> AlignedFace:
        face = self._cache.get(i)
        if face is None:
            rec = self.manifest.records[i]
            img = read_image(self.manifest.root / rec.path)
            if img.shape[1] != img.shape[2]:
                raise ManifestError(f"{rec.path}: images must be square, got {img.shape[1:]}")
            face = align_face(img, rec.landmarks * img.shape[-1], self.geometry,
                              self.manifest.left_eye, self.manifest.right_eye)
            self._cache[i] = face
        return face

    def sample(self, i: int, seed, augment_enabled: bool = True) -> Sample:
        rec = self.manifest.records[i]
        return augment(self.aligned(i), seed, self.geometry, rec.domain, rec.au,
                       self.manifest.train_landmarks, self.manifest.flip_permutation, augment_enabled)

    def mean_face(self) -> np.ndarray:
        """Mean training-landmark layout in the centre-crop frame, interleaved."""
        if self.manifest.mean_face is None:
            raise ManifestError("manifest has no source training records for a mean face")
        g = self.geometry
        off = g.max_offset // 2
        pts = (self.manifest.mean_face * g.aligned_size - off) / g.crop_size
        return pts[list(self.manifest.train_landmarks)].reshape(-1)

    def collate(self, indices: Sequence[int], seeds: Sequence, augment_enabled: bool = True) -> Batch:
        samples = [self.sample(i, s, augment_enabled) for i, s in zip(indices, seeds)]
        au = None
        if all(s.au_labels is not None for s in samples):
            au = np.stack([s.au_labels for s in samples])
        return Batch(
            images=np.stack([s.image for s in samples]),
            landmarks=np.stack([s.landmarks for s in samples]),
            inter_ocular=np.array([s.inter_ocular for s in samples]),
            au=au,
            indices=np.asarray(indices),
        )

    def batches(self, indices: Sequence[int], batch_size: int, seed: int, epoch: int = 0,
                augment_enabled: bool = True, shuffle: bool = True, drop_last: bool = True
                ) -> Iterator[Batch]:
        order = np.asarray(indices)
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(order)
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for b, start in enumerate(range(0, stop, batch_size)):
            chunk = order[start:start + batch_size]
            yield self.collate(chunk, [(seed, epoch, b, int(i)) for i in chunk], augment_enabled)


def paired_order(n_source: int, n_target: int, batch_size: int, seed: int, epoch: int
                 ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Positions into the source and target index lists for one epoch.

    The source list is shuffled and cut into full batches; the target list is
    reshuffled each time it runs out, so the shorter domain cycles.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError("both domains need at least one sample")
    rng = np.random.default_rng([seed, epoch])
    src = rng.permutation(n_source)
    n_batches = n_source // batch_size
    need = n_batches * batch_size
    tgt_parts = []
    while sum(len(p) for p in tgt_parts) < need:
        tgt_parts.append(rng.permutation(n_target))
    tgt = np.concatenate(tgt_parts)[:need] if tgt_parts else np.zeros(0, dtype=int)
    return [(src[b * batch_size:(b + 1) * batch_size], tgt[b * batch_size:(b + 1) * batch_size])
            for b in range(n_batches)]


def batches(dataset: FaceDataset, batch_size: int, seed: int, epoch: int = 0,
            source_split: str = "train", target_split: str = "train",
            augment_enabled: bool = True) -> Iterator[tuple[Batch, Batch]]:
    """Paired (source batch, target batch) iterator, deterministic per (seed, epoch)."""
    src_idx = np.asarray(dataset.manifest.select("source", source_split))
    tgt_idx = np.asarray(dataset.manifest.select("target", target_split))
    for b, (ps, pt) in enumerate(paired_order(len(src_idx), len(tgt_idx), batch_size, seed, epoch)):
        s_ids, t_ids = src_idx[ps], tgt_idx[pt]
        yield (dataset.collate(s_ids, [(seed, epoch, b, 0, int(i)) for i in s_ids], augment_enabled),
               dataset.collate(t_ids, [(seed, epoch, b, 1, int(i)) for i in t_ids], augment_enabled))


# -- synthetic two-domain faces ---------------------------------------------------------
# per AU: landmark groups (one blob at each group's centroid) and a shared offset
AU_PATTERN_ANCHORS = (
    (((21,), (22,)), (0.0, -0.06)),     # inner brow raiser: above the inner brows
    (((17,), (26,)), (0.0, -0.05)),     # outer brow raiser: above the outer brow ends
    (((21, 22, 27),), (0.0, 0.0)),      # brow lowerer: between the brows
    (((41,), (46,)), (0.0, 0.09)),      # cheek raiser: below the eyes
    (((48,), (54,)), (0.0, -0.04)),     # lip corner puller: at the mouth corners
    (((8, 57),), (0.0, 0.0)),           # chin raiser: between lower lip and chin
)


@dataclass
class SynthSpec:
    image_size: int = 72
    channels: int = 1
    n_au: int = 6
    n_source_train: int = 200
    n_source_val: int = 40
    n_target_train: int = 200
    n_target_val: int = 60
    n_target_test: int = 60
    au_rates: tuple[float, ...] = (0.35, 0.3, 0.4, 0.45, 0.5, 0.35)
    pattern_strength: float = 0.8
    pattern_scale: float = 0.06
    max_rotation_deg: float = 12.0
    scale_jitter: float = 0.08
    shift_jitter: float = 0.03
    shape_jitter: float = 0.006

    def __post_init__(self):
        if not 1 <= self.n_au <= len(AU_PATTERN_ANCHORS):
            raise ValueError(f"synthetic faces support 1..{len(AU_PATTERN_ANCHORS)} AUs")
        if len(self.au_rates) < self.n_au:
            raise ValueError("au_rates needs one entry per AU")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["au_rates"] = list(self.au_rates)
        return d


def _stamp(canvas: np.ndarray, cx: float, cy: float, sigma: float, amp: float) -> None:
    """Add a Gaussian truncated at 3 sigma."""
    h, w = canvas.shape
    r = int(math.ceil(3 * sigma))
    x0, x1 = max(0, int(math.floor(cx)) - r), min(w, int(math.ceil(cx)) + r + 1)
    y0, y1 = max(0, int(math.floor(cy)) - r), min(h, int(math.ceil(cy)) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    g = amp * np.exp(-d2 / (2 * sigma ** 2))
    g[d2 > (3 * sigma) ** 2] = 0.0
    canvas[y0:y1, x0:x1] += g


# per AU: a locally distinct shape, so presence is detectable without position
# all shapes are mirror-symmetric so horizontal flips keep labels valid
AU_PATTERN_SHAPES = ("bar0", "bar90", "xcross", "disc", "ring", "cross")


def _shape_patch(kind: str, xs: np.ndarray, ys: np.ndarray, scale: float) -> np.ndarray:
    """Unit-amplitude pattern evaluated at offsets (xs, ys) from its centre."""
    if kind == "ring":
        r = np.hypot(xs, ys)
        return np.exp(-((r - 1.3 * scale) ** 2) / (2 * (0.35 * scale) ** 2))
    if kind == "disc":
        return np.exp(-(np.hypot(xs, ys) / (1.1 * scale)) ** 4)
    if kind == "xcross":
        return np.maximum(_shape_patch("bar45", xs, ys, scale), _shape_patch("bar135", xs, ys, scale))
    if kind == "cross":
        return np.maximum(_shape_patch("bar0", xs, ys, scale), _shape_patch("bar90", xs, ys, scale))
    ang = math.radians(float(kind[3:]))
    u = xs * math.cos(ang) + ys * math.sin(ang)
    v = -xs * math.sin(ang) + ys * math.cos(ang)
    return np.exp(-(u ** 2) / (2 * (1.4 * scale) ** 2) - v ** 2 / (2 * (0.35 * scale) ** 2))


def _stamp_shape(canvas: np.ndarray, cx: float, cy: float, kind: str, scale: float, amp: float) -> None:
    h, w = canvas.shape
    r = int(math.ceil(4 * scale))
    x0, x1 = max(0, int(math.floor(cx)) - r), min(w, int(math.ceil(cx)) + r + 1)
    y0, y1 = max(0, int(math.floor(cy)) - r), min(h, int(math.ceil(cy)) + r + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    canvas[y0:y1, x0:x1] += amp * _shape_patch(kind, xs - cx, ys - cy, scale)


def au_pattern_centres(landmarks_px: np.ndarray, au: int) -> list[tuple[float, float]]:
    """Pattern blob centres of one AU, in pixels, for a face with these landmarks."""
    groups, (dx, dy) = AU_PATTERN_ANCHORS[au]
    pts = [landmarks_px[list(g)].mean(axis=0) for g in groups]
    # offsets follow the face scale (inter-ocular distance relative to the template's 0.3)
    io = np.hypot(*(landmarks_px[list(RIGHT_EYE)].mean(0) - landmarks_px[list(LEFT_EYE)].mean(0)))
    k = io / 0.3
    return [(float(p[0] + dx * k), float(p[1] + dy * k)) for p in pts]


def render_face(landmarks_px: np.ndarray, au: np.ndarray, domain: str, size: int, channels: int,
                rng: np.random.Generator, pattern_strength: float = 0.8,
                pattern_scale: float = 0.06) -> np.ndarray:
    """Background texture + soft face disc + landmark dots + AU pattern blobs."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if domain == "source":
        # smooth: a tilted gradient plus a broad bump
        ang = rng.uniform(0, 2 * math.pi)
        bg = 0.25 + 0.08 * ((xs * math.cos(ang) + ys * math.sin(ang)) / size)
        bx, by = rng.uniform(0, size, 2)
        bg += 0.06 * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * (0.3 * size) ** 2))
    else:
        # striped: period of 3-5 pixels at a random orientation and phase
        ang = rng.uniform(0, math.pi)
        period = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * math.pi)
        bg = 0.28 + 0.12 * np.sin(2 * math.pi * (xs * math.cos(ang) + ys * math.sin(ang)) / period + phase)
    io = np.hypot(*(landmarks_px[list(RIGHT_EYE)].mean(0) - landmarks_px[list(LEFT_EYE)].mean(0)))
    centre = landmarks_px[list(TRAIN_LANDMARKS)].mean(axis=0)
    face = np.exp(-(((xs - centre[0]) / (1.25 * io)) ** 2 + ((ys - centre[1]) / (1.6 * io)) ** 2) ** 2)
    img = bg * (1 - 0.7 * face) + 0.55 * face
    dots = np.zeros((size, size))
    sig = max(0.5, 0.012 * size)
    for x, y in landmarks_px:
        _stamp(dots, x, y, sig, 0.3)
    patterns = np.zeros((size, size))
    for k, on in enumerate(au):
        if on:
            for cx, cy in au_pattern_centres(landmarks_px, k):
                _stamp_shape(patterns, cx, cy, AU_PATTERN_SHAPES[k], pattern_scale * size,
                             pattern_strength)
    img = np.clip(img + dots + patterns, 0.0, 1.0)
    return np.repeat(img[None], channels, axis=0)


def synth_face_layout(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    """Template with per-point jitter under a random similarity; pixel coordinates."""
    pts = TEMPLATE_68 + rng.normal(0.0, spec.shape_jitter, TEMPLATE_68.shape)
    ang = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    s = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    shift = rng.uniform(-spec.shift_jitter, spec.shift_jitter, 2)
    rot = s * np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    pts = (pts - 0.5) @ rot.T + 0.5 + shift
    return pts * spec.image_size


def synth_dataset(spec: SynthSpec, seed: int, out_dir) -> Manifest:
    """Write a two-domain synthetic face set (PNG + manifest.jsonl) under ``out_dir``.

    Landmarks and AU labels are exact by construction. Target training records
    are written without AU labels; target val/test records keep them.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    plan = [("source", "train", spec.n_source_train), ("source", "val", spec.n_source_val),
            ("target", "train", spec.n_target_train), ("target", "val", spec.n_target_val),
            ("target", "test", spec.n_target_test)]
    root_ss = np.random.SeedSequence(seed)
    records = []
    rates = np.asarray(spec.au_rates[:spec.n_au])
    for domain, split, count in plan:
        for k in range(count):
            rng = np.random.default_rng(root_ss.spawn(1)[0])
            lm = synth_face_layout(rng, spec)
            au = (rng.random(spec.n_au) < rates).astype(np.int64)
            img = render_face(lm, au, domain, spec.image_size, spec.channels, rng, spec.pattern_strength,
                              spec.pattern_scale)
            name = f"images/{domain}_{split}_{k:05d}.png"
            write_image(out / name, img)
            keep_au = not (domain == "target" and split == "train")
            records.append(Record(name, domain, split, lm / spec.image_size, au if keep_au else None))
    man = Manifest(records=records, n_au=spec.n_au, au_names=AU_NAMES[:spec.n_au], root=out)
    man.write(out / "manifest.jsonl")
    (out / "synth_spec.json").write_text(json.dumps({"seed": seed, **spec.to_dict()}, sort_keys=True) + "\n")
    return load_manifest(out / "manifest.jsonl")
