"""Procedural multi-category deformable-keypoint benchmark.

Each category is a random 3D template (unit RMS radius) with a small
orthogonal deformation basis and an MST skeleton. A sample draws deformation
coefficients and a uniform rotation; a context factor in [0,1] is added to
the first deformation coefficient (scaled by a coupling knob) AND drives the
image's global brightness, so the image carries shape information that the
2D keypoints alone lose in the depth direction. Keypoints whose camera depth
falls in the rear quartile go invisible with probability one half.

Ground-truth 3D is stored in the canonical (unrotated) frame, so every
sample satisfies keypoints2d == project(rotation, keypoints3d) exactly, and
camera-frame ground truth is rotation @ keypoints3d.

On disk a dataset is a directory with `manifest.json` (all reals as decimal
text) plus one binary P5 PGM per image; pixel values are quantized to the
255-level grid at render time so images round-trip bit-exactly.
"""
from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detector import ImageRaster
from .geometry import random_rotation
from .shapemodel import CategoryRegistry

FORMAT_VERSION = 1
DEFAULT_WINDOW = 3.2
DEFAULT_IMAGE_SIZE = 64
BLOB_SIGMA_PX = 1.5
SKELETON_INTENSITY = 0.5
LINE_HALF_WIDTH_PX = 0.6
N_DEFORMATION_MODES = 3
_SPLIT_CODES = {"train": 1, "test": 2, "val": 3}
_CATEGORY_STREAM = 0


@dataclass
class SyntheticCategory:
    name: str
    keypoint_names: tuple
    template: np.ndarray  # (3, k_z), zero-mean, unit RMS radius
    deformation_basis: np.ndarray  # (n_modes, 3*k_z), orthogonal rows
    deformation_scale: float
    skeleton: tuple  # ((i, j), ...) template MST edges

    @property
    def keypoint_count(self):
        return len(self.keypoint_names)


@dataclass
class SyntheticSample:
    sample_id: str
    category_id: int
    coeffs: np.ndarray
    rotation: np.ndarray  # (3, 3) ground truth
    keypoints3d: np.ndarray  # (3, k_z) canonical frame
    keypoints2d: np.ndarray  # (2, k_z)
    visibility: np.ndarray  # (k_z,) 0/1
    context_factor: float
    image: Optional[ImageRaster] = None
    image_file: Optional[str] = None


@dataclass
class Dataset:
    categories: list
    samples: list
    window: float = DEFAULT_WINDOW
    image_size: int = DEFAULT_IMAGE_SIZE
    seed: int = 0
    split: str = "train"
    context_coupling: float = 1.0

    def registry(self):
        reg = CategoryRegistry()
        for cat in self.categories:
            reg.register(cat.name, cat.keypoint_names)
        return reg


def world_to_unit(points, window):
    """Map camera-plane coordinates in [-window, window] to [0,1] image units."""
    return (np.asarray(points, dtype=np.float64) + window) / (2.0 * window)


def unit_to_world(points, window):
    return np.asarray(points, dtype=np.float64) * (2.0 * window) - window


# -- generation --------------------------------------------------------------


def _orthogonalize_rows(m):
    out = m.astype(np.float64).copy()
    for i in range(out.shape[0]):
        for j in range(i):
            out[i] -= (out[i] @ out[j]) / (out[j] @ out[j]) * out[j]
    return out


# Principal-axis scales for templates. Elongated objects (like real
# categories) make viewpoint well determined from the projection; isotropic
# Gaussian clouds leave pose estimation needlessly ill-conditioned.
_TEMPLATE_AXES = np.array([1.7, 1.0, 0.55])
# Deformation strength per keypoint per unit coefficient. Modes are smooth
# low-frequency fields, not white per-point noise, so foreshortening cues
# survive deformation.
_MODE_POINT_RMS = 0.55


def _smooth_modes(rng, template, n_modes):
    """Orthogonal low-frequency displacement fields over the template:
    direction u, spatial profile sin(w . t + phase)."""
    k = template.shape[1]
    rows = []
    for _ in range(n_modes):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        w = rng.standard_normal(3) * 1.2
        phase = rng.uniform(0.0, 2.0 * np.pi)
        profile = np.sin(template.T @ w + phase)
        rows.append(np.outer(profile, u).reshape(-1))
    basis = _orthogonalize_rows(np.stack(rows))
    basis *= _MODE_POINT_RMS * np.sqrt(k) / np.linalg.norm(basis, axis=1, keepdims=True)
    return basis


def gen_categories(n_categories, seed, deformation_scale=0.2, n_modes=N_DEFORMATION_MODES):
    """Deterministic category draw: k_z in {6..14}, anisotropic random point
    cloud template normalized to unit RMS radius, orthogonalized smooth
    deformation modes, MST skeleton."""
    if n_categories < 1:
        raise ValueError("need at least one category")
    cats = []
    for i in range(n_categories):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), _CATEGORY_STREAM, i]))
        k = int(rng.integers(6, 15))
        template = rng.standard_normal((3, k)) * _TEMPLATE_AXES[:, None]
        template -= template.mean(axis=1, keepdims=True)
        template /= np.sqrt(np.mean(np.sum(template**2, axis=0)))
        basis = _smooth_modes(rng, template, n_modes)
        cats.append(
            SyntheticCategory(
                name=f"cat_{i:02d}",
                keypoint_names=tuple(f"kp_{i:02d}_{j:02d}" for j in range(k)),
                template=template,
                deformation_basis=basis,
                deformation_scale=float(deformation_scale),
                skeleton=_mst_edges(template),
            )
        )
    return cats


def _mst_edges(template):
    """Prim's MST over template point distances; gives a plausible skeleton."""
    k = template.shape[1]
    d = np.linalg.norm(template[:, :, None] - template[:, None, :], axis=0)
    in_tree = np.zeros(k, dtype=bool)
    in_tree[0] = True
    edges = []
    best = d[0].copy()
    best_from = np.zeros(k, dtype=int)
    for _ in range(k - 1):
        best_masked = np.where(in_tree, np.inf, best)
        j = int(np.argmin(best_masked))
        edges.append((int(best_from[j]), j))
        in_tree[j] = True
        closer = (d[j] < best) & ~in_tree
        best_from = np.where(closer, j, best_from)
        best = np.where(closer, d[j], best)
    return tuple(sorted((min(a, b), max(a, b)) for a, b in edges))


def _rear_quartile_count(k):
    return int(np.ceil(k / 4))


def sample_instance(category, category_id, seed, sample_id="", context_coupling=1.0):
    """Draw one sample. `seed` may be an int or a numpy SeedSequence."""
    rng = np.random.default_rng(seed)
    k = category.keypoint_count
    raw = rng.standard_normal(N_DEFORMATION_MODES)
    context = float(rng.uniform())
    raw = raw.copy()
    raw[0] += context_coupling * context
    coeffs = category.deformation_scale * raw
    x3d = category.template + (coeffs @ category.deformation_basis).reshape(k, 3).T
    m = _rear_quartile_count(k)
    while True:
        rotation = random_rotation(rng)
        depth = (rotation @ x3d)[2]
        rear = np.argsort(depth)[-m:]  # farthest from the camera
        visibility = None
        for _ in range(10):
            vis = np.ones(k)
            vis[rear[rng.random(m) < 0.5]] = 0.0
            if vis.sum() >= 3:
                visibility = vis
                break
        if visibility is not None:
            break
    keypoints2d = (rotation @ x3d)[0:2]
    return SyntheticSample(
        sample_id=sample_id,
        category_id=category_id,
        coeffs=coeffs,
        rotation=rotation,
        keypoints3d=x3d,
        keypoints2d=keypoints2d,
        visibility=visibility,
        context_factor=context,
    )


# -- rendering ---------------------------------------------------------------


def render_image(sample, category, window=DEFAULT_WINDOW, size=DEFAULT_IMAGE_SIZE):
    """Rasterize one sample: skeleton segments (drawn for all keypoints) at
    intensity 0.5, a Gaussian blob per *visible* keypoint, max-composited,
    then the whole frame scaled by 0.5 + 0.5*context so brightness reveals
    the context factor. Output is pre-quantized to the 256-level grid."""
    px_per_unit = size / (2.0 * window)
    pts_px = (sample.keypoints2d + window) * px_per_unit - 0.5  # pixel-center coords
    canvas = np.zeros((size, size))
    grid = np.arange(size, dtype=np.float64)
    gx, gy = np.meshgrid(grid, grid)  # gy: row (y), gx: col (x)

    for a, b in category.skeleton:
        pa, pb = pts_px[:, a], pts_px[:, b]
        seg = pb - pa
        len2 = seg @ seg
        if len2 == 0.0:
            continue
        t = ((gx - pa[0]) * seg[0] + (gy - pa[1]) * seg[1]) / len2
        t = np.clip(t, 0.0, 1.0)
        dx = gx - (pa[0] + t * seg[0])
        dy = gy - (pa[1] + t * seg[1])
        mask = dx * dx + dy * dy <= LINE_HALF_WIDTH_PX**2
        canvas[mask] = np.maximum(canvas[mask], SKELETON_INTENSITY)

    half = int(np.ceil(6 * BLOB_SIGMA_PX))
    for j in np.nonzero(sample.visibility > 0)[0]:
        cx, cy = pts_px[:, j]
        c0, r0 = int(np.floor(cx)) - half, int(np.floor(cy)) - half
        c1, r1 = c0 + 2 * half + 1, r0 + 2 * half + 1
        c0c, r0c = max(c0, 0), max(r0, 0)
        c1c, r1c = min(c1, size), min(r1, size)
        if c0c >= c1c or r0c >= r1c:
            continue
        sub_x = grid[c0c:c1c]
        sub_y = grid[r0c:r1c]
        d2 = (sub_x[None, :] - cx) ** 2 + (sub_y[:, None] - cy) ** 2
        blob = np.exp(-d2 / (2.0 * BLOB_SIGMA_PX**2))
        canvas[r0c:r1c, c0c:c1c] = np.maximum(canvas[r0c:r1c, c0c:c1c], blob)

    canvas *= 0.5 + 0.5 * sample.context_factor
    quantized = np.round(canvas * 255.0) / 255.0
    return ImageRaster(pixels=quantized)


# -- dataset generation -------------------------------------------------------


def generate_dataset(
    n_categories,
    samples_per_category,
    seed,
    split="train",
    deformation_scale=0.2,
    context_coupling=1.0,
    window=DEFAULT_WINDOW,
    image_size=DEFAULT_IMAGE_SIZE,
    workers=1,
    render=True,
):
    """Category draw depends only on `seed`; each sample's stream is derived
    from (seed, split, category, index), so parallel generation is bitwise
    identical to serial and train/test splits never overlap."""
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}")
    cats = gen_categories(n_categories, seed, deformation_scale)
    jobs = [(ci, si) for ci in range(n_categories) for si in range(samples_per_category)]

    def build(job):
        ci, si = job
        cat = cats[ci]
        ss = np.random.SeedSequence([int(seed), _SPLIT_CODES[split], ci, si])
        sample = sample_instance(
            cat,
            ci,
            ss,
            sample_id=f"{cat.name}-{split}-{si:05d}",
            context_coupling=context_coupling,
        )
        if render:
            sample.image = render_image(sample, cat, window=window, size=image_size)
            sample.image_file = f"images/{sample.sample_id}.pgm"
        return sample

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(build, jobs))
    else:
        samples = [build(j) for j in jobs]
    return Dataset(
        categories=cats,
        samples=samples,
        window=window,
        image_size=image_size,
        seed=int(seed),
        split=split,
        context_coupling=context_coupling,
    )


# -- PGM ----------------------------------------------------------------------


def write_pgm(image, path):
    px = np.round(image.pixels * 255.0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()

    def fail(offset, what):
        raise ValueError(f"{path}: malformed PGM at byte {offset}: {what}")

    if not blob.startswith(b"P5\n"):
        fail(0, "expected 'P5' magic")
    pos = 3
    fields = []
    while len(fields) < 3:
        end = blob.find(b"\n", pos)
        if end < 0:
            fail(pos, "truncated header")
        for tok in blob[pos:end].split():
            fields.append((tok, pos))
        pos = end + 1
    (w_tok, w_off), (h_tok, h_off), (m_tok, m_off) = fields[:3]
    try:
        w, h = int(w_tok), int(h_tok)
    except ValueError:
        fail(w_off, "width/height not integers")
    if int(m_tok) != 255:
        fail(m_off, "maxval must be 255")
    body = blob[pos:]
    if len(body) != w * h:
        fail(pos, f"payload has {len(body)} bytes, expected {w * h}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return ImageRaster(pixels=px.astype(np.float64) / 255.0)


# -- manifest -----------------------------------------------------------------


def write_dataset(dataset, path):
    os.makedirs(path, exist_ok=True)
    img_dir = os.path.join(path, "images")
    manifest = {
        "format_version": FORMAT_VERSION,
        "window": dataset.window,
        "image_size": dataset.image_size,
        "seed": dataset.seed,
        "split": dataset.split,
        "context_coupling": dataset.context_coupling,
        "categories": [
            {
                "name": c.name,
                "keypoint_count": c.keypoint_count,
                "keypoint_names": list(c.keypoint_names),
                "skeleton": [list(e) for e in c.skeleton],
                "template": c.template.tolist(),
                "deformation_basis": c.deformation_basis.tolist(),
                "deformation_scale": c.deformation_scale,
            }
            for c in dataset.categories
        ],
        "samples": [],
    }
    for s in dataset.samples:
        rec = {
            "id": s.sample_id,
            "category": dataset.categories[s.category_id].name,
            "keypoints2d": s.keypoints2d.tolist(),
            "visibility": [int(v) for v in s.visibility],
            "coeffs": s.coeffs.tolist(),
            "rotation": s.rotation.tolist(),
            "keypoints3d": s.keypoints3d.tolist(),
            "context_factor": s.context_factor,
            "image": s.image_file,
        }
        manifest["samples"].append(rec)
        if s.image is not None and s.image_file is not None:
            os.makedirs(img_dir, exist_ok=True)
            write_pgm(s.image, os.path.join(path, s.image_file))
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f)


def _field(record, name, where):
    try:
        return record[name]
    except KeyError:
        raise ValueError(f"manifest: {where}: missing field {name!r}") from None


def _as_array(value, shape, name, where):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"manifest: {where}: field {name!r} has shape {arr.shape}, expected {shape}")
    return arr


def read_dataset(path, with_images=True):
    """Load a dataset directory. With `with_images=False` image files are
    neither opened nor required to exist (keypoint-only training)."""
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{manifest_path}: invalid JSON: {e}") from None
    if _field(manifest, "format_version", "header") != FORMAT_VERSION:
        raise ValueError(f"manifest: unsupported format_version {manifest['format_version']}")
    cats = []
    by_name = {}
    for i, c in enumerate(_field(manifest, "categories", "header")):
        where = f"categories[{i}]"
        k = int(_field(c, "keypoint_count", where))
        names = _field(c, "keypoint_names", where)
        if len(names) != k:
            raise ValueError(f"manifest: {where}: keypoint_names length != keypoint_count")
        cat = SyntheticCategory(
            name=_field(c, "name", where),
            keypoint_names=tuple(names),
            template=_as_array(_field(c, "template", where), (3, k), "template", where),
            deformation_basis=_as_array(
                _field(c, "deformation_basis", where),
                (len(c["deformation_basis"]), 3 * k),
                "deformation_basis",
                where,
            ),
            deformation_scale=float(_field(c, "deformation_scale", where)),
            skeleton=tuple((int(a), int(b)) for a, b in _field(c, "skeleton", where)),
        )
        for a, b in cat.skeleton:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"manifest: {where}: skeleton edge ({a},{b}) out of range")
        by_name[cat.name] = i
        cats.append(cat)
    samples = []
    for i, r in enumerate(_field(manifest, "samples", "header")):
        where = f"samples[{i}]"
        cname = _field(r, "category", where)
        if cname not in by_name:
            raise ValueError(f"manifest: {where}: unknown category reference {cname!r}")
        ci = by_name[cname]
        k = cats[ci].keypoint_count
        image_file = _field(r, "image", where)
        sample = SyntheticSample(
            sample_id=_field(r, "id", where),
            category_id=ci,
            coeffs=np.asarray(_field(r, "coeffs", where), dtype=np.float64),
            rotation=_as_array(_field(r, "rotation", where), (3, 3), "rotation", where),
            keypoints3d=_as_array(_field(r, "keypoints3d", where), (3, k), "keypoints3d", where),
            keypoints2d=_as_array(_field(r, "keypoints2d", where), (2, k), "keypoints2d", where),
            visibility=_as_array(_field(r, "visibility", where), (k,), "visibility", where),
            context_factor=float(_field(r, "context_factor", where)),
            image_file=image_file,
        )
        if with_images and image_file is not None:
            sample.image = read_pgm(os.path.join(path, image_file))
        samples.append(sample)
    return Dataset(
        categories=cats,
        samples=samples,
        window=float(_field(manifest, "window", "header")),
        image_size=int(_field(manifest, "image_size", "header")),
        seed=int(manifest.get("seed", 0)),
        split=manifest.get("split", "train"),
        context_coupling=float(manifest.get("context_coupling", 1.0)),
    )
