"""Training data: synthetic scenes, triple-frame curation and on-the-fly augmentation.

Curation follows the order random centre -> shot-boundary rejection ->
motion-weighted sampling -> entropy selection. Motion is measured with
exhaustive block matching; it only weights the sampling and never reaches
the loss.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, ManifestParseError, ShapeError
from .frames import load_frame, numbered_frames
from .net import read_tensor, write_tensor
from .synth import flip_direction_index, ground_truth

WEIGHT_EPSILON = 0.1
SHOT_BINS = 32
SHOT_THRESHOLD = 0.5
MANIFEST_MAGIC = "ADMF"
MANIFEST_VERSION = 1


@dataclass
class TripleGroup:
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    source_id: str = ""
    frame_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.f1.shape == self.f2.shape == self.f3.shape):
            raise ShapeError(
                f"triple frames differ in size: {self.f1.shape}, {self.f2.shape}, {self.f3.shape}"
            )

    @property
    def frames(self):
        return (self.f1, self.f2, self.f3)


# synthetic scenes

class BlobTexture:
    """Smooth random colour texture defined on the continuous plane.

    A sum of isotropic Gaussian blobs over a base colour, so that rendering at
    any sub-pixel offset is exact.
    """

    def __init__(self, rng, extent, density=1 / 14, sigma=(1.2, 3.5), amplitude=0.6):
        (y0, y1), (x0, x1) = extent
        n = max(1, int((y1 - y0) * (x1 - x0) * density))
        self.cy = rng.uniform(y0, y1, n)
        self.cx = rng.uniform(x0, x1, n)
        self.sigma = rng.uniform(*sigma, n)
        self.amp = rng.uniform(-amplitude, amplitude, (n, 3))
        self.base = rng.uniform(0.3, 0.7, 3)

    def __call__(self, ys, xs):
        """Evaluate at coordinate grids ``ys``/``xs`` of shape (H, W) -> (3, H, W)."""
        out = np.broadcast_to(self.base[:, None, None], (3,) + ys.shape).copy()
        for cy, cx, s, a in zip(self.cy, self.cx, self.sigma, self.amp):
            g = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))
            out += a[:, None, None] * g
        return out


@dataclass
class Occluder:
    """Textured rectangle at (top, left) in frame 1 moving by ``shift`` (dx, dy) to frame 3."""

    top: float
    left: float
    height: float
    width: float
    shift: tuple = (0, 0)


@dataclass
class MotionSpec:
    height: int = 48
    width: int = 48
    shift: tuple = (0, 0)  # background (dx, dy) from the first to the last frame of a triple
    triples: int = 1
    max_shift: float = 8.0
    brightness_ramp: float = 0.0
    occluder: Occluder | None = None
    texture_density: float = 1 / 14


def _check_motion(spec, d, what):
    mag = math.hypot(*d)
    if mag > spec.max_shift:
        raise ConfigError(f"{what} shift {tuple(d)} exceeds max shift {spec.max_shift}")
    if abs(d[0]) * (spec.triples + 1) / 2 >= spec.width or abs(d[1]) * (spec.triples + 1) / 2 >= spec.height:
        raise ConfigError(f"{what} shift {tuple(d)} exceeds the {spec.width}x{spec.height} frame")


def generate_synthetic_sequence(spec, seed):
    """Render a clip and return its consecutive triple groups.

    Clip frame ``j`` is the scene at time ``j / 2`` (in units of one triple's
    outer-frame motion), so every triple's middle frame is the exact midpoint
    render. ``meta`` holds per-frame layer labels and the middle frame's
    per-pixel motion.
    """
    _check_motion(spec, spec.shift, "background")
    if spec.occluder is not None:
        _check_motion(spec, spec.occluder.shift, "occluder")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    reach = spec.max_shift * (spec.triples + 1) / 2 + 8
    extent = ((-reach, h + reach), (-reach, w + reach))
    bg = BlobTexture(rng, extent, spec.texture_density)
    fg = BlobTexture(rng, extent, spec.texture_density) if spec.occluder is not None else None
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    def render(t):
        dx, dy = spec.shift
        img = bg(ys - t * dy, xs - t * dx) + spec.brightness_ramp * t
        labels = np.zeros((h, w), np.int8)
        occ = spec.occluder
        if occ is not None:
            odx, ody = occ.shift
            top, left = occ.top + t * ody, occ.left + t * odx
            mask = (ys >= top) & (ys < top + occ.height) & (xs >= left) & (xs < left + occ.width)
            img = np.where(mask[None], fg(ys - t * ody, xs - t * odx), img)
            labels[mask] = 1
        return np.clip(img, 0.0, 1.0).astype(np.float32), labels

    rendered = [render(j / 2) for j in range(spec.triples + 2)]
    triples = []
    for i in range(spec.triples):
        (f1, l1), (f2, l2), (f3, l3) = rendered[i:i + 3]
        motion = np.zeros((2, h, w), np.float32)
        motion[0], motion[1] = spec.shift
        if spec.occluder is not None:
            motion[0][l2 == 1], motion[1][l2 == 1] = spec.occluder.shift
        meta = {"labels": (l1, l2, l3), "motion": motion,
                "layer_shifts": [tuple(spec.shift)] + ([tuple(spec.occluder.shift)] if spec.occluder else [])}
        triples.append(TripleGroup(f1, f2, f3, f"synthetic-{seed}", i, meta))
    return triples


def visibility(triple):
    """Masks over the middle frame: whether each pixel's scene point is visible in f1 / f3."""
    l1, l2, l3 = triple.meta["labels"]
    shifts = triple.meta["layer_shifts"]
    h, w = l2.shape
    ys, xs = np.mgrid[0:h, 0:w]
    vis1 = np.zeros((h, w), bool)
    vis3 = np.zeros((h, w), bool)
    for layer, (dx, dy) in enumerate(shifts):
        sel = l2 == layer
        for sign, labels, vis in ((-1, l1, vis1), (1, l3, vis3)):
            py = np.rint(ys + sign * dy / 2).astype(int)
            px = np.rint(xs + sign * dx / 2).astype(int)
            inside = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            hit = np.zeros((h, w), bool)
            hit[inside] = labels[py[inside], px[inside]] == layer
            vis |= sel & hit
    return vis1, vis3


def load_clip_triples(directory):
    """Consecutive triple groups from a directory of numbered PNG frames."""
    paths = numbered_frames(directory)
    frames = [load_frame(p) for p in paths]
    return [TripleGroup(*frames[i:i + 3], source_id=Path(directory).name, frame_index=i)
            for i in range(len(frames) - 2)]


def dense_records(triple, patch_size, stride=1):
    """Every ``stride``-th stored-size window of a zero-padded triple, as (3, 3, s, s) views.

    Centres cover the whole frame, so border pixels are seen with the same
    zero padding that inference applies.
    """
    if patch_size % 2 == 0:
        raise ConfigError(f"stored patch size must be odd, got {patch_size}")
    half = patch_size // 2
    _, h, w = triple.f1.shape
    frames = np.pad(np.stack(triple.frames), ((0, 0), (0, 0), (half, half), (half, half)))
    return [frames[:, :, y:y + patch_size, x:x + patch_size]
            for y in range(0, h, stride) for x in range(0, w, stride)]


# scoring

def grayscale(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


@dataclass
class FlowField:
    points: np.ndarray  # (n, 2) as (y, x)
    flow: np.ndarray  # (n, 2) as (dx, dy)
    mean_magnitude: float


def block_matching_flow(f1, f3, grid_step=4, window=8, block=7):
    """Integer motion from ``f1`` to ``f3`` at grid points by exhaustive SAD search.

    ``flow`` at point p is the displacement d minimizing the SAD between the
    block of ``f1`` around p and the block of ``f3`` around p + d. Ties go to
    the smallest |d|, then to row-major (dy, dx) order.
    """
    if window < 1 or block % 2 == 0:
        raise ConfigError(f"need window >= 1 and odd block, got window={window} block={block}")
    if f1.shape != f3.shape:
        raise ShapeError(f"frame dims differ: {list(f1.shape)} vs {list(f3.shape)}")
    g1, g3 = grayscale(f1).astype(np.float64), grayscale(f3).astype(np.float64)
    h, w = g1.shape
    if h < block + 2 * window or w < block + 2 * window:
        raise ConfigError(f"frame {w}x{h} smaller than block {block} + 2 * window {window}")
    half = block // 2
    margin = half + window
    gy = np.arange(margin, h - margin, grid_step)
    gx = np.arange(margin, w - margin, grid_step)
    py, px = np.meshgrid(gy, gx, indexing="ij")
    py, px = py.ravel(), px.ravel()
    cands = sorted(
        ((dy, dx) for dy in range(-window, window + 1) for dx in range(-window, window + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]),
    )
    offs = np.arange(-half, half + 1)
    by = py[:, None, None] + offs[None, :, None]
    bx = px[:, None, None] + offs[None, None, :]
    ref = g1[by, bx]
    sad = np.empty((len(cands), len(py)))
    for i, (dy, dx) in enumerate(cands):
        sad[i] = np.abs(ref - g3[by + dy, bx + dx]).sum(axis=(1, 2))
    best = np.argmin(sad, axis=0)  # first minimum in candidate order
    disp = np.array(cands)[best]
    flow = np.stack([disp[:, 1], disp[:, 0]], axis=1).astype(np.float64)
    mean = float(np.hypot(flow[:, 0], flow[:, 1]).mean()) if len(flow) else 0.0
    return FlowField(np.stack([py, px], axis=1), flow, mean)


def patch_entropy(patch):
    """Shannon entropy (bits) of the 8-bit grayscale histogram."""
    levels = np.clip(np.rint(grayscale(patch) * 255), 0, 255).astype(np.int64)
    counts = np.bincount(levels.ravel(), minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def histogram_distance(pa, pb, bins=SHOT_BINS):
    """Sum over channels of the L1 distance between normalized colour histograms."""
    if pa.shape != pb.shape:
        raise ShapeError(f"patch dims differ: {list(pa.shape)} vs {list(pb.shape)}")
    total = 0.0
    for c in range(pa.shape[0]):
        ha = np.histogram(pa[c], bins=bins, range=(0.0, 1.0))[0] / pa[c].size
        hb = np.histogram(pb[c], bins=bins, range=(0.0, 1.0))[0] / pb[c].size
        total += np.abs(ha - hb).sum()
    return float(total)


def shot_boundary(pa, pb, threshold=SHOT_THRESHOLD):
    return histogram_distance(pa, pb) > threshold


def weighted_sample(magnitudes, n, seed, eps=WEIGHT_EPSILON):
    """Indices drawn without replacement with probability proportional to magnitude + eps.

    Uses exponential keys ``log(u) / w`` (Efraimidis-Spirakis), which matches
    sequential weighted draws; indices come back in draw order.
    """
    mags = np.asarray(magnitudes, dtype=np.float64)
    if n > len(mags):
        raise ValueError(f"cannot sample {n} of {len(mags)} candidates")
    weights = mags + eps
    u = np.random.default_rng(seed).random(len(mags))
    keys = np.log(u) / weights
    return [int(i) for i in np.argsort(-keys, kind="stable")[:n]]


# dataset construction

@dataclass
class DatasetParams:
    n_weighted: int = 2000
    n_final: int = 1000
    patch_size: int = 29
    candidates_per_group: int = 1
    shot_threshold: float = SHOT_THRESHOLD
    flow_grid_step: int = 4
    flow_window: int = 8
    flow_block: int = 7
    weight_epsilon: float = WEIGHT_EPSILON


@dataclass
class SampleRecord:
    patches: np.ndarray  # (3 frames, 3 channels, s, s)
    center: tuple = (0, 0)
    flow_magnitude: float = 0.0
    entropy: float = 0.0
    source: str = ""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    flow_magnitude: float
    entropy: float


@dataclass
class DatasetManifest:
    entries: list
    root: Path | None = field(default=None, compare=False)
    params: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.entries)

    def load_record(self, i):
        e = self.entries[i]
        with open(self.root / e.path, "rb") as fh:
            patches = read_tensor(fh)
        return SampleRecord(patches, flow_magnitude=e.flow_magnitude, entropy=e.entropy, source=e.path)

    def load_records(self):
        return [self.load_record(i) for i in range(len(self))]


def extract_candidates(triples, params, seed):
    """Random-centre patch groups, with per-stage counts. Yields SampleRecords."""
    rng = np.random.default_rng(seed)
    s = params.patch_size
    stats = {"groups": len(triples), "candidates": 0, "shot_boundary": 0}
    out = []
    for t in triples:
        h, w = t.f1.shape[1:]
        if h < s or w < s:
            raise ConfigError(f"frames {w}x{h} smaller than sample patch size {s}")
        for _ in range(params.candidates_per_group):
            y = int(rng.integers(0, h - s + 1))
            x = int(rng.integers(0, w - s + 1))
            patches = np.stack([f[:, y:y + s, x:x + s] for f in t.frames]).astype(np.float32)
            stats["candidates"] += 1
            if (shot_boundary(patches[0], patches[1], params.shot_threshold)
                    or shot_boundary(patches[1], patches[2], params.shot_threshold)):
                stats["shot_boundary"] += 1
                continue
            flow = block_matching_flow(patches[0], patches[2], params.flow_grid_step,
                                       params.flow_window, params.flow_block)
            entropy = float(np.mean([patch_entropy(p) for p in patches]))
            out.append(SampleRecord(patches, (y + s // 2, x + s // 2), flow.mean_magnitude,
                                    entropy, f"{t.source_id}:{t.frame_index}"))
    return out, stats


def select_samples(candidates, params, seed):
    """Motion-weighted sampling followed by top-entropy selection.

    Returns the indices of the kept candidates in source order.
    """
    if params.n_final > params.n_weighted:
        raise ConfigError(f"n_final {params.n_final} exceeds n_weighted {params.n_weighted}")
    if len(candidates) < params.n_weighted:
        raise DatasetError(
            f"only {len(candidates)} candidates survive shot-boundary rejection, "
            f"{params.n_weighted} needed for weighted sampling"
        )
    picked = weighted_sample([c.flow_magnitude for c in candidates], params.n_weighted,
                             seed, params.weight_epsilon)
    picked = sorted(picked)
    by_entropy = sorted(picked, key=lambda i: (-candidates[i].entropy, i))
    return sorted(by_entropy[:params.n_final])


def build_dataset(triples, out_dir, params=None, seed=0):
    """Curate samples from ``triples`` into ``out_dir`` and write its manifest."""
    params = params or DatasetParams()
    rng = np.random.default_rng(seed)
    extract_seed, sample_seed = (int(v) for v in rng.integers(0, 2 ** 31, 2))
    candidates, stats = extract_candidates(triples, params, extract_seed)
    try:
        keep = select_samples(candidates, params, sample_seed)
    except DatasetError as exc:
        raise DatasetError(f"{exc}; stage counts: {stats}") from None
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for rank, i in enumerate(keep):
        rel = f"samples/{rank:06d}.adt"
        with open(out_dir / rel, "wb") as fh:
            write_tensor(fh, candidates[i].patches)
        entries.append(ManifestEntry(rel, candidates[i].flow_magnitude, candidates[i].entropy))
    stats.update(survivors=len(candidates), selected=len(entries))
    manifest = DatasetManifest(entries, out_dir, {**vars(params), "seed": seed, "counts": stats})
    write_manifest(manifest, out_dir / "manifest.txt")
    with open(out_dir / "params.json", "w") as fh:
        json.dump(manifest.params, fh, indent=2, sort_keys=True)
    return manifest


def write_manifest(manifest, path):
    lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION} {len(manifest.entries)}"]
    for e in manifest.entries:
        if not e.path or any(ch.isspace() for ch in e.path):
            raise ValueError(f"manifest paths may not contain whitespace: {e.path!r}")
        lines.append(f"{e.path} {e.flow_magnitude!r} {e.entropy!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestParseError(1, "empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != MANIFEST_MAGIC:
        raise ManifestParseError(1, f"expected '{MANIFEST_MAGIC} <version> <count>', got {lines[0]!r}")
    if head[1] != str(MANIFEST_VERSION):
        raise ManifestParseError(1, f"unsupported manifest version {head[1]}")
    try:
        count = int(head[2])
    except ValueError:
        raise ManifestParseError(1, f"bad record count {head[2]!r}") from None
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise ManifestParseError(lineno, f"expected 3 fields, got {len(parts)}")
        try:
            flow, ent = float(parts[1]), float(parts[2])
        except ValueError:
            raise ManifestParseError(lineno, f"non-numeric field in {line!r}") from None
        entries.append(ManifestEntry(parts[0], flow, ent))
    if count != len(entries):
        raise ManifestParseError(1, f"header declares {count} records, found {len(entries)}")
    return DatasetManifest(entries, path.parent)


# augmentation

@dataclass
class TrainingSample:
    r1: np.ndarray  # (3, R, R)
    r2: np.ndarray
    p1: np.ndarray  # (3, k + 2, k + 2)
    p2: np.ndarray
    color: np.ndarray  # (3,)
    gradients: np.ndarray  # (8, 3)


def _cut(window, config):
    r, k = config.receptive_field, config.patch_size
    m = (r + 1) // 2  # centre index of the (R + 2) window
    half = (k - 1) // 2
    rec = window[:, :, 1:1 + r, 1:1 + r]
    pat = window[:, :, m - half - 1:m + half + 2, m - half - 1:m + half + 2]
    truth = ground_truth(window[1, :, m - 1:m + 2, m - 1:m + 2])
    return TrainingSample(rec[0].copy(), rec[2].copy(), pat[0].copy(), pat[2].copy(),
                          truth.color, truth.gradients)


def augment_sample(patches, config, rng, augment=True):
    """Crop an (R + 2) window from a stored patch group and emit a TrainingSample.

    With ``augment`` the crop is random, each axis flips with probability 0.5
    and the outer frames swap with probability 0.5; otherwise the crop is
    centred and nothing else changes.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    s = patches.shape[-1]
    c = config.receptive_field + 2
    if s < c or patches.shape[-2] != s:
        raise ShapeError(f"stored patch {s}x{s} smaller than crop size {c}")
    if augment:
        oy, ox = (int(v) for v in rng.integers(0, s - c + 1, 2))
        hflip, vflip, swap = (bool(v) for v in rng.random(3) < 0.5)
    else:
        oy = ox = (s - c) // 2
        hflip = vflip = swap = False
    window = patches[:, :, oy:oy + c, ox:ox + c]
    if hflip:
        window = window[..., ::-1]
    if vflip:
        window = window[..., ::-1, :]
    if swap:
        window = window[::-1]
    return _cut(window, config)


def flip_sample(sample, horizontal=False, vertical=False):
    """Flip every patch of a sample and permute its neighbour gradients to match."""
    def f(a):
        if horizontal:
            a = a[..., ::-1]
        if vertical:
            a = a[..., ::-1, :]
        return a.copy()

    perm = flip_direction_index(horizontal, vertical)
    grads = np.empty_like(sample.gradients)
    grads[perm] = sample.gradients
    return TrainingSample(f(sample.r1), f(sample.r2), f(sample.p1), f(sample.p2),
                          sample.color.copy(), grads)


def swap_sample(sample):
    return TrainingSample(sample.r2.copy(), sample.r1.copy(), sample.p2.copy(), sample.p1.copy(),
                          sample.color.copy(), sample.gradients.copy())


def stack_samples(samples):
    """Batch arrays (x, p1, p2, color, gradients) for the network and loss."""
    x = np.stack([np.concatenate([s.r1, s.r2]) for s in samples])
    return (x, np.stack([s.p1 for s in samples]), np.stack([s.p2 for s in samples]),
            np.stack([s.color for s in samples]), np.stack([s.gradients for s in samples]))
