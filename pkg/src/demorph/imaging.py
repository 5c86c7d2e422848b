"""Images, procedural identities, morphs and the shared-pool dataset split.

Images are ``float64`` numpy arrays of shape ``(3, H, W)`` with values in
``[0, 1]``.  Everything here is a pure function of its seeds.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError, SplitError

CHANNELS = 3
DEFAULT_RESOLUTION = 64
MAX_JITTER = 0.05

# Marks are blemishes, accessories and background clutter: small blobs that
# give each identity a distinctive layout at the scale of the matcher's grid.
N_MARKS = 40

# Layout of the appearance vector.  Geometry is in units of the image side,
# with the origin at the image centre.
APPEARANCE_FIELDS = (
    "bg_r", "bg_g", "bg_b", "bg_grad_x", "bg_grad_y",
    "head_x", "head_y", "head_ax", "head_ay",
    "skin_r", "skin_g", "skin_b",
    "hair_r", "hair_g", "hair_b", "hairline", "hair_volume", "hair_part",
    "eye_spacing", "eye_y", "eye_size", "eye_r", "eye_g", "eye_b",
    "brow_tilt", "nose_len",
    "mouth_y", "mouth_width", "mouth_curve", "mouth_r", "mouth_g", "mouth_b",
    "light_x", "light_y",
) + tuple(f"mark{b}_{attr}" for b in range(N_MARKS) for attr in ("x", "y", "size", "tone"))


def check_image(image, resolution=None, square=True):
    """Validate the ImageTensor invariants, returning the array as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != CHANNELS or (square and arr.shape[1] != arr.shape[2]):
        raise DimensionError(f"expected a (3, N, N) image, got shape {arr.shape}")
    if resolution is not None and arr.shape[1] != resolution:
        raise DimensionError(f"expected resolution {resolution}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return arr


def _check_resolution(resolution):
    if not isinstance(resolution, (int, np.integer)) or resolution < 16 or resolution % 16:
        raise ConfigError(f"resolution must be >= 16 and divisible by 16, got {resolution!r}")


@dataclass(frozen=True)
class IdentityParams:
    seed: int
    appearance: tuple = field(repr=False)

    @classmethod
    def from_seed(cls, seed):
        rng = np.random.default_rng([int(seed), 0x1DE])
        u = rng.uniform
        skin = u(0.4, 0.65)
        bg = skin + u(-0.06, 0.06)
        tint = u(-0.1, 0.1, size=3)
        skin_tint = u(-0.12, 0.12, size=3)
        hair = skin + u(-0.12, 0.12, size=3)
        values = {
            "bg_r": bg + tint[0], "bg_g": bg + tint[1], "bg_b": bg + tint[2],
            "bg_grad_x": u(-0.1, 0.1), "bg_grad_y": u(-0.1, 0.1),
            "head_x": u(-0.12, 0.12), "head_y": u(-0.1, 0.1),
            "head_ax": u(0.2, 0.34), "head_ay": u(0.26, 0.4),
            "skin_r": skin + skin_tint[0], "skin_g": skin + skin_tint[1],
            "skin_b": skin + skin_tint[2],
            "hair_r": hair[0], "hair_g": hair[1], "hair_b": hair[2],
            "hairline": u(-0.9, 0.1), "hair_volume": u(0.0, 0.12),
            "hair_part": u(-0.6, 0.6),
            "eye_spacing": u(0.18, 0.42), "eye_y": u(-0.35, -0.05),
            "eye_size": u(0.08, 0.16),
            "eye_r": u(0.0, 1.0), "eye_g": u(0.0, 1.0), "eye_b": u(0.0, 1.0),
            "brow_tilt": u(-0.2, 0.2), "nose_len": u(0.1, 0.35),
            "mouth_y": u(0.3, 0.6), "mouth_width": u(0.25, 0.6),
            "mouth_curve": u(-0.25, 0.25),
            "mouth_r": u(0.0, 1.0), "mouth_g": u(0.0, 1.0), "mouth_b": u(0.0, 1.0),
            "light_x": u(-0.3, 0.3), "light_y": u(-0.3, 0.3),
        }
        for b in range(N_MARKS):
            values[f"mark{b}_x"] = u(-0.5, 0.5)
            values[f"mark{b}_y"] = u(-0.5, 0.5)
            values[f"mark{b}_size"] = u(0.035, 0.065)
            values[f"mark{b}_tone"] = u(0.0, 1.0)
        vec = tuple(float(np.clip(values[name], 0.0, 1.0)) if name.endswith(("_r", "_g", "_b"))
                    else float(values[name]) for name in APPEARANCE_FIELDS)
        return cls(int(seed), vec)

    def __getitem__(self, name):
        return self.appearance[APPEARANCE_FIELDS.index(name)]

    def rgb(self, prefix):
        return np.array([self[prefix + "_r"], self[prefix + "_g"], self[prefix + "_b"]])


def _soft(signed_distance, width):
    # smooth step from 1 (inside, negative distance) to 0 (outside)
    return 0.5 * (1.0 - np.tanh(signed_distance / width))


def _paint(canvas, mask, color):
    canvas *= 1.0 - mask
    canvas += mask * color[:, None, None]


def _low_frequency_field(rng, yy, xx, terms=4):
    out = np.zeros_like(xx)
    for _ in range(terms):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        out += np.cos(math.pi * (fx * xx + fy * yy) + phase)
    return out / terms


def render_bonafide(identity, variation_seed=0, resolution=DEFAULT_RESOLUTION):
    """Draw the procedural face for ``identity``.

    Variation 0 is the canonical render.  Other variations add a smooth
    intensity field and a global brightness shift whose combined amplitude
    never exceeds ``MAX_JITTER`` per pixel; geometry is untouched.
    """
    _check_resolution(resolution)
    if not isinstance(identity, IdentityParams):
        identity = IdentityParams.from_seed(identity)
    p = identity
    n = resolution
    # pixel centres in [-0.5, 0.5]
    coords = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    edge = 1.0 / n

    img = np.empty((CHANNELS, n, n))
    bg = p.rgb("bg")
    ramp = 1.0 + p["bg_grad_x"] * xx + p["bg_grad_y"] * yy
    img[:] = bg[:, None, None] * ramp[None]

    hx, hy, ax, ay = p["head_x"], p["head_y"], p["head_ax"], p["head_ay"]
    # normalised head-frame coordinates: the head ellipse is the unit disc
    u = (xx - hx) / ax
    v = (yy - hy) / ay
    radius = np.sqrt(u * u + v * v)
    scale = min(ax, ay)

    above_hairline = _soft((v - p["hairline"] - 0.15 * np.abs(u - p["hair_part"])) * scale, edge)
    hair = _soft((radius - 1.0 - p["hair_volume"] / scale) * scale, edge) * above_hairline
    _paint(img, hair, p.rgb("hair"))

    face = _soft((radius - 1.0) * scale, edge) * (1.0 - above_hairline)
    shade = 1.0 + 0.35 * (p["light_x"] * u + p["light_y"] * v)
    img = img * (1.0 - face) + face * (p.rgb("skin")[:, None, None] * shade[None])

    for side in (-1.0, 1.0):
        ex, ey = side * p["eye_spacing"], p["eye_y"]
        er = p["eye_size"]
        white = _soft((np.hypot((u - ex) / 1.6, v - ey) - er) * scale, edge)
        _paint(img, white, np.clip(p.rgb("skin") + 0.2, 0.0, 1.0))
        iris = _soft((np.hypot(u - ex, v - ey) - 0.6 * er) * scale, edge)
        _paint(img, iris, p.rgb("eye"))
        by = ey - 1.8 * er + side * p["brow_tilt"] * (u - ex)
        brow = _soft((np.abs(v - by) - 0.035) * scale, edge) * _soft((np.abs(u - ex) - 1.8 * er) * scale, edge)
        _paint(img, brow, 0.5 * p.rgb("hair"))

    nose = _soft((np.abs(u) - 0.05) * scale, edge)
    nose *= _soft((np.abs(v - (p["eye_y"] + 0.1 + p["nose_len"] / 2)) - p["nose_len"] / 2) * scale, edge)
    _paint(img, nose, 0.75 * p.rgb("skin"))

    mouth_center = p["mouth_y"] + p["mouth_curve"] * (u / max(p["mouth_width"], 1e-3)) ** 2
    mouth = _soft((np.abs(v - mouth_center) - 0.06) * scale, edge)
    mouth *= _soft((np.abs(u) - p["mouth_width"]) * scale, edge)
    _paint(img, mouth, p.rgb("mouth"))

    for b in range(N_MARKS):
        mx, my = p[f"mark{b}_x"], p[f"mark{b}_y"]
        mark = _soft(np.hypot(xx - mx, yy - my) - p[f"mark{b}_size"], edge)
        tone = p[f"mark{b}_tone"]
        _paint(img, mark, np.array([0.05 + 0.95 * tone, 0.05 + 0.85 * tone, 0.05 + 0.7 * tone]))

    if variation_seed:
        rng = np.random.default_rng([p.seed, int(variation_seed), 0x7A8])
        shift = rng.uniform(-0.01, 0.01)
        smooth = _low_frequency_field(rng, yy, xx)
        img = img + shift + 0.035 * smooth[None]
    img = np.clip(img, 0.0, 1.0)
    if variation_seed:
        canonical = render_bonafide(identity, 0, resolution)
        img = np.clip(img, canonical - MAX_JITTER, canonical + MAX_JITTER)
    return img


def make_morph(b1, b2, alpha):
    """Pixel-wise convex blend ``alpha * b1 + (1 - alpha) * b2``.

    Symmetric under ``(b1, b2, alpha) -> (b2, b1, 1 - alpha)`` bit for bit.
    """
    a = np.asarray(b1, dtype=np.float64)
    b = np.asarray(b2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"bonafide shapes differ: {a.shape} vs {b.shape}")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    # Interpolate from the operand with the larger weight.  For alpha >= 0.5,
    # 1 - alpha is exact, so the swapped call evaluates the same expression.
    if alpha == 0.5:
        out = 0.5 * (a + b)
    elif alpha < 0.5:
        out = b + alpha * (a - b)
    else:
        out = a + (1.0 - alpha) * (b - a)
    return np.clip(out, 0.0, 1.0)


@dataclass
class MorphSample:
    morph: np.ndarray = field(repr=False)
    bonafide1: np.ndarray = field(repr=False)
    bonafide2: np.ndarray = field(repr=False)
    identity1: int
    identity2: int
    alpha: float = 0.5

    def __post_init__(self):
        if self.identity1 == self.identity2:
            raise DataError(f"morph needs two distinct identities, got {self.identity1} twice")

    @property
    def pair(self):
        return frozenset((self.identity1, self.identity2))


@dataclass
class DatasetSplit:
    train: list
    test: list
    bonafide_pool: frozenset

    def check(self):
        train_pairs = {s.pair for s in self.train}
        test_pairs = {s.pair for s in self.test}
        overlap = train_pairs & test_pairs
        if overlap:
            raise SplitError(f"pairs appear on both sides: {sorted(map(sorted, overlap))}")
        missing = {i for s in self.test for i in s.pair} - set(self.bonafide_pool)
        if missing:
            raise SplitError("test identities missing from the training pool", missing)
        return self


def _pool_sharing_violations(train_pairs, all_ids):
    seen = Counter(i for pair in train_pairs for i in pair)
    return {i for i in all_ids if seen[i] == 0}


def build_scenario1_split(samples, train_fraction=0.6, seed=0):
    """Split morphs by identity pair so that every identity still appears in training.

    All morphs of one unordered pair land on the same side.  The number of
    training morphs is ``round(train_fraction * len(samples))``, reached as
    closely as pair granularity allows.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    samples = list(samples)
    if not samples:
        raise DataError("no samples to split")
    by_pair = {}
    for s in samples:
        by_pair.setdefault(s.pair, []).append(s)
    pairs_per_id = Counter(i for pair in by_pair for i in pair)
    lonely = {i for i, c in pairs_per_id.items() if c < 2}
    if lonely:
        raise SplitError(
            f"identities {sorted(lonely)} occur in fewer than 2 morph pairs; "
            "cannot share them between train and test", lonely)

    all_ids = set(pairs_per_id)
    pairs = sorted(by_pair, key=lambda p: tuple(sorted(p)))
    target = round(train_fraction * len(samples))
    rng = np.random.default_rng([int(seed), 0x5917])

    best = None
    for _ in range(200):
        order = [pairs[i] for i in rng.permutation(len(pairs))]
        train_pairs, count = [], 0
        # greedy fill: first cover every identity, then top up to the target
        for pair in order:
            if _pool_sharing_violations(train_pairs, pair) and count < target + len(by_pair[pair]):
                train_pairs.append(pair)
                count += len(by_pair[pair])
        for pair in order:
            if pair in train_pairs:
                continue
            n = len(by_pair[pair])
            if abs(count + n - target) <= abs(count - target):
                train_pairs.append(pair)
                count += n
        test_pairs = [p for p in order if p not in train_pairs]
        if not test_pairs or _pool_sharing_violations(train_pairs, all_ids):
            continue
        score = abs(count - target)
        if best is None or score < best[0]:
            best = (score, train_pairs, test_pairs)
        if score == 0:
            break
    if best is None:
        raise SplitError("could not find a split sharing every identity", all_ids)

    _, train_pairs, test_pairs = best
    train_set, test_set = set(train_pairs), set(test_pairs)
    train = [s for s in samples if s.pair in train_set]
    test = [s for s in samples if s.pair in test_set]
    pool = frozenset(i for p in train_pairs for i in p)
    split = DatasetSplit(train, test, pool)
    split.check()
    return split


def generate_dataset(n_identities, variations_per_identity=1, alphas=(0.5,),
                     resolution=DEFAULT_RESOLUTION, seed=0):
    """Morphs over every unordered identity pair and every alpha.

    Identity labels are ``0..n_identities-1``; the label-to-seed mapping is
    derived from ``seed``.  Each time an identity is used as a bonafide the
    next variation seed in its rotation is taken.
    """
    if n_identities < 2:
        raise ConfigError("need at least two identities")
    if variations_per_identity < 1:
        raise ConfigError("variations_per_identity must be >= 1")
    _check_resolution(resolution)
    identities = identity_seeds(n_identities, seed)
    cache = {}

    def bonafide(label, use):
        key = (label, use % variations_per_identity)
        if key not in cache:
            cache[key] = render_bonafide(identities[label], key[1], resolution)
        return cache[key]

    uses = Counter()
    samples = []
    for i, j in itertools.combinations(range(n_identities), 2):
        for alpha in alphas:
            b1 = bonafide(i, uses[i])
            b2 = bonafide(j, uses[j])
            uses[i] += 1
            uses[j] += 1
            samples.append(MorphSample(make_morph(b1, b2, alpha), b1, b2, i, j, float(alpha)))
    return samples


def identity_seeds(n_identities, seed):
    """Identity generator seeds for labels ``0..n-1`` under a dataset seed."""
    return [IdentityParams.from_seed(int(seed) * 100_003 + label) for label in range(n_identities)]


# -- files ------------------------------------------------------------------

def to_uint8(image):
    arr = check_image(image, square=False)
    # round half up
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def save_png(image, path):
    hwc = np.transpose(to_uint8(image), (1, 2, 0))
    Image.fromarray(hwc, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path, resolution=None):
    """Read an 8-bit image as a ``(3, H, W)`` array in [0, 1].

    Non-square or off-size images are resized bilinearly to ``resolution``.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1)).copy()


MANIFEST_KEYS = ("morph_path", "bonafide1_path", "bonafide2_path", "id1", "id2")


def write_manifest(records, path):
    with open(path, "w") as fh:
        json.dump({"records": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = doc["records"] if isinstance(doc, dict) else doc
    for rec in records:
        absent = [k for k in MANIFEST_KEYS if k not in rec]
        if absent:
            raise DataError(f"manifest record missing fields {absent}")
    return records


def load_manifest_samples(path, resolution=None, split=None):
    """Load MorphSamples from a manifest; relative paths resolve against its directory."""
    path = Path(path)
    samples = []
    for rec in read_manifest(path):
        if split is not None and rec.get("split", split) != split:
            continue
        images = [load_png(path.parent / rec[k], resolution)
                  for k in ("morph_path", "bonafide1_path", "bonafide2_path")]
        samples.append(MorphSample(*images, int(rec["id1"]), int(rec["id2"]),
                                   float(rec.get("alpha", 0.5))))
    return samples
