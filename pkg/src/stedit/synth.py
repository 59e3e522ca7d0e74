"""Deterministic synthetic scene-text dataset generator.

Scenes are small RGB images with 1..n rendered words placed at
non-overlapping locations over a flat or two-tone gradient background. One
word is masked out; the instruction describes what to write back, in one of
four categories (style_free / color_only / font_only / full). Surrounding
words share exactly the style attributes the instruction omits, so a model
can infer them from context.

Everything is a pure function of (seed, config): re-running emit_dataset
with the same arguments yields byte-identical PNGs and manifest.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from . import fonts
from .errors import CapacityError, ContractError, TransformError
from .fonts import Variant

# Desk palette: 12 named colors (XKCD rgb values).
PALETTE = {
    "red": (229, 0, 0),
    "green": (21, 176, 26),
    "blue": (3, 67, 223),
    "black": (0, 0, 0),
    "purple": (126, 30, 156),
    "orange": (249, 115, 6),
    "teal": (2, 147, 134),
    "brown": (101, 55, 0),
    "pink": (255, 129, 192),
    "navy": (1, 21, 62),
    "maroon": (101, 0, 33),
    "grey": (146, 149, 145),
}

CATEGORIES = ("style_free", "color_only", "font_only", "full")

DEFAULT_WORDS = (
    "apple", "bread", "cloud", "drum", "eagle", "frost", "grape",
    "house", "igloo", "juice", "knife", "lemon", "mango", "night",
    "ocean", "piano", "stone", "tiger", "coral", "mount",
)


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 64
    words: tuple = DEFAULT_WORDS
    fonts: tuple = (0, 1, 2, 3)
    colors: tuple = tuple(PALETTE)
    min_instances: int = 1
    max_instances: int = 2
    rotation_range: float = 15.0
    perspective_jitter: float = 0.0015
    scale_range: tuple = (0.65, 0.95)
    variant_prob: float = 0.0
    category_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    max_stretch: float = 1.6
    placement_attempts: int = 200

    def color_rgb(self, name: str) -> tuple:
        return PALETTE[name]


@dataclass
class TextInstance:
    text: str
    font_id: int
    variant: Variant
    color_name: str
    rgb: tuple
    anchor: tuple  # top-left of the warped patch buffer, px
    rotation_deg: float
    homography: list  # 3x3 row-major, patch-frame perspective (incl. scale)
    quad: list  # 4 corner points in image coords
    hull: list  # [x0, y0, x1, y1] integer pixel rect (exclusive max)

    def font_label(self) -> str:
        base = fonts.FONT_NAMES[self.font_id]
        return f"{base}-{self.variant.tag}" if self.variant.tag else base


@dataclass
class SceneSpec:
    height: int
    width: int
    background: dict
    instances: list
    masked_index: int
    seed: int


@dataclass
class Instruction:
    category: str
    text: str
    color: str | None
    font: str | None
    rendered: str


# -- geometry -----------------------------------------------------------------

def _rotation_matrix(deg: float, cx: float, cy: float) -> np.ndarray:
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    t2 = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    return t2 @ r @ t1


def map_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to Nx2 points with projective division."""
    ones = np.ones((pts.shape[0], 1))
    q = (h @ np.hstack([pts, ones]).T).T
    return q[:, :2] / q[:, 2:3]


def apply_homography(patch: np.ndarray, rotation_deg: float,
                     perspective: np.ndarray):
    """Warp a coverage patch by rotation followed by a 3x3 homography.

    Returns (warped patch, quad, origin): quad is the image of the patch
    corners in the combined-transform frame, origin is the (x, y) offset of
    the returned buffer within that frame (so quad - origin indexes into the
    buffer). Inverse-mapped bilinear sampling.
    """
    perspective = np.asarray(perspective, dtype=np.float64)
    if abs(np.linalg.det(perspective)) < 1e-12:
        raise TransformError("singular homography (det ~ 0)")
    h, w = patch.shape
    t = perspective @ _rotation_matrix(rotation_deg, w / 2.0, h / 2.0)
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    quad = map_points(t, corners)
    x0, y0 = np.floor(quad.min(axis=0))
    x1, y1 = np.ceil(quad.max(axis=0))
    ow, oh = int(x1 - x0), int(y1 - y0)
    tinv = np.linalg.inv(t)
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xs.ravel() + x0 + 0.5, ys.ravel() + y0 + 0.5, np.ones(oh * ow)])
    src = tinv @ pts
    sx = src[0] / src[2] - 0.5
    sy = src[1] / src[2] - 0.5
    x_f = np.floor(sx).astype(np.int64)
    y_f = np.floor(sy).astype(np.int64)
    fx = (sx - x_f).astype(np.float32)
    fy = (sy - y_f).astype(np.float32)
    padded = np.zeros((h + 2, w + 2), dtype=np.float32)
    padded[1:-1, 1:-1] = patch
    xc = np.clip(x_f + 1, 0, w)
    yc = np.clip(y_f + 1, 0, h)
    inb = ((sx > -1) & (sx < w) & (sy > -1) & (sy < h)).astype(np.float32)
    v00 = padded[yc, xc]
    v01 = padded[yc, np.clip(xc + 1, 0, w + 1)]
    v10 = padded[np.clip(yc + 1, 0, h + 1), xc]
    v11 = padded[np.clip(yc + 1, 0, h + 1), np.clip(xc + 1, 0, w + 1)]
    out = ((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11))
    out = (out * inb).reshape(oh, ow)
    return out, quad, (float(x0), float(y0))


# -- styles & instructions ------------------------------------------------------

def _sample_style(rng: np.random.Generator, config: SynthConfig):
    font = int(rng.choice(config.fonts))
    if config.variant_prob > 0 and rng.random() < config.variant_prob:
        variant = Variant(*[(True, False), (False, True), (True, True)][int(rng.integers(3))])
    else:
        variant = Variant()
    color = str(rng.choice(config.colors))
    return font, variant, color


def select_styles(rng: np.random.Generator, category: str, n: int,
                  masked_index: int, config: SynthConfig) -> list:
    """Per-instance (font_id, variant, color_name) for one scene.

    Surrounding instances share exactly the masked word's attributes that
    the instruction category leaves unspecified; for 'full' they are free.
    """
    if category not in CATEGORIES:
        raise ContractError(f"unknown instruction category {category!r}")
    styles = [None] * n
    mfont, mvariant, mcolor = _sample_style(rng, config)
    styles[masked_index] = (mfont, mvariant, mcolor)
    for i in range(n):
        if i == masked_index:
            continue
        font, variant, color = _sample_style(rng, config)
        if category == "style_free":
            font, variant, color = mfont, mvariant, mcolor
        elif category == "color_only":  # font must be inferred from surroundings
            font, variant = mfont, mvariant
        elif category == "font_only":  # color must be inferred from surroundings
            color = mcolor
        styles[i] = (font, variant, color)
    return styles


def make_instruction(category: str, text: str, color: str | None = None,
                     font: str | None = None) -> Instruction:
    if category not in CATEGORIES:
        raise ContractError(f"unknown instruction category {category!r}")
    want_color = category in ("color_only", "full")
    want_font = category in ("font_only", "full")
    if want_color != (color is not None) or want_font != (font is not None):
        raise ContractError(
            f"category {category} expects color={'yes' if want_color else 'no'} "
            f"font={'yes' if want_font else 'no'}; got color={color!r} font={font!r}"
        )
    rendered = f'Write "{text}"'
    if category == "full":
        rendered += f" in color: {color} and font: {font}"
    elif category == "color_only":
        rendered += f" in color: {color}"
    elif category == "font_only":
        rendered += f" in font: {font}"
    return Instruction(category, text, color, font, rendered)


# -- scene composition -------------------------------------------------------------

def _sample_background(rng: np.random.Generator, h: int, w: int):
    """Flat or two-tone gradient fill from a low-saturation range."""
    base = rng.uniform(0.55, 0.95, size=3)
    kind = "flat" if rng.random() < 0.4 else "gradient"
    spec = {"kind": kind, "c0": [round(float(v), 4) for v in base]}
    if kind == "flat":
        img = np.broadcast_to(base.astype(np.float32), (h, w, 3)).copy()
    else:
        c1 = np.clip(base + rng.uniform(-0.25, 0.25, size=3), 0.45, 1.0)
        axis = int(rng.integers(2))  # 0: vertical, 1: horizontal
        n = h if axis == 0 else w
        ramp = np.linspace(0.0, 1.0, n, dtype=np.float64)
        shape = (n, 1, 1) if axis == 0 else (1, n, 1)
        img = (base + ramp.reshape(shape) * (c1 - base)).astype(np.float32)
        img = np.broadcast_to(img, (h, w, 3)).copy()
        spec["c1"] = [round(float(v), 4) for v in c1]
        spec["axis"] = axis
    return img, spec


def _hull_of(quad: np.ndarray, anchor_x: float, anchor_y: float) -> list:
    xs = quad[:, 0] + anchor_x
    ys = quad[:, 1] + anchor_y
    return [int(np.floor(xs.min())), int(np.floor(ys.min())),
            int(np.ceil(xs.max())), int(np.ceil(ys.max()))]


def _rects_disjoint(a: list, b: list, gap: int = 1) -> bool:
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def compose_scene(rng: np.random.Generator, config: SynthConfig, category: str,
                  scene_words: list | None = None, seed: int = 0):
    """Build one scene: sampled words, styles, placements; returns
    (SceneSpec, image float32 HxWx3 in [0,1], Instruction)."""
    h, w = config.height, config.width
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    if scene_words is None:
        replace = n > len(config.words)
        scene_words = [str(x) for x in rng.choice(config.words, size=n, replace=replace)]
    else:
        n = len(scene_words)
    masked_index = int(rng.integers(n))
    styles = select_styles(rng, category, n, masked_index, config)
    img, bg_spec = _sample_background(rng, h, w)
    instances: list[TextInstance] = []
    hulls: list[list] = []
    for i in range(n):
        font_id, variant, color_name = styles[i]
        rgb255 = config.color_rgb(color_name)
        atlas = fonts.get_atlas(font_id)
        _, alpha, _ = fonts.render_word(atlas, scene_words[i], rgb255, variant)
        placed = False
        for _ in range(config.placement_attempts):
            scale = float(rng.uniform(*config.scale_range))
            rot = float(rng.uniform(-config.rotation_range, config.rotation_range))
            persp = np.eye(3)
            persp[0, 0] = persp[1, 1] = scale
            persp[2, 0] = float(rng.uniform(-1, 1)) * config.perspective_jitter
            persp[2, 1] = float(rng.uniform(-1, 1)) * config.perspective_jitter
            warped, quad, origin = apply_homography(alpha, rot, persp)
            oh, ow = warped.shape
            if ow >= w or oh >= h:
                continue
            ax = int(rng.integers(0, w - ow))
            ay = int(rng.integers(0, h - oh))
            # anchor is the buffer's top-left; quad is relative to origin
            hull = _hull_of(quad - np.array(origin), ax, ay)
            hull = [max(hull[0], ax), max(hull[1], ay),
                    min(hull[2], ax + ow), min(hull[3], ay + oh)]
            if hull[0] < 0 or hull[1] < 0 or hull[2] > w or hull[3] > h:
                continue
            if all(_rects_disjoint(hull, other) for other in hulls):
                placed = True
                break
        if not placed:
            raise CapacityError(
                f"could not place instance {i} ({scene_words[i]!r}) after "
                f"{config.placement_attempts} attempts; use fewer or shorter words"
            )
        color = np.array(rgb255, dtype=np.float32) / 255.0
        img[ay:ay + oh, ax:ax + ow] = (
            img[ay:ay + oh, ax:ax + ow] * (1 - warped[..., None])
            + color * warped[..., None]
        )
        inst_quad = (quad - np.array(origin) + np.array([ax, ay])).tolist()
        instances.append(TextInstance(
            text=scene_words[i], font_id=font_id, variant=variant,
            color_name=color_name, rgb=tuple(rgb255), anchor=(ax, ay),
            rotation_deg=rot, homography=persp.tolist(), quad=inst_quad,
            hull=hull,
        ))
        hulls.append(hull)
    masked = instances[masked_index]
    kw = {}
    if category in ("color_only", "full"):
        kw["color"] = masked.color_name
    if category in ("font_only", "full"):
        kw["font"] = masked.font_label()
    instruction = make_instruction(category, masked.text, **kw)
    spec = SceneSpec(height=h, width=w, background=bg_spec, instances=instances,
                     masked_index=masked_index, seed=seed)
    return spec, img, instruction


# -- mask augmentation ----------------------------------------------------------

def _rasterize_mask(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    im = Image.new("L", (w, h), 0)
    ImageDraw.Draw(im).polygon([tuple(p) for p in poly], fill=1, outline=1)
    return np.asarray(im, dtype=np.uint8)


def augment_mask(scene: SceneSpec, rng: np.random.Generator,
                 max_stretch: float = 1.6) -> np.ndarray:
    """Binary mask covering the masked instance's hull, stretched along the
    word's direction; never touching any other instance's hull."""
    inst = scene.instances[scene.masked_index]
    h, w = scene.height, scene.width
    x0, y0, x1, y1 = inst.hull
    base = np.zeros((h, w), dtype=np.uint8)
    base[y0:y1, x0:x1] = 1
    others = [o.hull for i, o in enumerate(scene.instances) if i != scene.masked_index]
    s = float(rng.uniform(1.0, max_stretch))
    th = np.deg2rad(inst.rotation_deg)
    d = np.array([np.cos(th), np.sin(th)])
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    for k in range(9):
        sk = 1.0 + (s - 1.0) * (1.0 - k / 8.0)
        m = np.eye(2) + (sk - 1.0) * np.outer(d, d)
        poly = (corners - center) @ m.T + center
        mask = np.maximum(_rasterize_mask(poly, h, w), base)
        if not any(mask[oy0:oy1, ox0:ox1].any() for ox0, oy0, ox1, oy1 in others):
            return mask
    return base


# -- dataset emission --------------------------------------------------------------

def _weighted_category(rng: np.random.Generator, weights) -> str:
    p = np.asarray(weights, dtype=np.float64)
    p = p / p.sum()
    return CATEGORIES[int(rng.choice(len(CATEGORIES), p=p))]


def scene_to_record(spec: SceneSpec, instruction: Instruction) -> dict:
    masked = spec.instances[spec.masked_index]
    return {
        "target_text": masked.text,
        "instruction": {
            "category": instruction.category,
            "text": instruction.text,
            **({"color": instruction.color} if instruction.color else {}),
            **({"font": instruction.font} if instruction.font else {}),
            "rendered": instruction.rendered,
        },
        "masked_bbox": masked.hull,
        "instances": [
            {
                "text": t.text,
                "font": t.font_label(),
                "variant": t.variant.tag,
                "color": t.color_name,
                "bbox": t.hull,
            }
            for t in spec.instances
        ],
        "seed": spec.seed,
    }


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_example(global_seed: int, index: int, config: SynthConfig):
    """One training example, independently reproducible from (seed, index).

    Returns (record dict, gt uint8 HxWx3, mask uint8 HxW in {0,1})."""
    last_err = None
    for attempt in range(10):
        rng = np.random.default_rng([global_seed, index, attempt])
        category = _weighted_category(rng, config.category_weights)
        # crowded draws can be impossible to place; later retries back off
        # to the minimum instance count rather than fail the whole example
        cfg = config if attempt < 5 else dataclasses.replace(
            config, max_instances=config.min_instances)
        try:
            spec, img, instruction = compose_scene(rng, cfg, category, seed=global_seed)
            mask = augment_mask(spec, rng, config.max_stretch)
            record = scene_to_record(spec, instruction)
            record["id"] = index
            return record, to_uint8(img), mask
        except CapacityError as err:
            last_err = err
    raise CapacityError(f"example {index}: {last_err}")


def emit_dataset(config: SynthConfig, out_dir: str, num: int, seed: int) -> str:
    """Write ground-truth PNGs, mask PNGs, masked PNGs and manifest.jsonl.

    Returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    masked_dir = os.path.join(out_dir, "masked")
    for d in (img_dir, mask_dir, masked_dir):
        os.makedirs(d, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for i in range(num):
            record, img, mask = generate_example(seed, i, config)
            stem = f"{i:06d}.png"
            Image.fromarray(img).save(os.path.join(img_dir, stem))
            Image.fromarray(mask * 255).save(os.path.join(mask_dir, stem))
            masked_img = img * (1 - mask[..., None])
            Image.fromarray(masked_img.astype(np.uint8)).save(os.path.join(masked_dir, stem))
            record["image"] = f"images/{stem}"
            record["mask"] = f"masks/{stem}"
            record["masked_image"] = f"masked/{stem}"
            ordered = {"id": record["id"], "image": record["image"],
                       "mask": record["mask"], "masked_image": record["masked_image"]}
            ordered.update({k: v for k, v in record.items() if k not in ordered})
            fh.write(json.dumps(ordered) + "\n")
    return manifest_path


def load_manifest(manifest_path: str) -> list:
    with open(manifest_path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_example_images(manifest_path: str, record: dict):
    """(gt uint8 HxWx3, mask uint8 HxW in {0,1}) for a manifest record."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    img = np.asarray(Image.open(os.path.join(base, record["image"])).convert("RGB"))
    mask = (np.asarray(Image.open(os.path.join(base, record["mask"])).convert("L")) > 127)
    return img, mask.astype(np.uint8)


def config_to_dict(config: SynthConfig) -> dict:
    d = dataclasses.asdict(config)
    d["scale_range"] = list(d["scale_range"])
    return d


def config_from_dict(d: dict) -> SynthConfig:
    from .errors import ConfigError

    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
    kw = dict(d)
    for k in ("words", "fonts", "colors", "category_weights"):
        if k in kw:
            kw[k] = tuple(kw[k])
    if "scale_range" in kw:
        kw["scale_range"] = tuple(kw["scale_range"])
    return SynthConfig(**kw)
