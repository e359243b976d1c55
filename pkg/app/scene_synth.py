"""Synthetic source/target segmentation scenes with a controllable domain shift."""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Set, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from app.data.data import categories_data
from app.exceptions import CaptionDAError, CaptionError, GenerationError
from app.schemas import DomainShift, LayoutRule, Manifest, ManifestEntry, SceneSpec

logger = logging.getLogger(__name__)

Domain = Literal["source", "target"]
MASK_FILE_IGNORE = 255
DEFAULT_GROUP = "target"


@dataclass
class SegSample:
    image: np.ndarray
    mask: Optional[np.ndarray]
    id: str
    domain: Domain = "source"
    group: Optional[str] = None

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class SceneDataset:
    spec: SceneSpec
    source: List[SegSample]
    target: List[SegSample]
    target_masks: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def class_set(self) -> List[str]:
        return self.spec.class_set

    def source_by_id(self) -> Dict[str, SegSample]:
        return {s.id: s for s in self.source}


def _to_pixels(fraction: float, extent: int) -> int:
    return int(math.floor(fraction * extent + 0.5))


def palette_for(class_set: List[str]) -> np.ndarray:
    known = {c["name"]: c["color"] for c in categories_data}
    colors = []
    for idx, name in enumerate(class_set):
        if name in known:
            colors.append(known[name])
        else:
            hue = (idx * 0.618033988749895) % 1.0
            colors.append(tuple(hsv_to_rgb([hue, 0.8, 0.9])))
    return np.asarray(colors, dtype=np.float64)


def _rows_of(mask: np.ndarray, class_id: int) -> np.ndarray:
    return np.flatnonzero((mask == class_id).any(axis=1))


def _touches(region: np.ndarray, other: np.ndarray) -> bool:
    """True when some pixel of ``region`` has a 4-neighbour in ``other``."""
    return bool(
        (region[1:, :] & other[:-1, :]).any() or (region[:-1, :] & other[1:, :]).any()
        or (region[:, 1:] & other[:, :-1]).any() or (region[:, :-1] & other[:, 1:]).any()
    )


def _paint_rule(mask: np.ndarray, rule: LayoutRule, spec: SceneSpec, rng: np.random.Generator):
    height, width = mask.shape
    cls = spec.class_set.index(rule.cls)

    if rule.kind == "band":
        reach = _to_pixels(rule.jitter, height)
        offset = int(rng.integers(-reach, reach + 1)) if reach else 0
        top = min(max(_to_pixels(rule.start, height) + offset, 0), height)
        bottom = min(max(_to_pixels(rule.stop, height) + offset, 0), height)
        if top >= bottom:
            raise GenerationError(rule.name, f"band collapses to rows [{top}, {bottom})")
        mask[top:bottom, :] = cls
        return

    anchor = spec.class_set.index(rule.anchor)
    rows = _rows_of(mask, anchor)
    if rows.size == 0:
        raise GenerationError(rule.name, f"anchor class '{rule.anchor}' is absent from the layout")

    if rule.kind == "band_above":
        thickness = max(1, _to_pixels(rule.extent, height))
        top = int(rows.min()) - thickness
        if top < 0:
            raise GenerationError(rule.name, f"no room for {thickness} rows above '{rule.anchor}'")
        mask[top:top + thickness, :] = cls
        return

    blob_h = max(1, _to_pixels(rule.size[0], height))
    blob_w = max(1, _to_pixels(rule.size[1], width))
    first, last = int(rows.min()), int(rows.max())
    if last - first + 1 < blob_h:
        raise GenerationError(rule.name, f"'{rule.anchor}' spans {last - first + 1} rows, blob needs {blob_h}")
    if blob_w >= width:
        raise GenerationError(rule.name, "blob is as wide as the scene")
    for _ in range(rule.count):
        r = int(rng.integers(first, last - blob_h + 2))
        c = int(rng.integers(0, width - blob_w + 1))
        painted = np.zeros_like(mask, dtype=bool)
        painted[r:r + blob_h, c:c + blob_w] = mask[r:r + blob_h, c:c + blob_w] == anchor
        if not painted.any():
            raise GenerationError(rule.name, f"blob at row {r}, column {c} misses '{rule.anchor}'")
        mask[painted] = cls
        if not _touches(painted, mask == anchor):
            raise GenerationError(rule.name, f"blob at row {r}, column {c} does not touch '{rule.anchor}'")


def paint_layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    mask = np.full((spec.height, spec.width), spec.background_id, dtype=np.int64)
    for rule in spec.layout_rules:
        _paint_rule(mask, rule, spec, rng)
    return mask


def render(mask: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    colors = palette_for(spec.class_set)
    safe = np.where(mask < spec.num_classes, mask, 0)
    image = colors[safe].transpose(2, 0, 1)
    if spec.color_jitter > 0:
        image = image + rng.normal(0.0, spec.color_jitter, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def apply_shift(image: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Hue rotation, brightness scaling, additive noise and a low-frequency texture, in that order."""
    out = image
    if shift.hue_shift % 360.0 != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0).transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + shift.hue_shift / 360.0) % 1.0
        out = hsv_to_rgb(hsv).transpose(2, 0, 1)
    if shift.brightness_scale != 1.0:
        out = out * shift.brightness_scale
    if shift.noise_sigma > 0.0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    if shift.texture_freq > 0.0:
        height, width = out.shape[1:]
        phase_y, phase_x = rng.uniform(0.0, 2.0 * np.pi, size=2)
        yy = np.sin(2.0 * np.pi * shift.texture_freq * np.arange(height) / height + phase_y)
        xx = np.sin(2.0 * np.pi * shift.texture_freq * np.arange(width) / width + phase_x)
        out = out * (1.0 + shift.texture_amplitude * np.outer(yy, xx))[None]
    return np.clip(out, 0.0, 1.0)


def generate_scene(spec: SceneSpec, domain: Domain, shift: DomainShift,
                   sample_id: Optional[str] = None) -> SegSample:
    """Generate one scene; the mask is always returned, callers strip it from target data."""
    mask = paint_layout(spec, np.random.default_rng([spec.seed, 0]))
    image = render(mask, spec, np.random.default_rng([spec.seed, 1]))
    if domain == "target":
        image = apply_shift(image, shift, np.random.default_rng([spec.seed, 2]))
    return SegSample(image=image, mask=mask, id=sample_id or f"{domain[0]}{spec.seed}", domain=domain)


def adjacent_pairs(mask: np.ndarray, ignore_index: int) -> Set[Tuple[int, int]]:
    pairs = set()
    for a, b in ((mask[:, :-1], mask[:, 1:]), (mask[:-1, :], mask[1:, :])):
        edge = (a != b) & (a != ignore_index) & (b != ignore_index)
        for x, y in zip(a[edge].tolist(), b[edge].tolist()):
            pairs.add((min(x, y), max(x, y)))
    return pairs


def _join_names(names: List[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _location(rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> Tuple[str, str]:
    vertical = ("top", "middle", "bottom")[min(int(3 * rows.mean() / height), 2)]
    horizontal = ("left", "center", "right")[min(int(3 * cols.mean() / width), 2)]
    return vertical, horizontal


def template_caption(mask: np.ndarray, class_set: List[str]) -> str:
    ignore_index = len(class_set)
    valid = mask != ignore_index
    if not valid.any():
        raise CaptionError(None, "mask holds only ignore pixels")
    if mask[valid].max() >= ignore_index or mask[valid].min() < 0:
        raise CaptionError(None, "mask holds class ids outside the class set")
    present = np.unique(mask[valid]).tolist()
    names = [class_set[i] for i in present]
    if len(names) == 1:
        return f"The image shows {names[0]}."

    height, width = mask.shape
    total = int(valid.sum())
    sentences = [f"The image shows {_join_names(names)}."]
    for class_id, name in zip(present, names):
        rows, cols = np.nonzero(mask == class_id)
        vertical, horizontal = _location(rows, cols, height, width)
        share = int(round(100.0 * rows.size / total))
        sentences.append(
            f"The {name} covers about {share} percent of the image in the {vertical} {horizontal} area, "
            f"spanning rows {rows.min()} to {rows.max()} and columns {cols.min()} to {cols.max()}."
        )
    for a, b in sorted(adjacent_pairs(mask, ignore_index)):
        sentences.append(f"A {class_set[a]} is next to {class_set[b]}.")
    return " ".join(sentences)


def decode_palette(image: np.ndarray, class_set: List[str]) -> np.ndarray:
    """Nearest-palette-colour labelling of an image; exact on clean source renders."""
    colors = palette_for(class_set)
    pixels = image.reshape(3, -1).T
    distances = ((pixels[:, None, :] - colors[None, :, :]) ** 2).sum(axis=2)
    return distances.argmin(axis=1).reshape(image.shape[1:])


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def build_dataset(spec: SceneSpec, n_source: int, n_target: int,
                  shift: Union[DomainShift, Mapping[str, DomainShift]], seed: int = 0) -> SceneDataset:
    if n_source < 1 or n_target < 1:
        raise CaptionDAError("n_source and n_target must be at least 1")
    conditions = dict(shift) if isinstance(shift, Mapping) else {DEFAULT_GROUP: shift}
    if not conditions:
        raise CaptionDAError("at least one target condition is required")
    names = list(conditions)

    source = []
    for i in range(n_source):
        scene = spec.model_copy(update={"seed": _derived_seed(spec.seed, seed, 0, i)})
        source.append(generate_scene(scene, "source", DomainShift(), sample_id=f"s{i:04d}"))

    target, target_masks = [], {}
    for i in range(n_target):
        group = names[i % len(names)]
        scene = spec.model_copy(update={"seed": _derived_seed(spec.seed, seed, 1, i)})
        sample = generate_scene(scene, "target", conditions[group], sample_id=f"t{i:04d}")
        target_masks[sample.id] = sample.mask
        sample.mask = None
        sample.group = group
        target.append(sample)
    logger.info("Built %d source and %d target scenes (%s)", n_source, n_target, ", ".join(names))
    return SceneDataset(spec=spec, source=source, target=target, target_masks=target_masks)


def _write_image(path: Path, image: np.ndarray):
    pixels = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def _write_mask(path: Path, mask: np.ndarray, ignore_index: int):
    pixels = np.where(mask == ignore_index, MASK_FILE_IGNORE, mask).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def _read_mask(path: Path, ignore_index: int) -> np.ndarray:
    with Image.open(path) as img:
        mask = np.asarray(img, dtype=np.int64)
    mask = np.where(mask == MASK_FILE_IGNORE, ignore_index, mask)
    if (mask > ignore_index).any():
        raise CaptionDAError(f"{path}: mask holds class ids beyond {ignore_index - 1}")
    return mask


def export_dataset(dataset: SceneDataset, directory: Path) -> Path:
    """Write PNG images and masks plus ``manifest.json``; target masks go to the eval sidecar only."""
    directory = Path(directory)
    for sub in ("images", "masks", "eval_masks"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    ignore = dataset.spec.ignore_index
    entries = []
    for sample in dataset.source:
        _write_image(directory / "images" / f"{sample.id}.png", sample.image)
        _write_mask(directory / "masks" / f"{sample.id}.png", sample.mask, ignore)
        entries.append(ManifestEntry(id=sample.id, split="source", image=f"images/{sample.id}.png",
                                     mask=f"masks/{sample.id}.png"))
    sidecar = {}
    for sample in dataset.target:
        _write_image(directory / "images" / f"{sample.id}.png", sample.image)
        _write_mask(directory / "eval_masks" / f"{sample.id}.png", dataset.target_masks[sample.id], ignore)
        entries.append(ManifestEntry(id=sample.id, split="target", image=f"images/{sample.id}.png",
                                     group=sample.group))
        sidecar[sample.id] = f"eval_masks/{sample.id}.png"

    manifest = Manifest(spec_hash=dataset.spec.spec_hash(), class_set=dataset.class_set,
                        ignore_index=ignore, entries=entries)
    (directory / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    (directory / "eval_manifest.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    (directory / "scene_spec.json").write_text(dataset.spec.model_dump_json(indent=2), encoding="utf-8")
    return directory / "manifest.json"


def load_dataset(manifest_path: Path, with_eval: bool = True) -> SceneDataset:
    """Load any dataset laid out per ``manifest.json``, synthetic or external."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = Manifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    ignore = manifest.ignore_index

    source, target = [], []
    for entry in manifest.entries:
        image = _read_image(root / entry.image)
        if entry.split == "source":
            if entry.mask is None:
                raise CaptionDAError(f"source entry '{entry.id}' has no mask")
            source.append(SegSample(image=image, mask=_read_mask(root / entry.mask, ignore), id=entry.id))
        else:
            target.append(SegSample(image=image, mask=None, id=entry.id, domain="target",
                                    group=entry.group or DEFAULT_GROUP))

    target_masks = {}
    sidecar_path = root / "eval_manifest.json"
    if with_eval and sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        target_masks = {key: _read_mask(root / rel, ignore) for key, rel in sidecar.items()}

    spec_file = root / "scene_spec.json"
    if spec_file.exists():
        spec = SceneSpec.model_validate_json(spec_file.read_text(encoding="utf-8"))
    else:
        first = (source or target)[0]
        spec = SceneSpec(class_set=manifest.class_set, height=first.height, width=first.width)
    return SceneDataset(spec=spec, source=source, target=target, target_masks=target_masks)
