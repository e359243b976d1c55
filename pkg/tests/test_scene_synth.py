import re

import numpy as np
import pytest
from pydantic import ValidationError

from app.clients import mentioned_classes
from app.data.data import conditions_data
from app.exceptions import GenerationError
from app.scene_synth import (adjacent_pairs, apply_shift, build_dataset, decode_palette, export_dataset,
                             generate_scene, load_dataset, template_caption)
from app.schemas import DomainShift, LayoutRule, SceneSpec

NIGHT = DomainShift(hue_shift=20.0, brightness_scale=0.5, noise_sigma=0.05, texture_freq=2.0)


def test_generation_is_deterministic(scene_spec):
    first = build_dataset(scene_spec, 3, 3, NIGHT, seed=4)
    second = build_dataset(scene_spec, 3, 3, NIGHT, seed=4)
    for a, b in zip(first.source + first.target, second.source + second.target):
        assert a.id == b.id
        np.testing.assert_array_equal(a.image, b.image)
    for key, mask in first.target_masks.items():
        np.testing.assert_array_equal(mask, second.target_masks[key])


def test_dataset_layout(scene_spec):
    dataset = build_dataset(scene_spec, 3, 2, NIGHT)
    assert [s.id for s in dataset.source] == ["s0000", "s0001", "s0002"]
    assert [s.id for s in dataset.target] == ["t0000", "t0001"]
    assert all(s.mask is None for s in dataset.target)
    assert set(dataset.target_masks) == {"t0000", "t0001"}
    for sample in dataset.source + dataset.target:
        assert sample.image.shape == (3, 32, 32)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
    for sample in dataset.source:
        assert sample.mask.shape == (32, 32)
        assert sample.mask.max() < scene_spec.num_classes


def test_source_and_target_share_layout_statistics_but_not_colors(scene_spec):
    source = generate_scene(scene_spec, "source", NIGHT)
    target = generate_scene(scene_spec, "target", NIGHT)
    np.testing.assert_array_equal(source.mask, target.mask)
    assert not np.allclose(source.image, target.image)


def test_conditions_are_assigned_round_robin(scene_spec):
    shifts = {name: DomainShift(**values) for name, values in conditions_data.items()}
    dataset = build_dataset(scene_spec, 2, 6, shifts)
    assert [s.group for s in dataset.target] == ["fog", "night", "rain", "fog", "night", "rain"]


def test_neutral_shift_leaves_the_image_alone(scene_spec):
    image = generate_scene(scene_spec, "source", DomainShift()).image
    shifted = apply_shift(image, DomainShift(), np.random.default_rng(0))
    np.testing.assert_array_equal(shifted, image)


def test_missing_anchor_names_the_rule():
    spec = SceneSpec(class_set=["sky", "road", "person"],
                     layout_rules=[LayoutRule(kind="blob", cls="person", anchor="road", size=(0.1, 0.1))])
    with pytest.raises(GenerationError) as err:
        generate_scene(spec, "source", DomainShift())
    assert err.value.rule == "blob:person@road"


def test_spec_rejects_unknown_classes_and_duplicates():
    with pytest.raises(ValidationError):
        SceneSpec(class_set=["sky", "sky"])
    with pytest.raises(ValidationError):
        SceneSpec(class_set=["sky"], layout_rules=[LayoutRule(kind="band", cls="road", start=0.5, stop=1.0)])


def test_export_and_load_round_trip(scene_spec, tmp_path):
    dataset = build_dataset(scene_spec, 2, 2, NIGHT)
    loaded = load_dataset(export_dataset(dataset, tmp_path / "data"))
    assert loaded.spec == scene_spec
    for original, restored in zip(dataset.source, loaded.source):
        np.testing.assert_array_equal(original.mask, restored.mask)
        assert np.abs(original.image - restored.image).max() <= 0.5 / 255 + 1e-12
    assert [s.group for s in loaded.target] == ["target", "target"]
    for key, mask in dataset.target_masks.items():
        np.testing.assert_array_equal(loaded.target_masks[key], mask)
    assert load_dataset(tmp_path / "data" / "manifest.json", with_eval=False).target_masks == {}


def test_template_caption_single_class(class_set):
    assert template_caption(np.zeros((4, 4), dtype=int), class_set) == "The image shows sky."


def test_template_caption_mentions_locations_and_adjacency(class_set):
    mask = np.zeros((6, 6), dtype=int)
    mask[3:, :] = 2
    caption = template_caption(mask, class_set)
    assert caption.startswith("The image shows sky and road.")
    assert "The road covers about 50 percent of the image in the bottom center area" in caption
    assert caption.endswith("A sky is next to road.")
    assert adjacent_pairs(mask, len(class_set)) == {(0, 2)}


def test_palette_decoding_recovers_clean_masks(scene_spec):
    spec = scene_spec.model_copy(update={"color_jitter": 0.0})
    sample = generate_scene(spec, "source", DomainShift())
    np.testing.assert_array_equal(decode_palette(sample.image, spec.class_set), sample.mask)


def test_road_band_fills_the_bottom_half():
    spec = SceneSpec(height=8, width=8, class_set=["sky", "road"], background="sky",
                     layout_rules=[LayoutRule(kind="band", cls="road", start=0.5, stop=1.0)])
    mask = generate_scene(spec, "source", DomainShift()).mask
    assert (mask[4:] == 1).all()
    assert (mask[:4] == 0).all()


def test_brightness_only_shift_halves_the_source_image(scene_spec):
    spec = scene_spec.model_copy(update={"seed": 3})
    source = generate_scene(spec, "source", DomainShift())
    target = generate_scene(spec, "target", DomainShift(brightness_scale=0.5))
    np.testing.assert_array_equal(target.mask, source.mask)
    np.testing.assert_array_equal(target.image, 0.5 * source.image)


def _components(region):
    seen = np.zeros_like(region, dtype=bool)
    for start in zip(*np.nonzero(region)):
        if seen[start]:
            continue
        stack, component = [start], []
        seen[start] = True
        while stack:
            r, c = stack.pop()
            component.append((r, c))
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nr < region.shape[0] and 0 <= nc < region.shape[1] and region[nr, nc] and not seen[nr, nc]:
                    seen[nr, nc] = True
                    stack.append((nr, nc))
        yield component


def _neighbours(mask, r, c):
    height, width = mask.shape
    return [mask[nr, nc] for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
            if 0 <= nr < height and 0 <= nc < width]


def test_every_person_region_borders_the_sidewalk(scene_spec, class_set):
    mask = generate_scene(scene_spec.model_copy(update={"seed": 7}), "source", DomainShift()).mask
    person, sidewalk = class_set.index("person"), class_set.index("sidewalk")
    regions = list(_components(mask == person))
    assert regions
    for region in regions:
        assert any(sidewalk in _neighbours(mask, r, c) for r, c in region)


def _layout_area_fractions(num_classes):
    """Expected per-class area of the default layout on a 32x32 scene, averaged over every band jitter."""
    totals = np.zeros(num_classes)
    offsets = range(-2, 3)
    for building_offset in offsets:
        for road_offset in offsets:
            rows = np.zeros(32, dtype=int)
            rows[8 + building_offset:16 + building_offset] = 1
            rows[22 + road_offset:min(32 + road_offset, 32)] = 2
            rows[16 + road_offset:22 + road_offset] = 3
            counts = np.bincount(rows, minlength=num_classes) * 32
            counts[3] -= 4 * 3
            counts[4] += 4 * 3
            counts[2] -= 5 * 8
            counts[5] += 5 * 8
            totals += counts / (32 * 32)
    return totals / len(offsets) ** 2


def test_class_frequencies_match_layout_areas(scene_spec, class_set):
    masks = [s.mask for s in build_dataset(scene_spec, 100, 1, DomainShift(), seed=2).source]
    observed = np.bincount(np.concatenate([m.ravel() for m in masks]), minlength=len(class_set))
    observed = observed / observed.sum()
    np.testing.assert_allclose(observed, _layout_area_fractions(len(class_set)), atol=0.05)


def test_captions_name_present_classes_and_true_adjacencies(scene_spec, class_set):
    for sample in build_dataset(scene_spec, 20, 1, DomainShift(), seed=5).source:
        mask = sample.mask
        caption = template_caption(mask, class_set)
        present = {class_set[i] for i in np.unique(mask)}
        assert set(mentioned_classes(caption, class_set)) == present

        stated = set(re.findall(r"A (\w+) is next to (\w+)\.", caption))
        touching = set()
        for r in range(mask.shape[0]):
            for c in range(mask.shape[1]):
                for other in _neighbours(mask, r, c):
                    if other != mask[r, c]:
                        a, b = sorted((int(mask[r, c]), int(other)))
                        touching.add((class_set[a], class_set[b]))
        assert stated == touching
        assert {(class_set[a], class_set[b]) for a, b in adjacent_pairs(mask, len(class_set))} == touching
