categories_data = [
    {"name": "sky", "color": (0.27, 0.51, 0.71)},
    {"name": "building", "color": (0.55, 0.27, 0.07)},
    {"name": "road", "color": (0.50, 0.25, 0.50)},
    {"name": "sidewalk", "color": (0.96, 0.14, 0.91)},
    {"name": "person", "color": (0.86, 0.08, 0.24)},
    {"name": "car", "color": (0.00, 0.00, 0.56)},
    {"name": "vegetation", "color": (0.42, 0.56, 0.14)},
    {"name": "pole", "color": (0.60, 0.60, 0.60)},
]

layout_data = [
    {"kind": "band", "cls": "building", "start": 0.25, "stop": 0.5, "jitter": 0.06},
    {"kind": "band", "cls": "road", "start": 0.7, "stop": 1.0, "jitter": 0.06},
    {"kind": "band_above", "cls": "sidewalk", "anchor": "road", "extent": 0.2},
    {"kind": "blob", "cls": "person", "anchor": "sidewalk", "size": (0.12, 0.1), "count": 1},
    {"kind": "blob", "cls": "car", "anchor": "road", "size": (0.15, 0.25), "count": 1},
]

conditions_data = {
    "fog": {"hue_shift": 0.0, "brightness_scale": 1.1, "noise_sigma": 0.04, "texture_freq": 1.0,
            "texture_amplitude": 0.3},
    "night": {"hue_shift": 20.0, "brightness_scale": 0.45, "noise_sigma": 0.05, "texture_freq": 2.0},
    "rain": {"hue_shift": -15.0, "brightness_scale": 0.8, "noise_sigma": 0.08, "texture_freq": 4.0},
}

CLASS_PROMPT_TEMPLATE = "a photo of a {class_name}"
