# data.py
# Overlay colors by identity: identity k uses PALETTE[(k - 1) % len(PALETTE)]
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
]

# Synthetic clips. Identity k is shapes[k - 1]. Shapes are drawn in list order (later on top),
# except that occluders are drawn after the shapes they occlude. During an occlusion
# (frames start..end inclusive) the occluded shape is not drawn and whatever part of it the
# occluder does not already cover is painted and labelled as the occluder.
# An optional "color" fixes a shape's base color; by default shape k takes SHAPE_COLORS[k - 1].
SYNTH_PRESETS = {
    "static": {"height": 64, "width": 64, "frames": 5,
               "shapes": [{"kind": "square", "size": 16, "center": (32, 32), "velocity": (0, 0)}]},
    "translate": {"height": 64, "width": 64, "frames": 8,
                  "shapes": [{"kind": "square", "size": 16, "center": (20, 32), "velocity": (2, 0)}]},
    "pan": {"height": 64, "width": 64, "frames": 8, "camera": (2, 0),
            "shapes": [{"kind": "disc", "size": 16, "center": (24, 32), "velocity": (2, 0)}]},
    "scale": {"height": 64, "width": 64, "frames": 8,
              "shapes": [{"kind": "square", "size": 12, "center": (32, 32), "velocity": (0, 0), "scale_rate": 1.08}]},
    "two_objects": {"height": 64, "width": 64, "frames": 10,
                    "shapes": [{"kind": "square", "size": 14, "center": (18, 20), "velocity": (1, 0)},
                               {"kind": "disc", "size": 16, "center": (44, 44), "velocity": (-1, 0)}]},
    # the square passes in front of the disc; the disc is fully hidden on frames 7..10
    "occlusion": {"height": 64, "width": 64, "frames": 16,
                  "shapes": [{"kind": "square", "size": 18, "center": (10, 36), "velocity": (3, 0)},
                             {"kind": "disc", "size": 12, "center": (47, 38), "velocity": (-2, 0)}],
                  "occlusions": [{"occluder": 1, "occluded": 2, "start": 7, "end": 10}]},
    # two look-alike squares that cross; only position and history tell them apart
    "distractor": {"height": 64, "width": 64, "frames": 10,
                   "shapes": [{"kind": "square", "size": 14, "center": (18, 29), "velocity": (2, 0),
                               "color": (220, 60, 60)},
                              {"kind": "square", "size": 14, "center": (46, 37), "velocity": (-2, 0),
                               "color": (220, 60, 60)}]},
}

# Base shape colors; shape k takes SHAPE_COLORS[(k - 1) % len(SHAPE_COLORS)]
SHAPE_COLORS = [(220, 60, 60), (60, 90, 220), (60, 200, 90), (230, 200, 40)]
