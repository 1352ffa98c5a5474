"""
From chart polygons to training patches
=======================================

A synthetic scene is generated, its chart polygons are turned into a label
raster, and single-label patches are cut from the prepared feature stack.
"""
import tempfile

import numpy as np

from icebench.chart_labels import IGNORE, IceClass, rasterize_labels
from icebench.preprocess import PrepConfig, prepare_scene
from icebench.sampling import SamplingConfig, extract_patches, patch_candidate_count
from icebench.scene_store import load_scene
from icebench.synthgen import ambiguous_spec, generate

out = tempfile.mkdtemp(prefix="icebench_demo_")
paths = generate(ambiguous_spec(n_scenes=2, n_polygons=10, ambiguous_fraction=0.4), out)
scene = load_scene(paths[0])
print(f"{scene.scene_id}: {scene.height}x{scene.width}, {len(scene.polygons)} polygons")

###############################################################################
# Labels
# ------
# Each polygon gets the class of a partial holding at least 65% of the total
# concentration.  Polygons with no such partial become 255.

labels = rasterize_labels(scene)
values, counts = np.unique(labels, return_counts=True)
for v, n in zip(values, counts):
    name = "ignored" if v == IGNORE else IceClass(v).name.lower()
    print(f"  {name:>14}: {n / labels.size:6.1%}")

###############################################################################
# Prepared features
# -----------------
# Coarse passive-microwave channels are replicated onto the SAR grid, then
# everything is block-averaged by 2 and standardized.

stack = prepare_scene(scene, PrepConfig(downscale_ratio=2))
print("feature stack:", stack.features.shape, "channels:", ", ".join(stack.channels))

###############################################################################
# Patches
# -------
# A window is kept only if every labeled pixel agrees.  A border distance
# also rejects windows that sit close to another class.

H, W = stack.shape
print("candidate windows:", patch_candidate_count(H, W, 32, 16))
for border in (0, 8):
    recs = extract_patches(stack, SamplingConfig(patch_size=32, stride=16, border_distance=border))
    per_class = np.bincount([r.label for r in recs], minlength=6)
    print(f"border {border}: {len(recs)} patches, per class {per_class.tolist()}")
