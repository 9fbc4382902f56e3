"""Stereo blur geometry on a handful of numbers.

A point at depth z moving by dP during the exposure smears over f*dP/z pixels,
so near objects blur more. When the rig drives forward, the view closer to the
point sees it sweep faster, which is why the two views of one pair carry
different blur. Disparity f*b/z links the views; warping one into the other
and checking left/right consistency gives the occlusion mask used in training.
"""

import numpy as np

from stereodeblur.geometry import (CameraRig, blur_extent, consistency_mask, translation_blur_ratio,
                                   warp_with_disparity)

rig = CameraRig(focal_length_px=200.0, baseline_m=0.12, image_width=64, image_height=32)

print("blur extent for 5 cm of motion:")
for z in (1.0, 2.0, 4.0):
    print(f"  depth {z:.0f} m -> {blur_extent(rig, z, 0.05):.2f} px")

print("left/right blur ratio for a point h metres left of the rig centre:")
for h in (0.1, 0.3, 1.0):
    print(f"  h={h:.1f} m, b=0.12 m -> {translation_blur_ratio(h, 0.12):.3f}")

# a two-plane scene: a near strip in front of a far wall
d_left = np.full((32, 64), rig.fb / 6.0)
d_left[:, 30:45] = rig.fb / 2.0
d_right = np.full((32, 64), rig.fb / 6.0)
d_right[:, 30 - 12:45 - 12] = rig.fb / 2.0

right = np.random.default_rng(0).random((3, 32, 64))
left = warp_with_disparity(right, d_left, "left")
mask, _ = consistency_mask(d_left, d_right)
print(f"disparities {rig.fb / 6:.1f} px (wall) and {rig.fb / 2:.1f} px (strip)")
print(f"warped left view {left.shape}, valid pixels {mask.mean():.1%}")
print("mask row 16:", "".join("#" if v else "." for v in mask[16]))
