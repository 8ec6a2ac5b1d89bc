# # Masks, suppression and the four metrics
#
# A tour of the evaluation side of s3kit on one small seeded scene.

import numpy as np

from s3kit.datamodel import Instance
from s3kit.maskcore import bbox_of, mask_iou, rle_decode, rle_encode
from s3kit.metrics import evaluate, format_table
from s3kit.suppress import SuppressConfig, cross_class_nms, standard_nms
from s3kit.synth import SynthConfig, generate

# ## Run-length encoding
#
# Masks are stored column by column, starting with a run of zeros.

m = np.zeros((4, 5), dtype=bool)
m[1:3, 1:4] = True
rle = rle_encode(m)
print("counts:", rle.counts)
print("round trip ok:", np.array_equal(rle_decode(rle), m))
print("box:", bbox_of(m))

# ## Two labels on one instrument
#
# A detector often emits the same mask twice with different classes. Per-class
# suppression keeps both; cross-class suppression keeps the confident one.

a = Instance.from_bits("f0", 0, 2, 0.9, m)
b = Instance.from_bits("f0", 1, 3, 0.8, m)
print("IoU:", mask_iou(a.bits, b.bits))
print("standard keeps:", [i.class_label for i in standard_nms([a, b])])
print("cross-class keeps:", [i.class_label for i in cross_class_nms([a, b])])
print("defaults:", SuppressConfig())

# ## Scoring a noisy prediction set
#
# The generator can corrupt labels and jitter mask boundaries.

scene = generate(SynthConfig(seed=3, n_frames=12, label_noise=0.3, mask_noise=0.3))
print(f"{len(scene.gt.instances)} instruments over {len(scene.gt.frames)} frames")
print(format_table(evaluate(scene.gt, scene.pred), scene.gt.classes))
