# # How much AP is lost to labels alone?
#
# Keep every predicted mask and score, but give each prediction the label of
# the GT instance it matches. Whatever AP50 comes back was lost to
# classification, not segmentation.

from s3kit.datamodel import relabel_dataset_with_gt
from s3kit.experiments import RELABEL_CONFIG, gt_relabel_experiment
from s3kit.metrics import challenge_iou
from s3kit.synth import generate

res = gt_relabel_experiment()
print(f"AP50 with detector labels: {res.ap50_before:.4f}")
print(f"AP50 with matched GT labels: {res.ap50_after:.4f}")
for c in sorted(res.per_class_before):
    print(f"  class {c}: {res.per_class_before[c]:.3f} -> {res.per_class_after[c]:.3f}")

# The challenge IoU moves the same way on this scene.

scene = generate(RELABEL_CONFIG)
fixed = relabel_dataset_with_gt(scene.pred, scene.gt)
print(f"Ch_IoU: {challenge_iou(scene.gt, scene.pred):.4f} -> {challenge_iou(scene.gt, fixed):.4f}")
