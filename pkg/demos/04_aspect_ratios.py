# # Why boxes describe instruments badly
#
# Long thin tools lying diagonally fill only a small part of their box, and
# shallow ones give very elongated boxes.

from s3kit.synth import SynthConfig, aspect_report, elongated_config, generate

for name, cfg in (("oblique", SynthConfig(seed=1, n_frames=40)),
                  ("elongated", elongated_config(seed=1, n_frames=40))):
    rep = aspect_report(generate(cfg).gt)
    print(f"{name}: {len(rep.ratios)} instances, {100 * rep.fraction_above:.0f}% with aspect > 3, "
          f"mean box occupancy {rep.mean_occupancy:.3f}")
    for bucket, n in rep.histogram.items():
        print(f"   {bucket:>10} {'#' * n}")
