"""Train the four ablation arms on a small generated set and compare them.

Arms: supervised only, + segmentation consistency, + feature consistency,
+ conjoint rotation. All share one config and differ only in overrides.
A few epochs on 64 samples take a couple of minutes; orderings at this
scale are noise, the point is the harness.

    python3 demos/ablation.py [work_dir] [epochs]
"""
import sys
from pathlib import Path

from semibev.config import build_config
from semibev.evaluation import format_metric
from semibev.synthworld import gen_dataset
from semibev.trainer import train

work = Path(sys.argv[1] if len(sys.argv) > 1 else "ablation_demo")
epochs = sys.argv[2] if len(sys.argv) > 2 else "4"

if not (work / "train" / "manifest.tsv").exists():
    gen_dataset(64, 0.1, 5, work / "train")
    gen_dataset(32, 1.0, 1005, work / "eval")

arms = {
    "sup": {"trainer.lambda1": "0", "trainer.lambda2": "0", "augment.apply_prob": "0"},
    "+sc": {"trainer.lambda2": "0", "augment.apply_prob": "0"},
    "+sc+fc": {"augment.apply_prob": "0"},
    "+rotation": {},
}
results = {}
for name, over in arms.items():
    cfg = build_config(None, {"trainer.train_dir": str(work / "train"), "trainer.eval_dir": str(work / "eval"),
                              "trainer.out_dir": str(work / "runs" / name.strip("+").replace("+", "_")),
                              "trainer.epochs": epochs, "trainer.eval_every": epochs, **over})
    results[name] = train(cfg).last_report
    print(f"{name:10s} done")

names = results["sup"].class_names
print(f"\n{'arm':10s} " + " ".join(f"{n:>9s}" for n in names) + "      mIoU")
for arm, rep in results.items():
    print(f"{arm:10s} " + " ".join(f"{format_metric(v):>9s}" for v in rep.iou) + f" {format_metric(rep.miou):>9s}")
