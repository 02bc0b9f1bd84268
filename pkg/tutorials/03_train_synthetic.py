"""Train a tiny network on synthetic shapes, then run sliding-window inference.

Takes a few minutes on a laptop CPU. Set STEPS higher for a better model.
"""
import tempfile
from pathlib import Path

import numpy as np

from uxnet3d.data import DatasetManifest, synth_generate
from uxnet3d.inference import predict_labels
from uxnet3d.model import UXNetConfig, build, load_model
from uxnet3d.training import TrainConfig, evaluate, train

STEPS = 60
work = Path(tempfile.mkdtemp(prefix="uxnet3d-"))

# twenty 64^3 volumes with three classes: background plus two shape families
manifest = DatasetManifest.load(synth_generate(work / "data", num_volumes=20, extent=64, num_classes=3, seed=7))
print({s: len(manifest.split(s)) for s in ("train", "val", "test")})

model = build(UXNetConfig.tiny(), 0)
cfg = TrainConfig(steps=STEPS, eval_interval=STEPS)
result = train(model, manifest, cfg, work / "run", seed=1)
print("best val Dice", result["best_dice"], "at step", result["best_step"])

# reload the best weights and score the held-out split
best, _ = load_model(work / "run" / "best.uxck")
print(evaluate(best, manifest.load_pairs("test"), manifest.num_classes))

image, label = manifest.load_pairs("test")[0]
pred = predict_labels(best, image)
print("voxel accuracy on one test volume:", float(np.mean(pred == label)))
