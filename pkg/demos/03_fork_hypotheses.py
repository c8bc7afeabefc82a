"""Overfit a handful of fork scenes and look at the per-lane hypotheses."""

# %%
from pathlib import Path

import numpy as np

from laneattn import network, plot, synthetic, training

cfg = synthetic.GeneratorConfig(counts={"fork-branch": 8})
data = synthetic.generate_synthetic(cfg, seed=3)
model_cfg = network.ModelConfig()
result = training.train(data.scenes, [], model_cfg, training.TrainConfig.preset("overfit"))
params = result.params
print("final loss", round(result.history[-1]["train_total"], 2))

# %% one hypothesis per candidate lane; the branches should end far apart
scene = data.scenes[0]
for hyp in network.predict_multimodal(scene, params, model_cfg, k=scene.num_lanes):
    print(f"{hyp.lane_id:>12s}  p={hyp.probability:.3f}  end={np.round(hyp.mu[-1], 1)}")

branches = [i for i, lid in enumerate(scene.lane_ids) if lid.endswith(("-BL", "-BR"))]
left, right = network.decode_lanes(scene, branches, params, model_cfg)
print("branch endpoint gap", round(float(np.linalg.norm(left[-1] - right[-1])), 2), "m")

# %% K above the lane count pads with sampled trajectories around the top lane
hyps = network.predict_multimodal(scene, params, model_cfg, k=6, seed=0)
print([(h.lane_id, h.sampled, round(h.probability, 3)) for h in hyps])
Path("fork.svg").write_text(plot.scene_svg(scene, hyps))
