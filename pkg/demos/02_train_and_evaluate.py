"""Train a small model for a few epochs and compare it against constant velocity."""

# %%
from laneattn import metrics, network, synthetic, training
from laneattn.dataset import split

data = synthetic.generate_synthetic(synthetic.GeneratorConfig.preset("tiny"), seed=0)
train_scenes, val_scenes = split(data.scenes, (0.8, 0.2), seed=0)

# %% one short schedule; the "desk" preset is the one used for the real runs
model_cfg = network.ModelConfig()
train_cfg = training.TrainConfig.preset("tiny")
result = training.train(train_scenes, val_scenes, model_cfg, train_cfg,
                        on_epoch=lambda r: print(r["epoch"], round(r["train_total"], 2), round(r["val_ade_k1"], 3)))

# %% four epochs on 51 scenes is far from converged, so constant velocity still wins here
model = metrics.ModelPredictor(result.best_params, model_cfg)
print(metrics.evaluate(model, val_scenes, data.graph).to_text())
print(metrics.evaluate(metrics.ConstantVelocityPredictor(), val_scenes, data.graph).to_text())

# %% lane-attention accuracy against the lane the generator actually steered into
print("intended lane accuracy", metrics.lane_accuracy(val_scenes, result.best_params, model_cfg, "intended"))
