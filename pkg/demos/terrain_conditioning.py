"""Why the terrain matters: one joint model with and without an image embedding.

Two terrains whose leg-phasing disturbance turns the robot in opposite
directions. A model trained on both without knowing which it stands on
averages the disturbance away; conditioning on a random projection of the
ground texture recovers the per-terrain behaviour. Takes a few minutes.
"""
import numpy as np

from mbloco import datapipe as dp
from mbloco import dynmodel as dm
from mbloco import mpc
from mbloco import simworld as sw
from mbloco.config import default_config

cfg = default_config()
names = ["carpet", "styrofoam"]
terrains = [sw.get_terrain(n, cfg) for n in names]
sets = [dp.build_dataset(cfg, t, 200, 50, seed=i) for i, t in enumerate(terrains)]
joint = dp.merge(sets, terrain_order=names)

models = {
    "naive joint": dm.train(joint, "plain", seed=0).model,
    "conditioned": dm.train(joint, "embedding", seed=0).model,
}
for name, ds in zip(names, sets):
    models[f"{name} only"] = dm.train(ds, "plain", seed=0).model

mc = mpc.MPCConfig.from_config(cfg)
path = sw.make_path("straight", cfg["eval"]["path_scales"]["straight"])
for terrain in terrains:
    print(terrain.name)
    for label, model in models.items():
        costs = [mpc.mpc_rollout(cfg, model, terrain, path, mc, 5.0, seed=s).cost for s in range(5)]
        print(f"  {label:16s} {np.mean(costs):7.2f} +/- {np.std(costs):.2f}")
