"""Collect random-action data on carpet, learn a dynamics model, and steer with it.

Runs in about a minute on one core. Prints the path-following cost of the
learned MPC next to the differential-drive baseline (lower is better).
"""
import numpy as np

from mbloco import datapipe as dp
from mbloco import ddrive, mpc
from mbloco import dynmodel as dm
from mbloco import simworld as sw
from mbloco.config import default_config

cfg = default_config()
carpet = sw.get_terrain("carpet", cfg)

data = dp.build_dataset(cfg, carpet, n_rollouts=200, horizon=50, seed=0)
train_set, val_set = dp.split(data, 0.9, seed=0)
print(f"collected {len(data)} transitions ({data.meta['robot_seconds']:.0f} s of robot time)")

fit = dm.train(train_set, "plain", seed=0, val_set=val_set)
print(f"held-out loss: epoch 1 {fit.val_loss[0]:.3f} -> epoch {len(fit.val_loss)} {fit.val_loss[-1]:.3f}")

mc = mpc.MPCConfig.from_config(cfg)
dd_params = ddrive.DDParams.from_config(cfg)
for kind in ("straight", "left", "zigzag"):
    path = sw.make_path(kind, cfg["eval"]["path_scales"][kind])
    mpc_cost = [mpc.mpc_rollout(cfg, fit.model, carpet, path, mc, 5.0, seed=s).cost for s in range(3)]
    dd_cost = [ddrive.dd_rollout(cfg, carpet, path, dd_params, 5.0, seed=s).cost for s in range(3)]
    print(f"{kind:9s} mpc {np.mean(mpc_cost):7.2f}   dd {np.mean(dd_cost):7.2f}")
