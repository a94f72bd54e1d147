"""MPC against differential drive as the legs spin faster on styrofoam.

The leg-phasing disturbance grows with body speed, so the gap between the
two controllers widens at high speed. Writes speed.csv and speed.svg to the
current directory via the command line tool.
"""
from mbloco import cli

cli.main(["collect", "--terrain", "styrofoam", "--out", "."])
cli.main(["train", "--data", "styrofoam.rchd", "--name", "styrofoam", "--out", "."])
cli.main(["compare-speed", "--model", "styrofoam.rchm", "--terrain", "styrofoam", "--n-seeds", "5", "--out", "."])
