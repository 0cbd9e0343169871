"""Run one constant-action episode of each control problem and report J_e.

The vortex problem is run at two left-vortex lengths to show that a vortex
extending past the region of interest (x <= 2 m) lowers exposure there.
"""
import argparse
import time

from pathogen_control import oracle
from pathogen_control.envs import EpisodeSpec
from pathogen_control.mesh import MeshSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nx", type=int, default=80, help="cells along x (ny = nx / 2)")
    args = ap.parse_args()
    mesh = MeshSpec(8.0, 4.0, args.nx, args.nx // 2)

    for l in (2.0, 3.5):
        t0 = time.time()
        J = oracle.constant_action_exposure(EpisodeSpec(mesh=mesh), l)
        print(f"vortex, l = {l:.1f} m: J_e = {J:10.1f} particle s   ({time.time() - t0:.1f} s)")

    for x in (4.5, 6.0):
        t0 = time.time()
        J = oracle.constant_action_exposure(EpisodeSpec(problem="hp", mesh=mesh), x)
        print(f"hp, x_hp = {x:.1f} m: J_e = {J:10.1f} particle s   ({time.time() - t0:.1f} s)")


if __name__ == "__main__":
    main()
