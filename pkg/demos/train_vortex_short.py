"""Train one PPO agent on the vortex-length problem and trace the learned action.

Uses the library defaults (80x40 mesh, 600 s episodes, six episodes).
Prints the learned length after every update that ends an episode, next to
the return of that episode. Pass --nx 40 for a faster, coarser run.
"""
import argparse

from pathogen_control.config import parse_config
from pathogen_control.envs import RoomEnv
from pathogen_control.ppo import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--nx", type=int, default=80)
    ap.add_argument("--episodes", type=int, default=6)
    args = ap.parse_args()
    cfg = parse_config("", [f"nx={args.nx}", f"ny={args.nx // 2}"])
    spec = cfg.episode_spec("vortex")
    per_episode = spec.n_steps // cfg["ppo.n_steps"]

    def show(update, curve, params):
        if update % per_episode == 0:
            print(f"episode {update // per_episode}: learned l = {curve.mean_action[-1]:.3f} m, "
                  f"mean return so far {curve.mean_episode_return[-1]:.1f}")

    train(RoomEnv(spec), cfg.ppo_config(), args.episodes * spec.n_steps, args.seed, callback=show)


if __name__ == "__main__":
    main()
