"""PPO on the PDE-free quadratic bandit: reward -(a - 3)^2.

A quick check of the from-scratch PPO: the learned action should settle at 3
within 2000 steps. Prints the learned action every 20 updates.
"""
import argparse

from pathogen_control.envs import QuadraticBandit
from pathogen_control.ppo import PPOConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()

    def show(update, curve, params):
        if update % 20 == 0:
            print(f"update {update:4d}  steps {curve.steps[-1]:5d}  "
                  f"action {curve.mean_action[-1]:.3f} +- {curve.std_action[-1]:.3f}")

    # rewards of order 10 per step; scale them into the unit range for the critic
    train(QuadraticBandit(), PPOConfig(reward_scale=0.1), args.steps, args.seed, callback=show)


if __name__ == "__main__":
    main()
