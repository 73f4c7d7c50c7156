"""Train a DQN scheduler, distill it into a tree, and compare them.

Runs the scaled-down experiment end to end: a saturated synthetic trace on
128 nodes, a DQN teacher, IRL distillation (DAgger restricted to critical
states, queue longer than 3) and plain DAgger for comparison.  The defaults
take a couple of minutes on one core; ``--episodes 5`` gives a quick look.
"""

import argparse

from schedtree.distill import dagger_train, fidelity
from schedtree.dqn import TrainConfig, train_dqn
from schedtree.dtree import FitConfig, export_text, split_counts
from schedtree.policies import FCFSPolicy
from schedtree.simcore import run_simulation
from schedtree.workload import SyntheticConfig, generate_synthetic, split_trace

NODES = 128


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=60)
    ap.add_argument("--reward", choices=["A", "I"], default="A")
    ap.add_argument("--depth", type=int, default=10)
    args = ap.parse_args()

    trace = generate_synthetic(SyntheticConfig(n_jobs=2500, mean_interarrival=570.0, seed=1))
    train, test = split_trace(trace, 2000, 500)
    print(f"{len(train)} training jobs, {len(test)} held-out jobs, {NODES} nodes")

    model, log = train_dqn(train, NODES, TrainConfig(episodes=args.episodes, reward=args.reward, seed=0),
                           progress=lambda r: print(f"  episode {r['episode']:3d}  reward {r['mean_reward']:.4f}")
                           if r["episode"] % 10 == 0 else None)
    print(f"teacher trained: last episode mean reward {log.rows[-1]['mean_reward']:.4f}\n")

    common = dict(n_iter=5, fit_cfg=FitConfig(args.depth), fallback="tree")
    irl = dagger_train(model, train, NODES, threshold=3, **common)
    dagger = dagger_train(model, train, NODES, threshold=-1, **common)
    print(irl.report_csv())

    print("policy   avg wait (s)  avg slowdown")
    for name, policy in [("fcfs", FCFSPolicy()), ("dqn", model.policy()), ("dagger", dagger.policy),
                         ("irl", irl.policy)]:
        m = run_simulation(test, policy, NODES)
        print(f"{name:7s} {m.avg_wait:13.0f} {m.avg_slowdown:13.3f}")

    print(f"\ntree nodes: IRL {irl.tree.n_nodes}, DAgger {dagger.tree.n_nodes}")
    print(f"held-out fidelity on critical states: {fidelity(irl.tree, model, test, NODES):.3f}")
    names = model.spec.names
    print(f"splits in the top two levels: {split_counts(irl.tree, names, 2)}\n")
    print(export_text(irl.tree, names, depth_limit=2))


if __name__ == "__main__":
    main()
