"""Command-line pipeline: workload generation, DQN training, distillation,
evaluation and comparison.

Every command reads a flat ``key = value`` config (``--config FILE``, a
bundled ``--preset NAME``, or both, with ``--set key=value`` overrides
applied last) and writes the resolved config as ``run.cfg`` into the
output directory next to its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from . import __version__
from .distill import DistillResult, IRLPolicy, dagger_train
from .dqn import DQNModel, TrainConfig, TrainingDivergedError, load_model, save_model, train_dqn
from .dtree import FitConfig, Tree, export_dot, export_text, load_tree, save_tree, split_counts_csv
from .policies import FCFSPolicy, Policy
from .simcore import Metrics, records_csv, run_simulation
from .workload import SyntheticConfig, generate_synthetic, read_swf, split_trace, to_swf

log = logging.getLogger("schedtree")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # workload: an SWF path, or a synthetic trace when empty
    trace: str = ""
    n_jobs: int = 2500
    mean_interarrival: float = 570.0
    runtime_min: int = 60
    runtime_max: int = 14400
    size_min: int = 1
    size_max: int = 64
    workload_seed: int = 1
    nodes: int = 128
    train_jobs: int = 2000
    test_jobs: int = 500
    # teacher
    window: int = 20
    reward: str = "A"
    with_wait: str = "auto"
    reward_scale: str = "auto"
    episodes: int = 60
    epsilon0: float = 1.0
    alpha: float = 0.995
    gamma: float = 0.99
    batch_size: int = 64
    learning_rate: float = 1e-3
    replay_capacity: int = 50000
    target_sync: int = 500
    train_seed: int = 0
    # student
    max_depth: int = 10
    min_samples_split: int = 2
    min_leaf: int = 1
    threshold: int = 3
    iterations: int = 5
    keep: str = "last"
    fallback: str = "tree"
    depth_limit: int = 2
    # artifacts
    model: str = ""
    tree: str = ""
    out: str = "run"

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(self.n_jobs, self.mean_interarrival, (self.runtime_min, self.runtime_max),
                               (self.size_min, self.size_max), self.workload_seed)

    def train_config(self) -> TrainConfig:
        with_wait = {"auto": None, "true": True, "false": False}.get(self.with_wait.lower())
        if with_wait is None and self.with_wait.lower() != "auto":
            raise ConfigError(f"with_wait must be auto, true or false, not {self.with_wait!r}")
        scale = None if self.reward_scale == "auto" else float(self.reward_scale)
        return TrainConfig(window=self.window, epsilon0=self.epsilon0, alpha=self.alpha, gamma=self.gamma,
                           episodes=self.episodes, replay_capacity=self.replay_capacity,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           target_sync=self.target_sync, reward=self.reward, reward_scale=scale,
                           with_wait=with_wait, seed=self.train_seed)

    def fit_config(self) -> FitConfig:
        return FitConfig(self.max_depth, self.min_samples_split, self.min_leaf)

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        set_option(cfg, key, value)
    return cfg


def set_option(cfg: RunConfig, key: str, value: str) -> None:
    types = {f.name: f.type for f in fields(RunConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    try:
        parsed = int(value) if kind == "int" else float(value) if kind == "float" else value
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    setattr(cfg, key, parsed)


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("schedtree.presets").iterdir() if p.name.endswith(".cfg"))


def read_preset(name: str) -> str:
    path = resources.files("schedtree.presets") / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r} (have: {', '.join(preset_names())})")
    return path.read_text()


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.preset:
        cfg = parse_config(read_preset(args.preset), cfg)
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), cfg)
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_option(cfg, key.strip(), value.strip())
    return cfg


# -- helpers -------------------------------------------------------------------

def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dump())
    return out


def load_jobs(cfg: RunConfig):
    if cfg.trace:
        parsed = read_swf(cfg.trace, cfg.nodes)
        if parsed.n_dropped:
            log.warning("dropped %d jobs from %s: %s", parsed.n_dropped, cfg.trace, parsed.dropped)
        return parsed.jobs
    return generate_synthetic(cfg.synthetic())


def load_split(cfg: RunConfig):
    return split_trace(load_jobs(cfg), cfg.train_jobs, cfg.test_jobs)


def _model_path(cfg: RunConfig) -> Path:
    return Path(cfg.model) if cfg.model else Path(cfg.out) / "model.txt"


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def make_policy(spec: str, cfg: RunConfig) -> tuple[Policy, Tree | None]:
    """``fcfs``, ``dqn[:model]``, ``irl[:tree]`` or ``dagger[:tree]``."""
    kind, _, path = spec.partition(":")
    if kind == "fcfs":
        return FCFSPolicy(), None
    if kind not in ("dqn", "irl", "dagger"):
        raise ConfigError(f"unknown policy {spec!r}")
    model_path = Path(path) if kind == "dqn" and path else _model_path(cfg)
    model = load_model(_require(model_path, "model file"))
    if kind == "dqn":
        return model.policy(), None
    tree_path = Path(path) if path else Path(cfg.out) / f"{kind}_tree.txt"
    tree, _ = load_tree(_require(tree_path, "tree file"))
    threshold = -1 if kind == "dagger" else cfg.threshold
    return IRLPolicy(tree, model.spec, threshold, cfg.fallback), tree


def metrics_row(name: str, m: Metrics, tree: Tree | None) -> list:
    r = m.row()
    return [name, r["n_jobs"], r["avg_wait"], r["avg_slowdown"], r["makespan"],
            tree.n_nodes if tree is not None else "", r["decisions"], r["mean_latency_s"]]


METRIC_COLUMNS = ["policy", "n_jobs", "avg_wait", "avg_slowdown", "makespan", "tree_nodes", "decisions",
                  "mean_latency_s"]


# -- commands ------------------------------------------------------------------

def cmd_gen_workload(cfg: RunConfig, args) -> None:
    jobs = generate_synthetic(cfg.synthetic())
    out = _outdir(cfg)
    path = Path(args.output) if args.output else out / "workload.swf"
    header = {"Generator": "schedtree synthetic", "Seed": cfg.workload_seed, "Jobs": len(jobs),
              "MaxNodes": cfg.nodes, "MaxProcs": cfg.nodes}
    path.write_text(to_swf(jobs, header))
    print(f"wrote {len(jobs)} jobs to {path}")


def cmd_train_dqn(cfg: RunConfig, args) -> None:
    train, _ = load_split(cfg)
    out = _outdir(cfg)

    def progress(row):
        log.info("episode %d  reward %.4g  loss %.4g  eps %.3f", row["episode"], row["mean_reward"],
                 row["mean_loss"], row["epsilon"])

    model, train_log = train_dqn(train, cfg.nodes, cfg.train_config(), progress=progress)
    path = _model_path(cfg)
    save_model(model, path)
    (out / "train_log.csv").write_text(train_log.to_csv())
    print(f"wrote {path} and {out / 'train_log.csv'}")


def distill_both(cfg: RunConfig, model: DQNModel, train) -> tuple[DistillResult, DistillResult]:
    common = dict(n_iter=cfg.iterations, fit_cfg=cfg.fit_config(), window=cfg.window, keep=cfg.keep,
                  fallback=cfg.fallback)
    irl = dagger_train(model, train, cfg.nodes, threshold=cfg.threshold, **common)
    dagger = dagger_train(model, train, cfg.nodes, threshold=-1, **common)
    return irl, dagger


def write_tree_exports(out: Path, stem: str, tree: Tree, names, depth_limit: int) -> None:
    (out / f"{stem}.dot").write_text(export_dot(tree, names, depth_limit))
    (out / f"{stem}_top.txt").write_text(export_text(tree, names, depth_limit))
    (out / f"{stem}_splits.csv").write_text(split_counts_csv(tree, names, depth_limit))


def cmd_distill(cfg: RunConfig, args) -> None:
    model = load_model(_require(_model_path(cfg), "model file"))
    train, _ = load_split(cfg)
    out = _outdir(cfg)
    names = model.spec.names
    runs = [("irl" if cfg.threshold >= 0 else "dagger", cfg.threshold)]
    if args.with_dagger and cfg.threshold >= 0:
        runs.append(("dagger", -1))
    for stem, threshold in runs:
        res = dagger_train(model, train, cfg.nodes, cfg.iterations, cfg.fit_config(), threshold, cfg.window,
                           cfg.keep, cfg.fallback)
        save_tree(res.tree, out / f"{stem}_tree.txt", names)
        (out / f"{stem}_report.csv").write_text(res.report_csv())
        (out / f"{stem}_dataset.csv").write_text(res.dataset.to_csv())
        write_tree_exports(out, stem, res.tree, names, cfg.depth_limit)
        print(f"{res.method}: {res.tree.n_nodes} nodes, fidelity {res.report[-1]['fidelity']:.3f}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    _, test = load_split(cfg)
    out = _outdir(cfg)
    rows = []
    for spec in args.policy:
        policy, tree = make_policy(spec, cfg)
        m = run_simulation(test, policy, cfg.nodes, cfg.window)
        name = spec.partition(":")[0]
        (out / f"jobs_{name}.csv").write_text(records_csv(m.records))
        rows.append(metrics_row(name, m, tree))
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    for r in rows:
        print(f"{r[0]:>7}  avg_wait {float(r[2]):10.1f}  avg_slowdown {float(r[3]):8.3f}")


def cmd_compare(cfg: RunConfig, args) -> None:
    model = load_model(_require(_model_path(cfg), "model file"))
    train, test = load_split(cfg)
    out = _outdir(cfg)
    trees = {}
    for kind in ("irl", "dagger"):
        path = out / f"{kind}_tree.txt"
        if path.is_file() and not args.refit:
            trees[kind] = load_tree(path)[0]
    if len(trees) < 2:
        irl, dagger = distill_both(cfg, model, train)
        trees = {"irl": irl.tree, "dagger": dagger.tree}
        for kind, tree in trees.items():
            save_tree(tree, out / f"{kind}_tree.txt", model.spec.names)

    policies = [("fcfs", FCFSPolicy(), None), ("dqn", model.policy(), None),
                ("dagger", IRLPolicy(trees["dagger"], model.spec, -1, cfg.fallback), trees["dagger"]),
                ("irl", IRLPolicy(trees["irl"], model.spec, cfg.threshold, cfg.fallback), trees["irl"])]
    results = {}
    rows = []
    for name, policy, tree in policies:
        m = run_simulation(test, policy, cfg.nodes, cfg.window)
        results[name] = m
        rows.append(metrics_row(name, m, tree))
    irl, dqn = results["irl"], results["dqn"]
    rows.append(["irl/dqn", "", repr(float(irl.avg_wait / dqn.avg_wait)) if dqn.avg_wait else "",
                 repr(float(irl.avg_slowdown / dqn.avg_slowdown)),
                 "", "", "", f"{irl.mean_latency / dqn.mean_latency:.3e}"])
    rows.append(["irl/dagger", "", "", "", "", repr(trees["irl"].n_nodes / trees["dagger"].n_nodes), "", ""])
    _write_csv(out / "compare.csv", METRIC_COLUMNS, rows)
    print((out / "compare.csv").read_text(), end="")


def cmd_export_tree(cfg: RunConfig, args) -> None:
    path = Path(args.tree or cfg.tree or Path(cfg.out) / "irl_tree.txt")
    tree, names = load_tree(_require(path, "tree file"))
    out = _outdir(cfg)
    limit = args.depth_limit if args.depth_limit is not None else cfg.depth_limit
    write_tree_exports(out, path.stem, tree, names, limit)
    print(export_text(tree, names, limit), end="")


COMMANDS = {
    "gen-workload": (cmd_gen_workload, "write a synthetic SWF trace"),
    "train-dqn": (cmd_train_dqn, "train the Q-network teacher"),
    "distill": (cmd_distill, "distill the teacher into a tree with DAgger"),
    "evaluate": (cmd_evaluate, "replay the test trace under one or more policies"),
    "compare": (cmd_compare, "FCFS, DQN, DAgger and IRL side by side"),
    "export-tree": (cmd_export_tree, "DOT, text and split-count exports of a tree file"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schedtree", description=__doc__.split("\n\n")[0].replace("\n", " "))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", help=f"bundled config ({', '.join(preset_names())})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if name == "gen-workload":
            p.add_argument("-o", "--output", help="SWF path (default: <out>/workload.swf)")
        elif name == "distill":
            p.add_argument("--with-dagger", action="store_true", help="also fit the unfiltered comparator")
        elif name == "evaluate":
            p.add_argument("--policy", action="append", required=True,
                           help="fcfs, dqn[:model], irl[:tree] or dagger[:tree]; repeatable")
        elif name == "compare":
            p.add_argument("--refit", action="store_true", help="distill again even if trees exist")
        elif name == "export-tree":
            p.add_argument("--tree", help="tree file (default: config 'tree' or <out>/irl_tree.txt)")
            p.add_argument("--depth-limit", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command][0](cfg, args)
    except TrainingDivergedError as exc:
        print(f"schedtree: training diverged: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"schedtree: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
