"""CART regression trees: fit, predict, size accounting, export and I/O.

Trees are stored as flat pre-order arrays (node 0 is the root, the left child
of an internal node immediately follows it).  ``feature[n] == -1`` marks a
leaf.  Samples with ``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import _kernels

TREE_MAGIC = "schedtree-tree"
TREE_VERSION = 1


class FitError(ValueError):
    pass


class TreeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_depth: int = 10
    min_samples_split: int = 2
    min_leaf: int = 1

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2 or self.min_leaf < 1:
            raise ValueError("min_samples_split must be >= 2 and min_leaf >= 1")


class Tree:
    def __init__(self, feature, threshold, value, n_samples, n_features: int):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.value = np.asarray(value, dtype=float)
        self.n_samples = np.asarray(n_samples, dtype=np.int64)
        self.n_features = n_features
        self.left, self.right, self.depth = _link(self.feature)
        self._row_fn = None

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def is_leaf(self, n: int) -> bool:
        return self.feature[n] < 0

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[-1]}")
        return X

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(self._check(X))
        return _kernels.tree_predict(self.feature, self.threshold, self.left, self.right, self.value, X)

    def predict_one(self, f) -> float:
        return float(self.predict(f)[0])

    def row_function(self):
        """The tree as a plain Python function of one feature row (a list).

        Scoring the few candidates of one decision is dominated by call
        overhead, which a generated nested conditional avoids."""
        if self._row_fn is None:
            if self.max_depth > MAX_CODEGEN_DEPTH:
                self._row_fn = self.predict_one
            else:
                self._row_fn = eval(compile(f"lambda x: {_row_expr(self, 0)}", "<tree>", "eval"))
        return self._row_fn

    def pick(self, X, submit, ids) -> int:
        """Same answer as :meth:`argmax`, faster for a handful of rows."""
        f = self.row_function()
        best, top = 0, None
        for i, row in enumerate(X.tolist()):
            v = f(row)
            if top is None or v > top or (v == top and (submit[i], ids[i]) < (submit[best], ids[best])):
                best, top = i, v
        return best

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.atleast_2d(self._check(X))
        return _kernels.tree_apply(self.feature, self.threshold, self.left, self.right, X)

    def argmax(self, X, submit, ids) -> int:
        return int(_kernels.tree_argmax(self.feature, self.threshold, self.left, self.right, self.value,
                                        X, submit, ids))

    def structure(self):
        """Hashable description, for structural comparisons."""
        return tuple(zip(self.feature.tolist(), self.threshold.tolist(), self.value.tolist(),
                         self.n_samples.tolist()))


MAX_CODEGEN_DEPTH = 60  # the parser limits nesting of parentheses


def _row_expr(tree: Tree, n: int) -> str:
    if tree.feature[n] < 0:
        return repr(float(tree.value[n]))
    return (f"({_row_expr(tree, int(tree.left[n]))} if x[{int(tree.feature[n])}] <= "
            f"{float(tree.threshold[n])!r} else {_row_expr(tree, int(tree.right[n]))})")


def _link(feature):
    n = len(feature)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    stack = []  # internal nodes still waiting for their right child
    for i in range(n):
        if i > 0:
            parent = i - 1
            if feature[parent] >= 0 and left[parent] == -1:
                left[parent] = i
            else:
                parent = stack.pop()
                right[parent] = i
            depth[i] = depth[parent] + 1
        if feature[i] >= 0:
            stack.append(i)
    if stack:
        raise TreeFormatError("pre-order node list is incomplete")
    return left, right, depth


def _tolerance(scale: float) -> float:
    return 1e-12 * max(1.0, abs(scale))


def best_split(X: np.ndarray, y: np.ndarray, min_leaf: int = 1):
    """Best (feature, threshold) by weighted MSE, or None if no valid split.

    Thresholds are midpoints between consecutive distinct values.  Ties go
    to the lowest feature index, then the lowest threshold.
    """
    n, d = X.shape
    total = y.sum()
    sq = float(y @ y)
    tol = _tolerance(sq)
    nl = np.arange(1, n)
    size_ok = (nl >= min_leaf) & (n - nl >= min_leaf)
    best = None
    best_gain = -np.inf
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        cs = np.cumsum(y[order])[:-1]
        # maximizing this is the same as minimizing SSE(left) + SSE(right)
        gain = cs * cs / nl + (total - cs) ** 2 / (n - nl)
        gain[~valid] = -np.inf
        top = gain.max()
        i = int(np.flatnonzero(gain >= top - tol)[0])
        if gain[i] > best_gain + tol:
            lo, hi = xs[i], xs[i + 1]
            thr = (lo + hi) / 2.0
            if thr >= hi:
                thr = lo
            best, best_gain = (f, float(thr)), gain[i]
    return best


def fit_cart(X, y, cfg: FitConfig = FitConfig()) -> Tree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(y) == 0 or X.shape[0] != len(y):
        raise FitError("need a non-empty (n, d) feature matrix and n targets")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise FitError("non-finite values in training data")

    feature, threshold, value, count = [], [], [], []

    def grow(idx, depth):
        ys = y[idx]
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        value.append(float(ys.mean()))
        count.append(len(idx))
        if depth >= cfg.max_depth or len(idx) < cfg.min_samples_split or np.all(ys == ys[0]):
            return
        split = best_split(X[idx], ys, cfg.min_leaf)
        if split is None:
            return
        f, thr = split
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        grow(idx[go_left], depth + 1)
        grow(idx[~go_left], depth + 1)

    grow(np.arange(len(y)), 0)
    return Tree(feature, threshold, value, count, X.shape[1])


def predict(tree: Tree, f):
    """Prediction for one feature vector (float) or for each row of a matrix."""
    f = np.asarray(f, dtype=float)
    return tree.predict_one(f) if f.ndim == 1 else tree.predict(f)


def tree_size(tree: Tree) -> int:
    return tree.n_nodes


def mse(tree: Tree, X, y) -> float:
    y = np.asarray(y, dtype=float)
    return float(np.mean((tree.predict(X) - y) ** 2))


# -- export ------------------------------------------------------------------

def _check_names(tree, names):
    names = list(names) if names is not None else [f"x{i}" for i in range(tree.n_features)]
    if len(names) != tree.n_features:
        raise ValueError(f"{len(names)} feature names for {tree.n_features} features")
    return names


def _subtree_size(tree, n):
    return int(np.sum(_descendants(tree, n)))


def _descendants(tree, n):
    mask = np.zeros(tree.n_nodes, dtype=bool)
    stack = [n]
    while stack:
        k = stack.pop()
        mask[k] = True
        if not tree.is_leaf(k):
            stack.extend((tree.left[k], tree.right[k]))
    return mask


def export_text(tree: Tree, names=None, depth_limit: int | None = None) -> str:
    """One line per node, indented by depth; internal nodes read
    ``if <feature> <= <threshold>:`` with their yes/no branches below."""
    names = _check_names(tree, names)
    lines = []

    def walk(n, prefix, indent):
        pad = "  " * indent
        d = tree.depth[n]
        if tree.is_leaf(n):
            lines.append(f"{pad}{prefix}q = {tree.value[n]:.6g}  (n={tree.n_samples[n]})")
        elif depth_limit is not None and d >= depth_limit:
            lines.append(f"{pad}{prefix}...  ({_subtree_size(tree, n)} nodes, n={tree.n_samples[n]})")
        else:
            lines.append(f"{pad}{prefix}if {names[tree.feature[n]]} <= {tree.threshold[n]:.6g}:")
            walk(tree.left[n], "yes: ", indent + 1)
            walk(tree.right[n], "no:  ", indent + 1)

    walk(0, "", 0)
    return "\n".join(lines) + "\n"


def export_dot(tree: Tree, names=None, depth_limit: int | None = None) -> str:
    names = _check_names(tree, names)
    out = ["digraph Tree {", '  node [shape=box, fontname="helvetica"];']

    def walk(n):
        d = tree.depth[n]
        if tree.is_leaf(n):
            out.append(f'  {n} [label="q = {tree.value[n]:.6g}\\nn = {tree.n_samples[n]}"];')
            return
        if depth_limit is not None and d >= depth_limit:
            out.append(f'  {n} [label="...\\n{_subtree_size(tree, n)} nodes", style=dashed];')
            return
        out.append(f'  {n} [label="{names[tree.feature[n]]} <= {tree.threshold[n]:.6g}\\n'
                   f'n = {tree.n_samples[n]}"];')
        for child, lab in ((tree.left[n], "yes"), (tree.right[n], "no")):
            walk(child)
            out.append(f'  {n} -> {child} [label="{lab}"];')

    walk(0)
    out.append("}")
    return "\n".join(out) + "\n"


def split_counts(tree: Tree, names=None, depth_limit: int | None = None) -> dict[str, int]:
    """Number of internal nodes splitting on each feature, restricted to
    depths below ``depth_limit`` when given."""
    names = _check_names(tree, names)
    c = Counter()
    for n in range(tree.n_nodes):
        if tree.is_leaf(n) or (depth_limit is not None and tree.depth[n] >= depth_limit):
            continue
        c[names[tree.feature[n]]] += 1
    return {name: c.get(name, 0) for name in names}


def split_counts_csv(tree: Tree, names=None, depth_limit: int = 2) -> str:
    top = split_counts(tree, names, depth_limit)
    every = split_counts(tree, names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", f"splits_depth_lt_{depth_limit}", "splits_total"])
    for name in top:
        w.writerow([name, top[name], every[name]])
    return buf.getvalue()


def top_split_feature(tree: Tree, names=None, depth_limit: int = 2) -> str | None:
    """Most frequent split feature in the top ``depth_limit`` levels.  Ties
    go to the feature that splits closest to the root."""
    counts = split_counts(tree, names, depth_limit)
    if not any(counts.values()):
        return None
    names = _check_names(tree, names)
    first = {}
    for n in range(tree.n_nodes):
        if not tree.is_leaf(n):
            first.setdefault(names[tree.feature[n]], (tree.depth[n], n))
    return max(counts, key=lambda k: (counts[k], -first.get(k, (99, 0))[0], -first.get(k, (99, 0))[1]))


# -- serialization -------------------------------------------------------------

def dump_tree(tree: Tree, names=None) -> str:
    names = _check_names(tree, names)
    lines = [f"{TREE_MAGIC} {TREE_VERSION}", "features " + " ".join(names), f"nodes {tree.n_nodes}"]
    for n in range(tree.n_nodes):
        if tree.is_leaf(n):
            lines.append(f"L {float(tree.value[n])!r} {int(tree.n_samples[n])}")
        else:
            lines.append(f"N {int(tree.feature[n])} {float(tree.threshold[n])!r} {float(tree.value[n])!r} {int(tree.n_samples[n])}")
    return "\n".join(lines) + "\n"


def parse_tree(text: str) -> tuple[Tree, list[str]]:
    lines = text.splitlines()
    try:
        magic, version = lines[0].split()
        if magic != TREE_MAGIC or int(version) != TREE_VERSION:
            raise TreeFormatError(f"not a v{TREE_VERSION} tree file")
        names = lines[1].split()[1:]
        k = int(lines[2].split()[1])
        feature, threshold, value, count = [], [], [], []
        for line in lines[3:3 + k]:
            parts = line.split()
            if parts[0] == "L":
                feature.append(-1)
                threshold.append(0.0)
                value.append(float(parts[1]))
                count.append(int(parts[2]))
            elif parts[0] == "N":
                feature.append(int(parts[1]))
                threshold.append(float(parts[2]))
                value.append(float(parts[3]))
                count.append(int(parts[4]))
            else:
                raise TreeFormatError(f"bad node line {line!r}")
        if len(feature) != k:
            raise TreeFormatError("truncated node list")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, TreeFormatError):
            raise
        raise TreeFormatError(f"malformed tree file: {exc}") from None
    return Tree(feature, threshold, value, count, len(names)), names


def save_tree(tree: Tree, path, names=None) -> None:
    with open(path, "w") as fh:
        fh.write(dump_tree(tree, names))


def load_tree(path) -> tuple[Tree, list[str]]:
    with open(path) as fh:
        return parse_tree(fh.read())
