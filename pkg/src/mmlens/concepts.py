"""Model concepts: split a dataset along the Min/Max tree by which child realizes the output."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .minmax import MinMaxExpr, Node, eval_batch, eval_minmax, expr_inputs
from .network import ReluNetwork, forward


class PartitionLawError(AssertionError):
    pass


@dataclass
class ConceptNode:
    path: tuple
    node: Node
    members: np.ndarray
    children: list = field(default_factory=list)
    pruned: bool = False

    @property
    def kind(self) -> str:
        return self.node.kind

    @property
    def depth(self) -> int:
        return len(self.path)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class PartitionTree:
    root: ConceptNode
    sample_ids: list
    labels: np.ndarray
    outputs: np.ndarray  # N(x) per sample
    inputs: np.ndarray  # leaf-input activations per sample
    leaf_index: np.ndarray  # selected leaf per sample

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.root.walk())

    def level(self, k: int) -> list[ConceptNode]:
        """Nodes at depth ``k`` in preorder."""
        return [n for n in self.root.walk() if n.depth == k]

    def node_at(self, path) -> ConceptNode:
        node = self.root
        for i in path:
            node = node.children[i]
        return node

    def label_counts(self, node: ConceptNode) -> dict:
        y = self.labels[node.members]
        return {0: int(np.sum(y == 0)), 1: int(np.sum(y == 1))}


def path_str(path) -> str:
    return "/" + "/".join(str(i) for i in path)


def assign_sample(expr: MinMaxExpr, net: ReluNetwork, x):
    """FactorId of the leaf realizing N at ``x`` (lowest-index child on ties)."""
    z = expr_inputs(net, expr, np.asarray(x, dtype=np.float64)[None, :])[0]
    return eval_minmax(expr, z)[1]


def partition_dataset(expr: MinMaxExpr, net: ReluNetwork, X, labels, ids=None) -> PartitionTree:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("empty dataset")
    Z = expr_inputs(net, expr, X)
    _, leaf_idx = eval_batch(expr, Z)
    paths = expr.compiled.leaf_paths
    depth_of = np.array([len(paths[i]) for i in leaf_idx])

    def child_index(members, k):
        return np.array([paths[leaf_idx[m]][k] for m in members], dtype=np.int64)

    def build(node: Node, path: tuple, members: np.ndarray) -> ConceptNode:
        cn = ConceptNode(path, node, members)
        if node.kind != "leaf":
            k = len(path)
            reach = members[depth_of[members] > k]
            which = child_index(reach, k) if len(reach) else np.zeros(0, dtype=np.int64)
            for i, child in enumerate(node.children):
                cn.children.append(build(child, path + (i,), reach[which == i]))
        return cn

    root = build(expr.root, (), np.arange(len(X)))
    ids = list(range(len(X))) if ids is None else list(ids)
    return PartitionTree(root, ids, np.asarray(labels), forward(net, X), Z, leaf_idx)


def prune_empty(tree: PartitionTree) -> PartitionTree:
    """Copy of ``tree`` with memberless nodes flagged as pruned. The expression is not touched."""
    out = copy.copy(tree)
    out.root = copy.deepcopy(tree.root, memo={id(n.node): n.node for n in tree.root.walk()})
    for n in out.root.walk():
        n.pruned = len(n.members) == 0
    return out


def check_partition_laws(tree: PartitionTree, tolerance: float = 1e-9) -> None:
    """Raise PartitionLawError unless siblings split each parent exactly and every
    member's output matches its node's subtree value."""
    for node in tree.root.walk():
        if not node.children:
            continue
        union = np.concatenate([c.members for c in node.children])
        if len(union) != len(np.unique(union)):
            raise PartitionLawError(f"overlapping children under {path_str(node.path)}")
        if not np.array_equal(np.sort(union), np.sort(node.members)):
            raise PartitionLawError(f"children of {path_str(node.path)} do not cover its members")
    for node in tree.root.walk():
        if len(node.members) == 0:
            continue
        vals, _ = eval_batch(MinMaxExpr(node.node), tree.inputs[node.members])
        N = tree.outputs[node.members]
        bad = np.abs(vals - N) > tolerance * (1 + np.abs(N))
        if np.any(bad):
            raise PartitionLawError(
                f"{int(bad.sum())} members of {path_str(node.path)} disagree with the network")


def concept_stats(tree: PartitionTree) -> str:
    """CSV table: one row per node with member count, positive fraction and label purity."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_path", "depth", "kind", "tag", "members", "label_pos", "label_neg",
                "positive_fraction", "label_purity", "pruned"])
    for n in tree.root.walk():
        m = len(n.members)
        counts = tree.label_counts(n)
        if m:
            pos_frac = f"{np.mean(tree.outputs[n.members] > 0):.6f}"
            purity = f"{max(counts.values()) / m:.6f}"
        else:
            pos_frac = purity = ""
        w.writerow([path_str(n.path), n.depth, n.kind, n.node.tag, m, counts[1], counts[0],
                    pos_frac, purity, int(n.pruned)])
    return buf.getvalue()


def partition_table(tree: PartitionTree) -> str:
    """CSV with one row per (sample, level): sample_id, level, node_path, label, model_output."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "level", "node_path", "label", "model_output"])
    leaf_paths = {}
    for n in tree.root.walk():
        for m in n.members:
            leaf_paths.setdefault(int(m), []).append(n.path)
    for m in range(len(tree.sample_ids)):
        for p in sorted(leaf_paths.get(m, []), key=len):
            w.writerow([tree.sample_ids[m], len(p), path_str(p), int(tree.labels[m]),
                        repr(float(tree.outputs[m]))])
    return buf.getvalue()


def read_partition_table(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["level"] = int(r["level"])
        r["label"] = int(r["label"])
        r["model_output"] = float(r["model_output"])
    return rows
