"""Recursive pairwise fusion of dense-block features.

Neighbouring features are paired without overlap, (1,2), (3,4), ...; each
child is projected by a 1x1 conv to a common width, the coarser one is
bilinearly upsampled, and the pair is summed.  Levels repeat until one
feature remains.  An unpaired trailing feature is promoted unchanged to the
next level.
"""
from dataclasses import dataclass

from . import layers as L
from . import tensor as T


class FusionError(ValueError):
    pass


@dataclass
class FusionNode:
    name: str
    left: object
    right: object
    level: int


@dataclass
class Leaf:
    index: int
    channels: int


class FusionTree:
    def __init__(self, root, leaves, nodes, target_channels, prefix):
        self.root = root
        self.leaves = leaves
        self.nodes = nodes
        self.target_channels = target_channels
        self.prefix = prefix

    @property
    def num_levels(self):
        return max((n.level for n in self.nodes), default=0)

    def level_sizes(self):
        sizes = {}
        for n in self.nodes:
            sizes[n.level] = sizes.get(n.level, 0) + 1
        return [sizes[k] for k in sorted(sizes)]


def _edge_name(prefix, node_name, side):
    return f"{prefix}/{node_name}/{side}"


def build_fusion_tree(leaf_channels, target_channels, params=None, prefix="fusion"):
    """Pair leaves level by level; allocate one 1x1 projection per child edge when ``params`` is given."""
    leaf_channels = list(leaf_channels)
    if not leaf_channels:
        raise FusionError("fusion tree needs at least one block feature")
    if target_channels < 1:
        raise FusionError(f"target_channels must be positive, got {target_channels}")
    leaves = [Leaf(i, int(c)) for i, c in enumerate(leaf_channels)]
    nodes = []
    if len(leaves) == 1:
        if params is not None:
            params.conv(f"{prefix}/leaf0", target_channels, leaves[0].channels, 1)
        return FusionTree(leaves[0], leaves, nodes, target_channels, prefix)

    level_items = list(leaves)
    level = 0
    while len(level_items) > 1:
        level += 1
        nxt = []
        for j in range(0, len(level_items) - 1, 2):
            node = FusionNode(f"l{level}n{j // 2}", level_items[j], level_items[j + 1], level)
            if params is not None:
                for side, child in (("left", node.left), ("right", node.right)):
                    in_ch = child.channels if isinstance(child, Leaf) else target_channels
                    params.conv(_edge_name(prefix, node.name, side), target_channels, in_ch, 1)
            nodes.append(node)
            nxt.append(node)
        if len(level_items) % 2:
            nxt.append(level_items[-1])
        level_items = nxt
    return FusionTree(level_items[0], leaves, nodes, target_channels, prefix)


def _upsample_to(x, h, w):
    _, _, xh, xw = x.shape
    if (xh, xw) == (h, w):
        return x
    if h % xh or w % xw:
        raise FusionError(f"cannot upsample {xh}x{xw} to {h}x{w}: resolutions are not related by an integer factor")
    return T.bilinear_upsample(x, h, w)


def fuse_pair(a, b, params, left_name, right_name):
    """Project both operands to the common width, upsample the coarser one, and sum.

    Projection and bilinear upsampling are both linear per channel and the
    interpolation weights sum to one, so projecting first gives the same
    result as upsampling first at a fraction of the cost.
    """
    if a.shape[0] != b.shape[0]:
        raise FusionError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    (ha, wa), (hb, wb) = a.shape[2:], b.shape[2:]
    h, w = max(ha, hb), max(wa, wb)
    for (xh, xw) in ((ha, wa), (hb, wb)):
        if h % xh or w % xw:
            raise FusionError(f"incompatible resolutions {ha}x{wa} and {hb}x{wb}")
    pa = _upsample_to(L.conv(params, left_name, a), h, w)
    pb = _upsample_to(L.conv(params, right_name, b), h, w)
    return T.add(pa, pb)


def fusion_forward(tree, features, params):
    """Evaluate the tree bottom-up; the root has ``target_channels`` at the finest leaf resolution."""
    features = list(features)
    if len(features) != len(tree.leaves):
        raise FusionError(f"tree has {len(tree.leaves)} leaves but {len(features)} features were given")
    for leaf, f in zip(tree.leaves, features):
        if f.shape[1] != leaf.channels:
            raise FusionError(f"leaf {leaf.index}: expected {leaf.channels} channels, got {f.shape[1]}")
    if not tree.nodes:
        return L.conv(params, f"{tree.prefix}/leaf0", features[0])

    values = {}

    def value(item):
        if isinstance(item, Leaf):
            return features[item.index]
        return values[item.name]

    for node in tree.nodes:
        try:
            values[node.name] = fuse_pair(
                value(node.left), value(node.right), params,
                _edge_name(tree.prefix, node.name, "left"),
                _edge_name(tree.prefix, node.name, "right"),
            )
        except ValueError as exc:
            raise FusionError(f"node {node.name}: {exc}") from exc
    return values[tree.root.name]
