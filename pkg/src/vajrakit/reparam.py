"""Structural reparameterization: fold batchnorm into convolutions and
collapse multi-branch RepVGG blocks into single 3x3 convolutions.

The fusion covers the affine part only; activations stay outside. All
transforms are pure and idempotent: fusing an already-fused model returns
bit-identical weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import DTYPE, BNParams, ConvSpec, ShapeError


@dataclass
class FusedConv:
    """A convolution carrying its own bias: the inference form of conv+BN."""

    spec: ConvSpec
    weights: np.ndarray
    bias: np.ndarray


def fuse_conv_bn(spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None,
                 bn: BNParams) -> FusedConv:
    """Fold batchnorm statistics into conv weights and bias.

    W' = W * gamma / sqrt(var + eps) per output channel,
    b' = (b - mean) * gamma / sqrt(var + eps) + beta.
    """
    if bn.channels != spec.c_out:
        raise ValueError(f"BN has {bn.channels} channels, conv emits {spec.c_out}")
    denom_sq = bn.var + DTYPE(bn.eps)
    if np.any(denom_sq <= 0):
        raise ValueError("var + eps must be positive to fold batchnorm")
    scale = bn.gamma / np.sqrt(denom_sq)
    b = np.zeros(spec.c_out, DTYPE) if bias is None else np.asarray(bias, DTYPE)
    fused_w = (weights * scale[:, None, None, None]).astype(DTYPE)
    fused_b = ((b - bn.mean) * scale + bn.beta).astype(DTYPE)
    out_spec = ConvSpec(spec.c_in, spec.c_out, spec.k, spec.stride, spec.padding,
                        spec.groups, has_bias=True)
    return FusedConv(out_spec, fused_w, fused_b)


def embed_kernel(weights: np.ndarray, target: int) -> np.ndarray:
    """Zero-pad a k x k kernel stack to K x K, centered.

    Running the padded kernel with padding increased by (K - k) / 2 computes
    the same map as the original.
    """
    k = weights.shape[-1]
    if k % 2 == 0 or target % 2 == 0:
        raise ValueError(f"kernel sides must be odd, got {k} -> {target}")
    if k > target:
        raise ValueError(f"cannot embed {k}x{k} into {target}x{target}")
    if k == target:
        return weights.copy()
    pad = (target - k) // 2
    return np.pad(weights, ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(DTYPE)


def identity_kernel(c_out: int, c_in_per_group: int, k: int) -> np.ndarray:
    """Delta kernel realizing the identity map as a k x k conv (grouped-aware):
    weight[o, o % c_in_per_group, center, center] = 1."""
    w = np.zeros((c_out, c_in_per_group, k, k), DTYPE)
    mid = k // 2
    for o in range(c_out):
        w[o, o % c_in_per_group, mid, mid] = 1.0
    return w


def fuse_repvgg(block) -> FusedConv:
    """Collapse a RepVGGBlock's branches into one 3x3 conv with bias.

    Each branch is BN-folded first; the 1x1 branch (and the identity branch,
    when present) is embedded into a 3x3 kernel, then weights and biases sum.
    """
    f3 = fuse_conv_bn(block.spec3, block.w3, None, block.bn3)
    f1 = fuse_conv_bn(block.spec1, block.w1, None, block.bn1)
    w = f3.weights + embed_kernel(f1.weights, 3)
    b = f3.bias + f1.bias
    if block.bn_id is not None:
        spec_id = ConvSpec(block.spec3.c_in, block.spec3.c_out, 1, 1, 0)
        w_id = identity_kernel(spec_id.c_out, spec_id.c_in, 1)
        fid = fuse_conv_bn(spec_id, w_id, None, block.bn_id)
        w = w + embed_kernel(fid.weights, 3)
        b = b + fid.bias
    return FusedConv(f3.spec, w.astype(DTYPE), b.astype(DTYPE))


@dataclass
class TrialDiff:
    max_abs: float
    max_rel: float


@dataclass
class EquivalenceReport:
    """Per-trial max abs/rel differences between two callables, plus a pass
    flag under the given absolute tolerance."""

    trials: list
    tol: float

    @property
    def max_abs(self) -> float:
        return max(t.max_abs for t in self.trials)

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tol


def _flatten_outputs(out):
    if isinstance(out, dict):
        return [out[k] for k in sorted(out)]
    if isinstance(out, (list, tuple)):
        return list(out)
    return [out]


def reparam_graph(graph, store):
    """Whole-model pass: apply BN folding and RepVGG fusion at every site.

    Returns a (graph, store) pair in which no node carries multi-branch
    RepVGG blocks or standalone batchnorm. Graphs already marked fused pass
    through with bit-identical weights, so the pass is idempotent.
    """
    from .graph import Model  # local import avoids a module cycle
    from .weights import collect_weights

    model = Model(graph).bind(store)
    fused = model.fuse()
    return fused.graph, collect_weights(fused)


def verify_equivalence(f: Callable, g: Callable, trials: int, shape: tuple,
                       tol: float, seed: int = 0) -> EquivalenceReport:
    """Compare two tensor functions on random inputs of the given shape."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(trials):
        x = rng.standard_normal(shape).astype(DTYPE)
        fa = _flatten_outputs(f(x))
        ga = _flatten_outputs(g(x))
        if len(fa) != len(ga):
            raise ShapeError(f"output arity differs: {len(fa)} vs {len(ga)}")
        max_abs = 0.0
        max_rel = 0.0
        for a, b in zip(fa, ga):
            if a.shape != b.shape:
                raise ShapeError(f"output shapes differ: {a.shape} vs {b.shape}")
            diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
            max_abs = max(max_abs, float(diff.max()))
            denom = np.maximum(np.abs(a.astype(np.float64)), 1e-12)
            max_rel = max(max_rel, float((diff / denom).max()))
        results.append(TrialDiff(max_abs, max_rel))
    return EquivalenceReport(results, tol)
