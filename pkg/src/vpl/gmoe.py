"""Mixture-of-experts adapters over two domain-tagged frozen backbones.

Two expert streams (one "general", one "medical" backbone, each with its
own bottleneck adapters) produce pooled features that are either summed
(MoE) or interpolated elementwise by a learnable width-D gate (GMoE):
alpha * general + (1 - alpha) * medical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError


class GateVector:
    """Learnable width-D gate; raw values are used directly or squashed
    through a sigmoid so the effective gate stays in (0, 1)."""

    def __init__(self, param, parameterization="raw"):
        if parameterization not in ("raw", "sigmoid"):
            raise ValueError(f"parameterization must be raw|sigmoid, got {parameterization!r}")
        if param.value.ndim != 1:
            raise DimensionError(f"gate must be a width-D vector, got shape {param.value.shape}")
        self.param = param
        self.parameterization = parameterization

    @property
    def alpha(self):
        return self.param.value

    @property
    def width(self):
        return self.param.value.shape[0]

    def effective(self):
        """Effective gate as a graph node (gradients reach the raw values)."""
        if self.parameterization == "sigmoid":
            return T.sigmoid(self.param.value)
        return self.param.value

    def effective_values(self):
        with T.no_grad():
            return self.effective().data.copy()


def _as_gate_tensor(gate, width):
    if isinstance(gate, GateVector):
        if gate.width != width:
            raise DimensionError(f"gate width {gate.width} != feature width {width}")
        return gate.effective()
    gate = T.as_tensor(gate)
    if gate.shape != (width,):
        raise DimensionError(f"gate shape {gate.shape} != ({width},)")
    return gate


def moe_fuse(ag, am):
    """Elementwise sum of the two expert outputs."""
    return T.add(ag, am)


def gmoe_fuse(ag, am, gate):
    """Gated interpolation alpha*ag + (1-alpha)*am, elementwise over width D.

    Follows the std::lerp guarantees: exact at alpha=0 and alpha=1, and
    exactly ag wherever ag == am (the product form alone can be one ulp off
    there). Gradients use the product-form partials.
    """
    ag, am = T.as_tensor(ag), T.as_tensor(am)
    if ag.shape != am.shape:
        raise DimensionError(f"gmoe_fuse: {ag.shape} vs {am.shape}")
    alpha = _as_gate_tensor(gate, ag.shape[-1])
    a = alpha.data
    out = a * ag.data + (1.0 - a) * am.data
    out = np.where(ag.data == am.data, ag.data, out)
    lead = tuple(range(ag.ndim - 1))

    def backward(g):
        T._accum(ag, g * a)
        T._accum(am, g * (1.0 - a))
        galpha = g * (ag.data - am.data)
        T._accum(alpha, galpha.sum(axis=lead) if lead else galpha)

    return T._node(out, (ag, am, alpha), backward, "gmoe_fuse")


def gate_summary(gates):
    """Per-gate statistics of the effective alpha across its D dimensions."""
    rows = []
    for k, gate in enumerate(gates):
        vals = gate.effective_values() if isinstance(gate, GateVector) else np.asarray(gate, dtype=np.float64)
        rows.append(
            {
                "gate": k,
                "parameterization": getattr(gate, "parameterization", "raw"),
                "mean": float(vals.mean()),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        )
    return rows


@dataclass
class ExpertBranch:
    """One frozen domain-tagged backbone plus its trainable adapter stack.

    `adapters[i]` holds the block-i bottleneck parameters keyed
    down.weight / down.bias / up.weight / up.bias.
    """

    backbone: object
    adapters: list

    @property
    def tag(self):
        return self.backbone.domain_tag

    def injector(self):
        from .adaptation import adapter_forward

        def inject(i, tokens):
            if i == 0:
                return tokens
            a = self.adapters[i - 1]
            return adapter_forward(
                tokens,
                a["down.weight"].value,
                a["up.weight"].value,
                a["down.bias"].value,
                a["up.bias"].value,
            )

        return inject


def _pool(bb, tokens):
    if bb.config.pool == "mean":
        return T.mean_axis(tokens, 1)
    return T.reshape(T.narrow(tokens, 1, 0, 1), (tokens.shape[0], bb.config.dim))


def _stream_summaries(branch, x):
    """Class-token summary after every block's adapter; the last entry is the
    final pooled feature (post final_ln), so depth==1 matches final mode."""
    bb = branch.backbone
    inject = branch.injector()
    tokens = bb.embed(x)
    summaries = []
    for i in range(bb.config.depth):
        tokens = inject(i, tokens)
        if i >= 1:
            summaries.append(_pool(bb, tokens))
        tokens = bb._block(tokens, i)
    tokens = inject(bb.config.depth, tokens)
    tokens = T.layer_norm(tokens, bb.value("final_ln.gain"), bb.value("final_ln.bias"))
    summaries.append(_pool(bb, tokens))
    return summaries


def _check_experts(general, medical):
    if general.backbone.config != medical.backbone.config:
        raise DimensionError("expert backbones must share a BackboneConfig")


def moe_forward(x, general, medical, head_weight, head_bias):
    """Sum-fused features of both expert streams through a shared head."""
    _check_experts(general, medical)
    fg = general.backbone.forward_features(x, general.injector())
    fm = medical.backbone.forward_features(x, medical.injector())
    fused = moe_fuse(fg, fm)
    return T.linear(fused, head_weight, head_bias), fused


def gmoe_forward(x, general, medical, gates, mode, head_weight, head_bias):
    """Gate-fused features of both expert streams through a shared head.

    mode=final gates the pooled features once; mode=per_block gates each
    block's class-token summary with its own gate and averages the results.
    Returns (logits, fused features).
    """
    _check_experts(general, medical)
    if mode == "final":
        if len(gates) != 1:
            raise ValueError(f"final mode uses exactly one gate, got {len(gates)}")
        fg = general.backbone.forward_features(x, general.injector())
        fm = medical.backbone.forward_features(x, medical.injector())
        fused = gmoe_fuse(fg, fm, gates[0])
    elif mode == "per_block":
        depth = general.backbone.config.depth
        if len(gates) != depth:
            raise ValueError(f"per_block mode uses one gate per block ({depth}), got {len(gates)}")
        sg = _stream_summaries(general, x)
        sm = _stream_summaries(medical, x)
        parts = [gmoe_fuse(a, b, gate) for a, b, gate in zip(sg, sm, gates)]
        fused = parts[0]
        for part in parts[1:]:
            fused = T.add(fused, part)
        fused = T.scale(fused, 1.0 / len(parts))
    else:
        raise ValueError(f"fusion mode must be final|per_block, got {mode!r}")
    return T.linear(fused, head_weight, head_bias), fused
