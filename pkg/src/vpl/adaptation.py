"""Catalog of adaptation methods as freeze masks plus inserted modules.

Each method is a declarative plan: which backbone parameters thaw, which
new parameter groups (adapters, prompts, side network, gates, task head)
are inserted, and how the forward pass is assembled. Building a plan never
mutates the input backbone(s); the adapted model owns copies.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

from . import gmoe as gmoe_mod
from . import tensor as T
from .backbone import param_shapes, trunc_normal
from .checkpoint import CheckpointError, file_sha256, read_container, write_container
from .gmoe import ExpertBranch, GateVector
from .tensor import Parameter, Tensor

METHODS = (
    "full",
    "linear",
    "mlp3",
    "partial1",
    "sidetune",
    "bias",
    "adapter",
    "vpt-shallow",
    "vpt-deep",
    "moe-adapter",
    "gmoe-adapter",
)

DUAL_BACKBONE_METHODS = ("moe-adapter", "gmoe-adapter")

# method -> {hyper key: default}; None means "use the embedding width"
_HYPER_DEFAULTS = {
    "full": {},
    "linear": {},
    "mlp3": {"head_hidden": None},
    "partial1": {},
    "sidetune": {"side_width": None},
    "bias": {},
    "adapter": {"bottleneck": 16},
    "vpt-shallow": {"prompt_len": 50},
    "vpt-deep": {"prompt_len": 5},
    "moe-adapter": {"bottleneck": 16},
    "gmoe-adapter": {
        "bottleneck": 16,
        "gate_init": 0.5,
        "fusion_mode": "final",
        "gate_param": "raw",
    },
}


class PlanError(ValueError):
    """Illegal method name, hyperparameters, or backbone combination."""


@dataclass(frozen=True)
class AdaptationPlan:
    method: str
    hyper: dict

    def to_dict(self):
        return {"method": self.method, "hyper": dict(self.hyper)}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"method", "hyper"}
        if extra:
            raise PlanError(f"unknown plan keys: {sorted(extra)}")
        return make_plan(d.get("method"), d.get("hyper") or {})


def make_plan(method, hyper=None):
    """Validate and normalize into an AdaptationPlan with defaults filled."""
    if method not in METHODS:
        raise PlanError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    defaults = _HYPER_DEFAULTS[method]
    hyper = dict(hyper or {})
    extra = set(hyper) - set(defaults)
    if extra:
        raise PlanError(f"{method}: illegal hyper keys {sorted(extra)}; legal: {sorted(defaults)}")
    merged = {**defaults, **hyper}
    for key in ("prompt_len", "bottleneck", "side_width", "head_hidden"):
        if key in merged and merged[key] is not None:
            if int(merged[key]) != merged[key] or merged[key] < 1:
                raise PlanError(f"{method}: {key} must be a positive integer, got {merged[key]!r}")
            merged[key] = int(merged[key])
    if "fusion_mode" in merged and merged["fusion_mode"] not in ("final", "per_block"):
        raise PlanError(f"fusion_mode must be final|per_block, got {merged['fusion_mode']!r}")
    if "gate_param" in merged and merged["gate_param"] not in ("raw", "sigmoid"):
        raise PlanError(f"gate_param must be raw|sigmoid, got {merged['gate_param']!r}")
    if "gate_init" in merged:
        merged["gate_init"] = float(merged["gate_init"])
        if merged.get("gate_param") == "sigmoid" and not 0.0 < merged["gate_init"] < 1.0:
            raise PlanError("gate_init must lie in (0,1) under the sigmoid parameterization")
    return AdaptationPlan(method, merged)


# -- building blocks -----------------------------------------------------------


def adapter_forward(h, down_w, up_w, down_b=None, up_b=None):
    """Residual bottleneck h + up(gelu(down(h)))."""
    z = T.gelu(T.linear(h, down_w, down_b))
    return T.add(h, T.linear(z, up_w, up_b))


def vpt_inject(tokens, prompts, layer, mode):
    """Insert prompt tokens right after the class token.

    shallow: prepended at layer 0 only, then carried through.
    deep: prepended at layer 0; at layer >= 1 the prompt slots are replaced
    by the given (fresh) prompts, so earlier prompt values get no gradient
    path through later layers.
    """
    if mode not in ("shallow", "deep"):
        raise PlanError(f"vpt mode must be shallow|deep, got {mode!r}")
    p = prompts.shape[0]
    if p < 1:
        raise PlanError("prompt_len must be >= 1")
    b = tokens.shape[0]
    tile = T.tile_batch(prompts, b)
    if layer == 0:
        return T.concat([T.narrow(tokens, 1, 0, 1), tile, T.narrow(tokens, 1, 1, tokens.shape[1] - 1)], axis=1)
    if mode == "shallow":
        return tokens
    if tokens.shape[1] < 1 + p:
        raise PlanError(f"deep replacement needs >= {1 + p} tokens, got {tokens.shape[1]}")
    rest = tokens.shape[1] - 1 - p
    return T.concat([T.narrow(tokens, 1, 0, 1), tile, T.narrow(tokens, 1, 1 + p, rest)], axis=1)


def sidetune_forward(x, frozen_feat, side_net, blend):
    """sigmoid(blend) * frozen_feat + (1 - sigmoid(blend)) * side_net(x)."""
    s = T.sigmoid(blend)
    return T.add(T.mul_vec(frozen_feat, s), T.mul_vec(side_net(x), T.scale(s, -1.0, 1.0)))


# -- shape-level plan accounting -------------------------------------------------


def _resolve(hyper, key, config):
    v = hyper.get(key)
    return config.dim if v is None else v


def _head_shapes(plan, config, num_classes):
    d = config.dim
    if plan.method == "mlp3":
        h = _resolve(plan.hyper, "head_hidden", config)
        return {
            "head.fc1.weight": (d, h),
            "head.fc1.bias": (h,),
            "head.fc2.weight": (h, h),
            "head.fc2.bias": (h,),
            "head.fc3.weight": (h, num_classes),
            "head.fc3.bias": (num_classes,),
        }
    return {"head.weight": (d, num_classes), "head.bias": (num_classes,)}


def _adapter_shapes(prefix, config, r):
    shapes = {}
    d = config.dim
    for i in range(config.depth):
        shapes[f"{prefix}adapter.{i}.down.weight"] = (d, r)
        shapes[f"{prefix}adapter.{i}.down.bias"] = (r,)
        shapes[f"{prefix}adapter.{i}.up.weight"] = (r, d)
        shapes[f"{prefix}adapter.{i}.up.bias"] = (d,)
    return shapes


def num_gates(plan, config):
    if plan.method != "gmoe-adapter":
        return 0
    return 1 if plan.hyper["fusion_mode"] == "final" else config.depth


def _inserted_shapes(plan, config, num_classes):
    d = config.dim
    m = plan.method
    if m == "adapter":
        return _adapter_shapes("", config, plan.hyper["bottleneck"])
    if m == "vpt-shallow":
        return {"prompt.0": (plan.hyper["prompt_len"], d)}
    if m == "vpt-deep":
        return {f"prompt.{i}": (plan.hyper["prompt_len"], d) for i in range(max(config.depth, 1))}
    if m == "sidetune":
        w = _resolve(plan.hyper, "side_width", config)
        return {
            "side.fc1.weight": (d, w),
            "side.fc1.bias": (w,),
            "side.fc2.weight": (w, d),
            "side.fc2.bias": (d,),
            "side.blend": (),
        }
    if m in DUAL_BACKBONE_METHODS:
        shapes = {}
        for tag in ("general", "medical"):
            shapes.update(_adapter_shapes(f"{tag}.", config, plan.hyper["bottleneck"]))
        for k in range(num_gates(plan, config)):
            shapes[f"gate.{k}.alpha"] = (d,)
        return shapes
    return {}


def _thawed_backbone_ids(plan, config):
    """Backbone parameter ids (head excluded) trained by the plan."""
    names = [n for n in param_shapes(config) if not n.startswith("head.")]
    m = plan.method
    if m == "full":
        return set(names)
    if m == "partial1":
        if config.depth < 1:
            raise PlanError("partial1 needs at least one block")
        last = f"block.{config.depth - 1}."
        return {n for n in names if n.startswith(last) or n.startswith("final_ln.")}
    if m == "bias":
        return {n for n in names if n.endswith(".bias")}
    return set()


def plan_trainable_shapes(plan, config, num_classes=None):
    """Name -> shape of every trainable parameter, without instantiating."""
    if num_classes is None:
        num_classes = config.num_classes
    shapes = {n: param_shapes(config)[n] for n in sorted(_thawed_backbone_ids(plan, config))}
    shapes.update(_inserted_shapes(plan, config, num_classes))
    shapes.update(_head_shapes(plan, config, num_classes))
    return shapes


def plan_trainable_count(plan, config, num_classes=None):
    return sum(int(np.prod(s)) for s in plan_trainable_shapes(plan, config, num_classes).values())


def trainable_count(model):
    """Sum of value sizes over the model's trainable parameters."""
    return sum(p.size for p in model.parameters() if p.trainable)


# -- adapted model ---------------------------------------------------------------


def _init_inserted(name, shape, rng, plan):
    if name.endswith(("up.weight", "up.bias")) or name.endswith(".bias") or name == "side.blend":
        return np.zeros(shape)
    if name.startswith("gate."):
        init = plan.hyper["gate_init"]
        if plan.hyper["gate_param"] == "sigmoid":
            init = math.log(init / (1.0 - init))
        return np.full(shape, init)
    return trunc_normal(rng, shape)


class AdaptedModel:
    """A backbone (or two experts) plus inserted modules and a task head,
    with a freeze mask covering every parameter exactly once."""

    def __init__(self, plan, backbones, inserted, head, num_classes):
        self.plan = plan
        self.backbones = backbones
        self.inserted = inserted
        self.head = head
        self.num_classes = num_classes
        self._by_id = {}
        for p in self.parameters():
            if p.id in self._by_id:
                raise PlanError(f"duplicate parameter id {p.id}")
            self._by_id[p.id] = p

    # construction ---------------------------------------------------------

    @classmethod
    def build(cls, plan, backbones, num_classes=None, seed=0):
        if isinstance(backbones, (list, tuple)):
            backbones = list(backbones)
        else:
            backbones = [backbones]
        dual = plan.method in DUAL_BACKBONE_METHODS
        if dual:
            if len(backbones) != 2:
                raise PlanError(f"{plan.method} requires two expert backbones, got {len(backbones)}")
            tags = [bb.domain_tag for bb in backbones]
            if len(set(tags)) != 2:
                raise PlanError(f"expert backbones must carry distinct domain_tags, got {tags}")
            if backbones[0].config != backbones[1].config:
                raise PlanError("expert backbones must share a BackboneConfig")
            if set(tags) == {"general", "medical"}:
                roles = {bb.domain_tag: bb for bb in backbones}
            else:
                # free-form tags: roles are positional, first is the general expert
                roles = {"general": backbones[0], "medical": backbones[1]}
        else:
            if len(backbones) != 1:
                raise PlanError(f"{plan.method} takes exactly one backbone, got {len(backbones)}")
            roles = {"main": backbones[0]}

        config = backbones[0].config
        if num_classes is None:
            num_classes = config.num_classes

        copies = {}
        thawed = _thawed_backbone_ids(plan, config) if not dual else set()
        for role, bb in roles.items():
            copy = bb.copy()
            prefix = "" if role == "main" else role + "."
            for name, p in copy.params.items():
                p.id = prefix + name
                p.trainable = (name in thawed) and not name.startswith("head.")
            copies[role] = copy

        rng = np.random.default_rng(seed)
        inserted = {
            name: Parameter(name, Tensor(_init_inserted(name, shape, rng, plan)))
            for name, shape in _inserted_shapes(plan, config, num_classes).items()
        }
        head = {
            name: Parameter(name, Tensor(
                np.zeros(shape) if name.endswith(".bias") else trunc_normal(rng, shape)
            ))
            for name, shape in _head_shapes(plan, config, num_classes).items()
        }
        return cls(plan, copies, inserted, head, num_classes)

    # parameter bookkeeping --------------------------------------------------

    def parameters(self):
        out = []
        for bb in self.backbones.values():
            # the pretrain head is not part of the adapted model
            out.extend(p for name, p in bb.params.items() if not name.startswith("head."))
        out.extend(self.inserted.values())
        out.extend(self.head.values())
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    @property
    def freeze_mask(self):
        return {p.id: p.trainable for p in self.parameters()}

    def param(self, pid):
        return self._by_id[pid]

    def backbone_hash(self):
        """SHA-256 over all backbone parameter values (task head excluded)."""
        h = hashlib.sha256()
        for role in sorted(self.backbones):
            bb = self.backbones[role]
            for name in sorted(bb.params):
                if name.startswith("head."):
                    continue
                h.update((role + "." + name).encode())
                h.update(bb.params[name].value.data.tobytes())
        return h.hexdigest()

    def params_hash(self):
        h = hashlib.sha256()
        for p in sorted(self.parameters(), key=lambda p: p.id):
            h.update(p.id.encode())
            h.update(p.value.data.tobytes())
        return h.hexdigest()

    @property
    def config(self):
        return next(iter(self.backbones.values())).config

    # forward ----------------------------------------------------------------

    def _injector(self):
        m = self.plan.method
        if m == "adapter":
            adapters = self.inserted

            def inject(i, tokens):
                if i == 0:
                    return tokens
                k = i - 1
                return adapter_forward(
                    tokens,
                    adapters[f"adapter.{k}.down.weight"].value,
                    adapters[f"adapter.{k}.up.weight"].value,
                    adapters[f"adapter.{k}.down.bias"].value,
                    adapters[f"adapter.{k}.up.bias"].value,
                )

            return inject
        if m == "vpt-shallow":
            prompts = self.inserted["prompt.0"].value
            depth = self.config.depth

            def inject(i, tokens):
                if i > depth - 1 and i != 0:
                    return tokens
                return vpt_inject(tokens, prompts, i, "shallow")

            return inject
        if m == "vpt-deep":
            inserted = self.inserted
            depth = self.config.depth

            def inject(i, tokens):
                if i >= max(depth, 1):
                    return tokens
                return vpt_inject(tokens, inserted[f"prompt.{i}"].value, i, "deep")

            return inject
        return None

    def expert_branches(self):
        branches = {}
        for tag in ("general", "medical"):
            bb = self.backbones[tag]
            adapters = [
                {
                    key: self.inserted[f"{tag}.adapter.{i}.{key}"]
                    for key in ("down.weight", "down.bias", "up.weight", "up.bias")
                }
                for i in range(bb.config.depth)
            ]
            branches[tag] = ExpertBranch(bb, adapters)
        return branches

    def gates(self):
        return [
            GateVector(self.inserted[f"gate.{k}.alpha"], self.plan.hyper["gate_param"])
            for k in range(num_gates(self.plan, self.config))
        ]

    def _side_features(self, batch):
        """Two-layer MLP on mean-pooled (frozen) patch embeddings."""
        bb = self.backbones["main"]
        from .backbone import patchify

        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        patches = Tensor(patchify(data, bb.config.patch_size))
        embedded = T.linear(patches, bb.value("patch_embed.weight"), bb.value("patch_embed.bias"))
        pooled = T.mean_axis(embedded, 1)
        z = T.gelu(T.linear(pooled, self.inserted["side.fc1.weight"].value,
                            self.inserted["side.fc1.bias"].value))
        return T.linear(z, self.inserted["side.fc2.weight"].value,
                        self.inserted["side.fc2.bias"].value)

    def features(self, batch):
        """Pooled (and, for MoE/GMoE/Sidetune, fused) pre-head features."""
        m = self.plan.method
        if m == "moe-adapter":
            branches = self.expert_branches()
            fg = branches["general"].backbone.forward_features(batch, branches["general"].injector())
            fm = branches["medical"].backbone.forward_features(batch, branches["medical"].injector())
            return gmoe_mod.moe_fuse(fg, fm)
        if m == "gmoe-adapter":
            branches = self.expert_branches()
            _, fused = gmoe_mod.gmoe_forward(
                batch, branches["general"], branches["medical"], self.gates(),
                self.plan.hyper["fusion_mode"],
                self.head["head.weight"].value, self.head["head.bias"].value,
            )
            return fused
        bb = self.backbones["main"]
        if m == "sidetune":
            frozen = bb.forward_features(batch)
            return sidetune_forward(batch, frozen, self._side_features,
                                    self.inserted["side.blend"].value)
        return bb.forward_features(batch, self._injector())

    def _apply_head(self, feats):
        if self.plan.method == "mlp3":
            z = T.gelu(T.linear(feats, self.head["head.fc1.weight"].value,
                                self.head["head.fc1.bias"].value))
            z = T.gelu(T.linear(z, self.head["head.fc2.weight"].value,
                                self.head["head.fc2.bias"].value))
            return T.linear(z, self.head["head.fc3.weight"].value,
                            self.head["head.fc3.bias"].value)
        return T.linear(feats, self.head["head.weight"].value, self.head["head.bias"].value)

    def forward(self, batch):
        return self._apply_head(self.features(batch))


def build_plan(method, backbones, num_classes=None, hyper=None, seed=0):
    """Build an AdaptedModel for one of the 11 methods.

    `method` may be a name or an AdaptationPlan; MoE/GMoE require two
    backbones with distinct domain tags.
    """
    plan = method if isinstance(method, AdaptationPlan) else make_plan(method, hyper)
    return AdaptedModel.build(plan, backbones, num_classes=num_classes, seed=seed)


# -- adapted checkpoints -----------------------------------------------------------


def save_adapted(model, path, backbone_paths):
    """Store plan, expert references (path + content hash) and every
    trainable parameter; frozen values live in the referenced checkpoints."""
    roles = sorted(model.backbones)
    if sorted(backbone_paths) != roles:
        raise CheckpointError(f"backbone_paths roles {sorted(backbone_paths)} != {roles}")
    refs = {
        role: {"path": str(backbone_paths[role]), "sha256": file_sha256(backbone_paths[role])}
        for role in roles
    }
    header = {
        "kind": "adapted",
        "format_version": 1,
        "plan": model.plan.to_dict(),
        "num_classes": model.num_classes,
        "backbone_refs": refs,
    }
    named = [(p.id, p.value.data) for p in sorted(model.trainable_parameters(), key=lambda p: p.id)]
    write_container(path, header, named)


def load_adapted(path):
    header, arrays = read_container(path)
    if header.get("kind") != "adapted":
        raise CheckpointError(f"{path}: kind={header.get('kind')!r}, want 'adapted'")
    from .checkpoint import load_backbone

    plan = AdaptationPlan.from_dict(header["plan"])
    backbones = []
    for role in sorted(header["backbone_refs"]):
        ref = header["backbone_refs"][role]
        ref_path = ref["path"]
        if not os.path.exists(ref_path):
            local = os.path.join(os.path.dirname(os.path.abspath(path)), os.path.basename(ref_path))
            if os.path.exists(local):
                ref_path = local
        if not os.path.exists(ref_path):
            raise CheckpointError(f"{path}: referenced backbone {ref['path']} not found")
        if file_sha256(ref_path) != ref["sha256"]:
            raise CheckpointError(f"{path}: content hash mismatch for {ref_path}")
        backbones.append(load_backbone(ref_path))
    if len(backbones) == 1:
        model = build_plan(plan, backbones[0], num_classes=header["num_classes"])
    else:
        model = build_plan(plan, backbones, num_classes=header["num_classes"])
    for pid, arr in arrays.items():
        p = model.param(pid)
        if p.value.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {pid}")
        p.value.data[...] = arr
    return model
