"""Configurable small Vision Transformer.

Pre-norm encoder blocks, exact-GELU MLP, learned positional embeddings and
class-token pooling (mean pooling behind a config flag). The forward pass
accepts an injector hook so adaptation methods can splice prompts or
adapters into the token stream without subclassing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Parameter, Tensor


class ConfigError(ValueError):
    """Backbone hyperparameters violate an invariant."""


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int
    patch_size: int
    in_channels: int
    dim: int
    depth: int
    heads: int
    num_classes: int
    mlp_ratio: int = 4
    pool: str = "cls"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pool not in ("cls", "mean"):
            raise ConfigError(f"pool must be 'cls' or 'mean', got {self.pool!r}")
        if min(self.image_size, self.patch_size, self.in_channels, self.dim, self.heads,
               self.num_classes, self.mlp_ratio) < 1 or self.depth < 0:
            raise ConfigError("all extents must be positive (depth may be 0)")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size**2

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "num_classes": self.num_classes,
            "mlp_ratio": self.mlp_ratio,
            "pool": self.pool,
        }


def param_shapes(config):
    """Ordered name -> shape map of the full parameter set (head included)."""
    d = config.dim
    hidden = config.mlp_ratio * d
    shapes = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.num_patches + 1, d),
    }
    for i in range(config.depth):
        b = f"block.{i}."
        shapes[b + "ln1.gain"] = (d,)
        shapes[b + "ln1.bias"] = (d,)
        shapes[b + "attn.qkv.weight"] = (d, 3 * d)
        shapes[b + "attn.qkv.bias"] = (3 * d,)
        shapes[b + "attn.proj.weight"] = (d, d)
        shapes[b + "attn.proj.bias"] = (d,)
        shapes[b + "ln2.gain"] = (d,)
        shapes[b + "ln2.bias"] = (d,)
        shapes[b + "mlp.down.weight"] = (d, hidden)
        shapes[b + "mlp.down.bias"] = (hidden,)
        shapes[b + "mlp.up.weight"] = (hidden, d)
        shapes[b + "mlp.up.bias"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def param_count(config):
    """Exact parameter total of the named set, head included."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) clipped to +-2 std, the usual ViT init."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


def _init_value(name, shape, rng):
    if name.endswith((".bias",)) or name == "cls_token":
        return np.zeros(shape)
    if name.endswith(".gain"):
        return np.ones(shape)
    return trunc_normal(rng, shape)


def patchify(images, patch_size):
    """(B, C, H, W) -> (B, num_patches, C*p*p), patches in row-major grid order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), c * p * p))


class Backbone:
    """ViT with a named parameter set and a free-form domain tag."""

    def __init__(self, config, params, domain_tag="general"):
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, p in params.items():
            if p.value.shape != expected[name]:
                raise ConfigError(
                    f"{name}: shape {p.value.shape} != expected {expected[name]}"
                )
        self.config = config
        self.params = params
        self.domain_tag = domain_tag

    @classmethod
    def init(cls, config, seed=0, domain_tag="general"):
        rng = np.random.default_rng(seed)
        params = {
            name: Parameter(name, Tensor(_init_value(name, shape, rng)))
            for name, shape in param_shapes(config).items()
        }
        return cls(config, params, domain_tag)

    def parameters(self):
        return list(self.params.values())

    def param(self, name):
        return self.params[name]

    def value(self, name):
        return self.params[name].value

    def copy(self):
        params = {
            name: Parameter(name, Tensor(p.value.data.copy()), p.trainable)
            for name, p in self.params.items()
        }
        return Backbone(self.config, params, self.domain_tag)

    def params_hash(self, names=None):
        """SHA-256 over raw f64 bytes of the given parameters (all by default)."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.params):
            h.update(name.encode())
            h.update(self.params[name].value.data.tobytes())
        return h.hexdigest()

    # -- forward --------------------------------------------------------------

    def _attention(self, x, prefix):
        b, t, d = x.shape
        heads = self.config.heads
        dh = d // heads
        qkv = T.linear(x, self.value(prefix + "attn.qkv.weight"),
                       self.value(prefix + "attn.qkv.bias"))
        q = T.narrow(qkv, 2, 0, d)
        k = T.narrow(qkv, 2, d, d)
        v = T.narrow(qkv, 2, 2 * d, d)
        # (B, T, D) -> (B, heads, T, dh)
        q = T.transpose(T.reshape(q, (b, t, heads, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, t, heads, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, t, heads, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return T.linear(out, self.value(prefix + "attn.proj.weight"),
                        self.value(prefix + "attn.proj.bias"))

    def _block(self, x, i):
        prefix = f"block.{i}."
        h = T.layer_norm(x, self.value(prefix + "ln1.gain"), self.value(prefix + "ln1.bias"))
        x = T.add(x, self._attention(h, prefix))
        h = T.layer_norm(x, self.value(prefix + "ln2.gain"), self.value(prefix + "ln2.bias"))
        h = T.linear(h, self.value(prefix + "mlp.down.weight"), self.value(prefix + "mlp.down.bias"))
        h = T.gelu(h)
        h = T.linear(h, self.value(prefix + "mlp.up.weight"), self.value(prefix + "mlp.up.bias"))
        return T.add(x, h)

    def embed(self, batch):
        """Patchify + affine embed + class token + positional embeddings."""
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        cfg = self.config
        if data.ndim != 4 or data.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"batch shape {data.shape} incompatible with config "
                f"(B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )
        b = data.shape[0]
        patches = Tensor(patchify(data, cfg.patch_size))
        x = T.linear(patches, self.value("patch_embed.weight"), self.value("patch_embed.bias"))
        cls = T.tile_batch(T.reshape(self.value("cls_token"), (1, cfg.dim)), b)
        x = T.concat([cls, x], axis=1)
        return T.add_vec(x, self.value("pos_embed"))

    def forward_features(self, batch, injector=None):
        """Pooled (B, D) embedding after the final layer norm.

        `injector(i, tokens)` is called before block i for i in 0..depth-1
        and once more with i == depth after the last block. It may change
        the token count only at i == 0 and must preserve width D.
        """
        x = self.embed(batch)
        base_tokens = x.shape[1]
        for i in range(self.config.depth):
            x = self._maybe_inject(injector, i, x, base_tokens)
            x = self._block(x, i)
        x = self._maybe_inject(injector, self.config.depth, x, base_tokens)
        x = T.layer_norm(x, self.value("final_ln.gain"), self.value("final_ln.bias"))
        if self.config.pool == "mean":
            return T.mean_axis(x, 1)
        return T.reshape(T.narrow(x, 1, 0, 1), (x.shape[0], self.config.dim))

    def _maybe_inject(self, injector, i, x, base_tokens):
        if injector is None:
            return x
        before = x.shape
        out = injector(i, x)
        if out.ndim != 3 or out.shape[-1] != self.config.dim:
            raise DimensionError(
                f"injector at layer {i} returned shape {out.shape}, want (B, T, {self.config.dim})"
            )
        if i > 0 and out.shape[1] != before[1]:
            raise DimensionError(f"injector changed token count at layer {i} (only layer 0 may)")
        return out

    def predict(self, features, head_weight=None, head_bias=None):
        """Affine map from pooled features to logits."""
        w = head_weight if head_weight is not None else self.value("head.weight")
        b = head_bias if head_bias is not None else self.value("head.bias")
        if features.shape[-1] != w.shape[0]:
            raise DimensionError(f"head width {w.shape[0]} != feature width {features.shape[-1]}")
        return T.linear(features, w, b)

    def forward(self, batch, injector=None):
        return self.predict(self.forward_features(batch, injector))
