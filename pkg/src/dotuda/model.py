"""Vision transformer with one learnable class token per domain."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from dotuda import tensor as T
from dotuda.errors import ConfigError, DimensionError
from dotuda.tensor import Parameter, Tensor

HEAD_LR_SCALE = 10.0


@dataclass
class DotVitConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 1
    embed_dim: int = 32
    head_dim: int = 8
    num_heads: int = 4
    depth: int = 2
    num_classes: int = 4
    num_domain_tokens: int = 2
    mlp_ratio: float = 2.0
    init_std: float = 0.2

    def __post_init__(self):
        for field in ("image_size", "patch_size", "in_channels", "embed_dim", "head_dim", "num_heads", "num_classes"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.num_domain_tokens < 1:
            raise ConfigError("num_domain_tokens must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"num_heads * head_dim = {self.num_heads * self.head_dim} != embed_dim {self.embed_dim}"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.num_domain_tokens

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    def token_position(self, domain_index: int) -> int:
        """Sequence slot of a domain token: token 0 first, the rest at the tail."""
        if domain_index == 0:
            return 0
        return self.num_patches + domain_index

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderOutput(NamedTuple):
    source_oriented: Tensor
    target_oriented: Tensor
    tokens: Tensor | None = None


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """B x C x H x W -> B x M x (C*p*p), patches in row-major order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def self_attention(
    x: Tensor,
    weights: dict[str, Tensor],
    num_heads: int,
    head_dim: int,
    return_attention: bool = False,
):
    """Pre-norm multi-head self-attention with a residual connection.

    ``weights`` holds ``ln_gain, ln_bias, wq, wk, wv, wo, bo``. Query/key/value
    projections carry no bias; a key bias would not change the output at all.
    """
    if x.ndim != 3:
        raise DimensionError(f"self_attention expects B x N x D input, got {x.shape}")
    b, n, d_model = x.shape
    h = T.layer_norm(x, weights["ln_gain"], weights["ln_bias"])

    def heads(w):
        return (h @ w).reshape(b, n, num_heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = heads(weights["wq"]), heads(weights["wk"]), heads(weights["wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    attn = T.softmax(scores)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, num_heads * head_dim)
    out = x + (mixed @ weights["wo"] + weights["bo"])
    if return_attention:
        return out, attn
    return out


def mlp_block(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    h = T.layer_norm(x, weights["ln_gain"], weights["ln_bias"])
    h = T.gelu(h @ weights["w1"] + weights["b1"])
    return x + (h @ weights["w2"] + weights["b2"])


class DotVitModel:
    """Patch embedder, pre-norm encoder blocks, domain tokens and per-domain heads."""

    def __init__(self, config: DotVitConfig, seed: int = 0, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.reset_parameters(rng if rng is not None else np.random.default_rng(seed))

    def reset_parameters(self, rng: np.random.Generator):
        cfg = self.config
        std = cfg.init_std
        d = cfg.embed_dim
        patch_in = cfg.in_channels * cfg.patch_size**2
        p: dict[str, Parameter] = {}

        def add(name, value, lr_scale=1.0):
            p[name] = Parameter(value, name=name, lr_scale=lr_scale)

        add("patch.weight", trunc_normal(rng, (patch_in, d), std))
        add("patch.bias", np.zeros(d))
        add("pos_embed", trunc_normal(rng, (cfg.seq_len, d), std))
        # Independent draws so the domain tokens differ from step 0.
        add("domain_tokens", trunc_normal(rng, (cfg.num_domain_tokens, d), std))
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            for ln in ("ln1", "ln2"):
                add(pre + ln + ".gain", np.ones(d))
                add(pre + ln + ".bias", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                add(pre + "attn." + w, trunc_normal(rng, (d, d), std))
            add(pre + "attn.bo", np.zeros(d))
            add(pre + "mlp.w1", trunc_normal(rng, (d, cfg.mlp_dim), std))
            add(pre + "mlp.b1", np.zeros(cfg.mlp_dim))
            add(pre + "mlp.w2", trunc_normal(rng, (cfg.mlp_dim, d), std))
            add(pre + "mlp.b2", np.zeros(d))
        add("norm.gain", np.ones(d))
        add("norm.bias", np.zeros(d))
        for k in range(cfg.num_domain_tokens):
            add(f"heads.{k}.weight", trunc_normal(rng, (d, cfg.num_classes), std), HEAD_LR_SCALE)
            add(f"heads.{k}.bias", np.zeros(cfg.num_classes), HEAD_LR_SCALE)
        self.params = p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ConfigError(f"{name}: shape {value.shape} does not match model shape {p.data.shape}")
            p.data = value.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def block_weights(self, i: int) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        pre = f"blocks.{i}."
        g = self.params
        attn = {
            "ln_gain": g[pre + "ln1.gain"],
            "ln_bias": g[pre + "ln1.bias"],
            **{k: g[pre + "attn." + k] for k in ("wq", "wk", "wv", "wo", "bo")},
        }
        mlp = {
            "ln_gain": g[pre + "ln2.gain"],
            "ln_bias": g[pre + "ln2.bias"],
            **{k: g[pre + "mlp." + k] for k in ("w1", "b1", "w2", "b2")},
        }
        return attn, mlp

    # forward ------------------------------------------------------------------

    def _check_images(self, images) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise DimensionError(f"expected images of shape B x {expected}, got {arr.shape}")
        return arr

    def patch_embed(self, images) -> Tensor:
        arr = self._check_images(images)
        patches = Tensor(patchify(arr, self.config.patch_size))
        return patches @ self.params["patch.weight"] + self.params["patch.bias"]

    def sequence(self, images) -> Tensor:
        """[src; patches; other tokens...] plus positional embeddings."""
        cfg = self.config
        patches = self.patch_embed(images)
        b = patches.shape[0]
        tokens = self.params["domain_tokens"]
        first = T.expand(tokens[0:1].reshape(1, 1, cfg.embed_dim), (b, 1, cfg.embed_dim))
        parts = [first, patches]
        if cfg.num_domain_tokens > 1:
            rest = tokens[1:].reshape(1, cfg.num_domain_tokens - 1, cfg.embed_dim)
            parts.append(T.expand(rest, (b, cfg.num_domain_tokens - 1, cfg.embed_dim)))
        x = T.concat(parts, axis=1)
        return x + self.params["pos_embed"]

    def encode_tokens(self, images) -> Tensor:
        x = self.sequence(images)
        cfg = self.config
        for i in range(cfg.depth):
            attn_w, mlp_w = self.block_weights(i)
            x = self_attention(x, attn_w, cfg.num_heads, cfg.head_dim)
            x = mlp_block(x, mlp_w)
        return T.layer_norm(x, self.params["norm.gain"], self.params["norm.bias"])

    def encode(self, images, keep_tokens: bool = False) -> EncoderOutput:
        out = self.encode_tokens(images)
        cfg = self.config
        fs = out[:, cfg.token_position(0), :]
        ft = out[:, cfg.token_position(cfg.num_domain_tokens - 1), :]
        return EncoderOutput(fs, ft, out if keep_tokens else None)

    def domain_features(self, images, domain_index: int) -> Tensor:
        out = self.encode_tokens(images)
        return out[:, self.config.token_position(domain_index), :]

    def head(self, domain_index: int) -> tuple[Parameter, Parameter]:
        if not 0 <= domain_index < self.config.num_domain_tokens:
            raise IndexError(f"domain_index {domain_index} out of range for {self.config.num_domain_tokens} heads")
        return self.params[f"heads.{domain_index}.weight"], self.params[f"heads.{domain_index}.bias"]

    def classify(self, features: Tensor, domain_index: int) -> Tensor:
        """Logits of the head attached to ``domain_index``; no softmax."""
        w, b = self.head(domain_index)
        return T.as_tensor(features) @ w + b

    def head_fn(self, domain_index: int):
        """Plain numpy ``features -> logits`` map for the given head."""
        w, b = self.head(domain_index)
        return lambda feats: np.asarray(feats) @ w.data + b.data

    def copy(self) -> "DotVitModel":
        clone = DotVitModel.__new__(DotVitModel)
        clone.config = self.config
        clone.params = {n: Parameter(p.data.copy(), name=n, lr_scale=p.lr_scale) for n, p in self.params.items()}
        return clone
