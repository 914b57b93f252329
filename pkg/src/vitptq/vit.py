"""A small pre-norm Vision Transformer built on the tape ops.

Blocks accept an optional quantization context: an object with
``weight(layer, W) -> Tensor`` and ``act(point, x) -> Tensor``. Without one
the block runs in full precision. Layer names are ``q k v proj fc1 fc2``;
activation points are listed in :data:`ACT_POINTS`.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor

GELU = "gelu"
RELU = "relu"

LINEARS = ("q", "k", "v", "proj", "fc1", "fc2")
# where block activations are quantized, in forward order
ACT_POINTS = ("qkv_in", "q", "k", "v", "attn", "proj_in", "fc1_in", "fc2_in")
UNSIGNED_POINTS = ("attn",)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        hidden = self.embed_dim * self.mlp_ratio
        if hidden <= 0 or hidden != int(hidden):
            raise ValueError("embed_dim * mlp_ratio must be a positive integer")
        if self.depth < 1 or self.num_classes < 1:
            raise ValueError("depth and num_classes must be positive")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def mlp_hidden(self):
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def patch_dim(self):
        return self.in_chans * self.patch_size ** 2


class Linear:
    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng, out_features, in_features, std=0.02):
        w = np.clip(rng.normal(0, std, (out_features, in_features)), -2 * std, 2 * std)
        return cls(Tensor(w), Tensor(np.zeros(out_features)))

    def __call__(self, x, weight=None):
        return ops.linear(x, self.weight if weight is None else weight, self.bias)


class Block:
    def __init__(self, cfg, ln1, attn, ln2, mlp, activation=GELU):
        self.cfg = cfg
        self.ln1_g, self.ln1_b = ln1
        self.q, self.k, self.v, self.proj = attn
        self.ln2_g, self.ln2_b = ln2
        self.fc1, self.fc2 = mlp
        self.activation = activation

    @classmethod
    def init(cls, cfg, rng):
        d, h = cfg.embed_dim, cfg.mlp_hidden
        ln = lambda: (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        attn = tuple(Linear.init(rng, d, d) for _ in range(4))
        mlp = (Linear.init(rng, h, d), Linear.init(rng, d, h))
        return cls(cfg, ln(), attn, ln(), mlp)

    def linear(self, name):
        return getattr(self, name)

    def named_parameters(self):
        out = {"ln1.gamma": self.ln1_g, "ln1.beta": self.ln1_b}
        for name in LINEARS[:4]:
            lin = self.linear(name)
            out[f"{name}.weight"] = lin.weight
            out[f"{name}.bias"] = lin.bias
        out["ln2.gamma"] = self.ln2_g
        out["ln2.beta"] = self.ln2_b
        for name in LINEARS[4:]:
            lin = self.linear(name)
            out[f"{name}.weight"] = lin.weight
            out[f"{name}.bias"] = lin.bias
        return out

    def set_parameter(self, name, tensor):
        if name.startswith("ln"):
            attr = {"ln1.gamma": "ln1_g", "ln1.beta": "ln1_b",
                    "ln2.gamma": "ln2_g", "ln2.beta": "ln2_b"}[name]
            setattr(self, attr, tensor)
        else:
            layer, kind = name.split(".")
            setattr(self.linear(layer), kind, tensor)

    def _lin(self, name, x, ctx):
        lin = self.linear(name)
        w = lin.weight if ctx is None else ctx.weight(name, lin.weight)
        return ops.linear(x, w, lin.bias)

    @staticmethod
    def _act(point, x, ctx):
        return x if ctx is None else ctx.act(point, x)

    def attention_residual(self, x, ctx=None):
        """x + Attention(LN1(x))."""
        cfg = self.cfg
        b, t, d = x.shape
        nh, dh = cfg.heads, cfg.head_dim
        h = self._act("qkv_in", ops.layernorm(x, self.ln1_g, self.ln1_b, cfg.eps), ctx)

        def heads(name):
            y = self._act(name, self._lin(name, h, ctx), ctx)
            return ops.transpose(ops.reshape(y, (b, t, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = self._act("attn", ops.softmax(scores, axis=-1), ctx)
        o = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        o = self._act("proj_in", o, ctx)
        return ops.add(x, self._lin("proj", o, ctx))

    def mlp_input(self, r):
        return ops.layernorm(r, self.ln2_g, self.ln2_b, self.cfg.eps)

    def mlp_hidden(self, m, ctx=None):
        """Post-activation FC1 output (the FC2 input before quantization)."""
        a = self._lin("fc1", self._act("fc1_in", m, ctx), ctx)
        return ops.gelu(a) if self.activation == GELU else ops.relu(a)

    def mlp(self, m, ctx=None):
        return self._lin("fc2", self._act("fc2_in", self.mlp_hidden(m, ctx), ctx), ctx)

    def forward(self, x, ctx=None):
        r = self.attention_residual(x, ctx)
        return ops.add(r, self.mlp(self.mlp_input(r), ctx))

    __call__ = forward


def patchify(images, patch_size):
    """(B, C, H, W) array -> (B, num_patches, C*p*p) array, row-major patch order."""
    images = np.asarray(images)
    b, c, hh, ww = images.shape
    p = patch_size
    x = images.reshape(b, c, hh // p, p, ww // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (hh // p) * (ww // p), c * p * p)


class ViT:
    def __init__(self, cfg, patch_embed, cls_token, pos_embed, blocks, norm, head):
        self.config = cfg
        self.patch_embed = patch_embed
        self.cls_token = cls_token
        self.pos_embed = pos_embed
        self.blocks = list(blocks)
        self.norm_g, self.norm_b = norm
        self.head = head

    @classmethod
    def init(cls, cfg=None, seed=0):
        cfg = cfg or ViTConfig()
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        return cls(
            cfg,
            Linear.init(rng, d, cfg.patch_dim),
            Tensor(np.clip(rng.normal(0, 0.02, (1, 1, d)), -0.04, 0.04)),
            Tensor(np.clip(rng.normal(0, 0.02, (1, cfg.num_tokens, d)), -0.04, 0.04)),
            [Block.init(cfg, rng) for _ in range(cfg.depth)],
            (Tensor(np.ones(d)), Tensor(np.zeros(d))),
            Linear.init(rng, cfg.num_classes, d),
        )

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def dtype(self):
        return self.cls_token.dtype

    def named_parameters(self):
        out = {
            "patch_embed.weight": self.patch_embed.weight,
            "patch_embed.bias": self.patch_embed.bias,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named_parameters().items():
                out[f"blocks.{i}.{name}"] = t
        out["norm.gamma"] = self.norm_g
        out["norm.beta"] = self.norm_b
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def set_parameter(self, name, tensor):
        top = {"patch_embed.weight": (self.patch_embed, "weight"),
               "patch_embed.bias": (self.patch_embed, "bias"),
               "head.weight": (self.head, "weight"), "head.bias": (self.head, "bias"),
               "cls_token": (self, "cls_token"), "pos_embed": (self, "pos_embed"),
               "norm.gamma": (self, "norm_g"), "norm.beta": (self, "norm_b")}
        if name in top:
            obj, attr = top[name]
            old = getattr(obj, attr)
            if old.shape != tensor.shape:
                raise ValueError(f"{name}: shape {tensor.shape} != {old.shape}")
            setattr(obj, attr, tensor)
            return
        _, idx, rest = name.split(".", 2)
        self.blocks[int(idx)].set_parameter(rest, tensor)

    def activation_kinds(self):
        return [b.activation for b in self.blocks]

    def copy(self, dtype=None):
        """Deep copy; optionally cast every parameter (e.g. to float64)."""
        new = copy.copy(self)
        new.patch_embed = copy.copy(self.patch_embed)
        new.head = copy.copy(self.head)
        new.blocks = []
        for blk in self.blocks:
            nb = copy.copy(blk)
            for name in LINEARS:
                setattr(nb, name, copy.copy(blk.linear(name)))
            new.blocks.append(nb)
        for name, t in self.named_parameters().items():
            arr = t.data if dtype is None else t.data.astype(dtype)
            new.set_parameter(name, Tensor._wrap(arr))
        return new

    def embed(self, images, weight=None):
        cfg = self.config
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (cfg.in_chans, cfg.image_size, cfg.image_size):
            raise ValueError(f"expected images (B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}), "
                             f"got {images.shape}")
        patches = Tensor._wrap(patchify(images, cfg.patch_size).astype(self.dtype))
        tok = self.patch_embed(patches, weight)
        cls = ops.broadcast_to(self.cls_token, (images.shape[0], 1, cfg.embed_dim))
        return ops.add(ops.concat([cls, tok], axis=1), self.pos_embed)

    def head_logits(self, x, weight=None):
        cls = ops.index(ops.layernorm(x, self.norm_g, self.norm_b, self.config.eps), (slice(None), 0))
        return self.head(cls, weight)

    def forward(self, images):
        x = self.embed(images)
        for blk in self.blocks:
            x = blk(x)
        return self.head_logits(x)

    __call__ = forward

    def forward_tail(self, block_index, block_output):
        """Logits from the output of block ``block_index`` (remaining blocks + head)."""
        if not 0 <= block_index < self.depth:
            raise IndexError(f"block index {block_index} out of range for depth {self.depth}")
        cfg = self.config
        if tuple(block_output.shape[1:]) != (cfg.num_tokens, cfg.embed_dim):
            raise ValueError(f"block output shape {block_output.shape} does not match "
                             f"(*, {cfg.num_tokens}, {cfg.embed_dim})")
        x = block_output if isinstance(block_output, Tensor) else Tensor._wrap(np.asarray(block_output))
        for blk in self.blocks[block_index + 1:]:
            x = blk(x)
        return self.head_logits(x)


@dataclass
class BlockRecord:
    """Full-precision input/output activations of one block on the calibration set."""

    block_index: int
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        if self.inputs.shape != self.outputs.shape:
            raise ValueError("block record inputs and outputs must have equal shapes")

    def __len__(self):
        return self.inputs.shape[0]


def capture_block_records(model, calibration_batches):
    """Run the full-precision model and keep every block's input and output."""
    batches = [np.asarray(b) for b in calibration_batches]
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("calibration set is empty")
    ins = [[] for _ in model.blocks]
    outs = [[] for _ in model.blocks]
    for imgs in batches:
        x = model.embed(imgs)
        for i, blk in enumerate(model.blocks):
            ins[i].append(x.data)
            x = blk(x)
            outs[i].append(x.data)
    return [BlockRecord(i, np.concatenate(ins[i]), np.concatenate(outs[i])) for i in range(model.depth)]


def run_blocks(model, x, start, stop, batch_size=256):
    """Apply full-precision blocks [start, stop) to a batch of token arrays."""
    out = []
    for j in range(0, len(x), batch_size):
        t = Tensor._wrap(np.asarray(x[j:j + batch_size]))
        for blk in model.blocks[start:stop]:
            t = blk(t)
        out.append(t.data)
    return np.concatenate(out)


def predict_logits(model, images, batch_size=256):
    images = np.asarray(images)
    return np.concatenate([model(images[j:j + batch_size]).data for j in range(0, len(images), batch_size)])
