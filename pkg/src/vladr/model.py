"""Trainable model components and frozen snapshots.

The model is intentionally small: a linear token embedder, a learnable
summary token at index 0, two pre-norm transformer encoder blocks with a
single attention head, a set of learnable attribute queries decoded through
one cross-attention layer, a per-identity prompt bank behind a frozen
projection, and a per-domain linear classifier that never survives to
inference.

Checkpoints store the retrieval-relevant parameters (backbone, queries,
decoder) in a versioned binary format; round-trips are lossless at float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"VLCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    dim: int = 32
    n_layers: int = 2
    ffn_expansion: int = 2
    n_attributes: int = 4
    prompt_length: int = 4
    prompt_hidden: int = 64


def _param(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


class Linear:
    def __init__(self, d_in, d_out, rng, scale=None):
        scale = d_in**-0.5 if scale is None else scale
        self.w = _param(rng, (d_in, d_out), scale)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = ad.tmean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = ad.tmean(xc * xc, axis=-1, keepdims=True)
        y = xc / ad.tsqrt(var + self.eps)
        return y * self.gain + self.bias

    def params(self):
        return {"gain": self.gain, "bias": self.bias}


class AttentionWeights:
    """Projection weights of one single-head attention layer."""

    def __init__(self, dim, rng, out_scale=None):
        s = dim**-0.5
        self.w_q = _param(rng, (dim, dim), s)
        self.w_k = _param(rng, (dim, dim), s)
        self.w_v = _param(rng, (dim, dim), s)
        self.w_o = _param(rng, (dim, dim), s if out_scale is None else out_scale)

    def __call__(self, query, key, value):
        return ad.cross_attention(query, key, value, self.w_q, self.w_k, self.w_v, self.w_o)

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


class EncoderBlock:
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, dim, expansion, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = AttentionWeights(dim, rng, out_scale=0.05)
        self.ln2 = LayerNorm(dim)
        hidden = dim * expansion
        self.ffn1 = Linear(dim, hidden, rng)
        self.ffn2 = Linear(hidden, dim, rng, scale=0.05)

    def __call__(self, x):
        a_in = self.ln1(x)
        attn_out, _ = self.attn(a_in, a_in, a_in)
        x = x + attn_out
        f_in = self.ln2(x)
        return x + self.ffn2(ad.relu(self.ffn1(f_in)))

    def params(self):
        out = {}
        for name, comp in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2),
                           ("ffn1", self.ffn1), ("ffn2", self.ffn2)):
            for k, v in comp.params().items():
                out[f"{name}.{k}"] = v
        return out


class Backbone:
    """Token embedder + summary token + encoder stack.

    The summary token occupies index 0 of the processed sequence; its output
    is the normalized global feature, the rest are the patch tokens.
    """

    def __init__(self, dim, n_layers, expansion, rng):
        self.dim = dim
        self.embed = Linear(dim, dim, rng, scale=0.02)
        self.embed.w.data += np.eye(dim)  # start near a pass-through embedding
        self.cls = _param(rng, (dim,), 0.02)
        self.layers = [EncoderBlock(dim, expansion, rng) for _ in range(n_layers)]

    def forward(self, tokens):
        """tokens (B, L, d) -> (global (B, d) unit-norm, patches (B, L, d))."""
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if tokens.ndim != 3 or tokens.shape[-1] != self.dim:
            raise ad.DimensionError(
                f"backbone expects (B, L, {self.dim}) tokens, got {tokens.shape}"
            )
        b = tokens.shape[0]
        x = self.embed(tokens)
        cls_row = ad.broadcast_to(ad.reshape(self.cls, (1, 1, self.dim)), (b, 1, self.dim))
        h = ad.concat([cls_row, x], axis=1)
        for layer in self.layers:
            h = layer(h)
        global_feat = ad.l2_normalize(h[:, 0, :])
        return global_feat, h[:, 1:, :]

    def params(self):
        out = {"embed.w": self.embed.w, "embed.b": self.embed.b, "cls": self.cls}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        return out


class AttributeQuerySet:
    """Learnable query vectors, one per local attribute."""

    def __init__(self, n_attributes, dim, rng):
        self.q = _param(rng, (n_attributes, dim), 0.02)

    def params(self):
        return {"q": self.q}


class LocalAttributeDecoder:
    """One cross-attention layer that reads patch tokens with the queries."""

    def __init__(self, dim, rng):
        self.attn = AttentionWeights(dim, rng)

    def params(self):
        return self.attn.params()


def decode_local_attributes(patches, queries: AttributeQuerySet, decoder: LocalAttributeDecoder):
    """Extract per-attribute features from patch tokens.

    Returns unit-norm features (B, N_a, d) and the attention map (B, N_a, L).
    """
    out, attn = decoder.attn(queries.q, patches, patches)
    return ad.l2_normalize(out), attn


class PromptBank:
    """Per-identity learnable context vectors behind a frozen projection.

    The projection (a fixed, seeded two-layer map) never changes after
    construction; only the context rows train, and only while their domain
    is the active one.
    """

    def __init__(self, dim, length, hidden, rng):
        self.dim = dim
        self.length = length
        self.proj_w1 = Tensor(rng.normal(0.0, (length * dim) ** -0.5, (length * dim, hidden)))
        self.proj_b1 = Tensor(np.zeros(hidden))
        self.proj_w2 = Tensor(rng.normal(0.0, hidden**-0.5, (hidden, dim)))
        self.proj_b2 = Tensor(np.zeros(dim))
        for t in (self.proj_w1, self.proj_b1, self.proj_w2, self.proj_b2):
            t.data.setflags(write=False)
        self.rows: dict[int, Tensor] = {}

    def register(self, ids, rng):
        for y in ids:
            if y in self.rows:
                raise ValueError(f"identity {y} already has a prompt row")
            self.rows[y] = _param(rng, (self.length, self.dim), 0.02)

    def ids(self):
        return list(self.rows)

    def trainable_rows(self, ids):
        return [self.rows[y] for y in ids]

    def freeze(self, ids):
        for y in ids:
            self.rows[y].requires_grad = False

    def encode_ids(self, ids):
        """Prompt features for ``ids``: (K, d), unit rows, grads reach rows only."""
        missing = [y for y in ids if y not in self.rows]
        if missing:
            raise KeyError(f"no prompt rows for identities {missing}")
        flat = ad.reshape(ad.stack([self.rows[y] for y in ids], axis=0),
                          (len(ids), self.length * self.dim))
        h = ad.ttanh(ad.matmul(flat, self.proj_w1) + self.proj_b1)
        return ad.l2_normalize(ad.matmul(h, self.proj_w2) + self.proj_b2)

    def encode_identity_prompt(self, y):
        return self.encode_ids([y])[0]

    def projection_hash(self) -> str:
        h = hashlib.sha256()
        for t in (self.proj_w1, self.proj_b1, self.proj_w2, self.proj_b2):
            h.update(t.data.tobytes())
        return h.hexdigest()


class ClassifierHead:
    """Linear identity classifier over the current domain; discarded after."""

    def __init__(self, dim, ids, rng):
        self.ids = list(ids)
        self.index = {y: i for i, y in enumerate(self.ids)}
        self.linear = Linear(dim, len(self.ids), rng, scale=0.01)

    def logits(self, feats):
        return self.linear(feats)

    def label_indices(self, identity_ids):
        return np.array([self.index[y] for y in identity_ids], dtype=np.intp)

    def parameters(self):
        return [self.linear.w, self.linear.b]


class ModelState:
    """All live components of the learner."""

    def __init__(self, params: ModelParams, backbone, queries, decoder, prompt_bank):
        self.params = params
        self.backbone = backbone
        self.queries = queries
        self.decoder = decoder
        self.prompt_bank = prompt_bank
        self.classifier: ClassifierHead | None = None

    @classmethod
    def init(cls, params: ModelParams, rng) -> "ModelState":
        backbone = Backbone(params.dim, params.n_layers, params.ffn_expansion, rng)
        queries = AttributeQuerySet(params.n_attributes, params.dim, rng)
        decoder = LocalAttributeDecoder(params.dim, rng)
        bank = PromptBank(params.dim, params.prompt_length, params.prompt_hidden, rng)
        return cls(params, backbone, queries, decoder, bank)

    def forward_backbone(self, tokens):
        return self.backbone.forward(tokens)

    def decode_local(self, patches):
        return decode_local_attributes(patches, self.queries, self.decoder)

    def new_classifier(self, ids, rng) -> ClassifierHead:
        self.classifier = ClassifierHead(self.params.dim, ids, rng)
        return self.classifier

    def named_parameters(self) -> dict[str, Tensor]:
        """Checkpoint-scope parameters: backbone, queries, decoder."""
        out = {}
        for k, v in self.backbone.params().items():
            out[f"backbone.{k}"] = v
        for k, v in self.queries.params().items():
            out[f"queries.{k}"] = v
        for k, v in self.decoder.params().items():
            out[f"decoder.{k}"] = v
        return out

    def backbone_parameters(self):
        return list(self.backbone.params().values())

    def head_parameters(self):
        return list(self.queries.params().values()) + list(self.decoder.params().values())


def _build_from_blocks(blocks: dict[str, np.ndarray]):
    """Reconstruct (backbone, queries, decoder) from named parameter blocks."""
    dim = blocks["backbone.embed.w"].shape[0]
    layer_ids = sorted(
        {int(k.split(".")[2]) for k in blocks if k.startswith("backbone.layers.")}
    )
    n_layers = len(layer_ids)
    hidden = blocks["backbone.layers.0.ffn1.w"].shape[1]
    expansion = hidden // dim
    n_attributes = blocks["queries.q"].shape[0]
    rng = np.random.default_rng(0)  # values are overwritten below
    backbone = Backbone(dim, n_layers, expansion, rng)
    queries = AttributeQuerySet(n_attributes, dim, rng)
    decoder = LocalAttributeDecoder(dim, rng)
    targets = {}
    for k, v in backbone.params().items():
        targets[f"backbone.{k}"] = v
    for k, v in queries.params().items():
        targets[f"queries.{k}"] = v
    for k, v in decoder.params().items():
        targets[f"decoder.{k}"] = v
    if set(targets) != set(blocks):
        missing = set(targets) ^ set(blocks)
        raise ValueError(f"parameter blocks do not match the architecture: {sorted(missing)}")
    for name, tensor in targets.items():
        if tensor.data.shape != blocks[name].shape:
            raise ValueError(
                f"block {name} has shape {blocks[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data = np.array(blocks[name], dtype=np.float64)
    return backbone, queries, decoder


class ModelSnapshot:
    """Frozen copy of the retrieval-relevant components.

    Immutable: parameters are read-only and all forwards run without
    recording gradients, so snapshots are safe to share across workers.
    """

    def __init__(self, backbone, queries, decoder):
        self.backbone = backbone
        self.queries = queries
        self.decoder = decoder
        for t in self.named_parameters().values():
            t.requires_grad = False
            t.data.setflags(write=False)

    @property
    def dim(self):
        return self.backbone.dim

    @property
    def n_attributes(self):
        return self.queries.q.data.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.backbone.params().items():
            out[f"backbone.{k}"] = v
        for k, v in self.queries.params().items():
            out[f"queries.{k}"] = v
        for k, v in self.decoder.params().items():
            out[f"decoder.{k}"] = v
        return out

    def forward_backbone(self, tokens):
        with ad.no_grad():
            return self.backbone.forward(tokens)

    def decode_local(self, patches):
        with ad.no_grad():
            return decode_local_attributes(patches, self.queries, self.decoder)


def snapshot(model: ModelState) -> ModelSnapshot:
    """Deep frozen copy of the model's backbone, queries and decoder."""
    blocks = {k: v.data.copy() for k, v in model.named_parameters().items()}
    return ModelSnapshot(*_build_from_blocks(blocks))


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, source):
    """Write named parameter blocks as float32; ``source`` may be a
    ModelState, ModelSnapshot, or a name->array mapping."""
    if isinstance(source, dict):
        blocks = source
    else:
        blocks = {k: v.data for k, v in source.named_parameters().items()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(blocks):
            arr = np.asarray(blocks[name])
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read named parameter blocks back as float64 arrays."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", head[4:8])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        blocks = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) < 4:
                raise ValueError(f"{path}: truncated block header")
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            payload = fh.read(count * 4)
            if len(payload) < count * 4:
                raise ValueError(f"{path}: truncated payload for block {name!r}")
            blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return blocks


def snapshot_from_checkpoint(path) -> ModelSnapshot:
    return ModelSnapshot(*_build_from_blocks(load_checkpoint(path)))


def checkpoint_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
