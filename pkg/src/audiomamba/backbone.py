"""The AudioMamba network.

Patch embedding over the folded spectrogram map, four stages of SS blocks
(patch merging before stages 2-4, halving each spatial side and doubling
channels, so per-side extents run input/4, /8, /16, /32), an optional
transformer block interleaved after each SS block, and a pooled linear
classification head.

An SS block is pre-norm residual: branch A expands channels 2x, applies a
3x3 depthwise conv, SiLU, the four-direction SS2D scan and a norm; branch B
is a SiLU gate; their product is projected back and added to the input,
followed by a second residual FFN sub-block (GELU, ratio 4).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from . import frontend
from . import scan as S
from . import tensor as T
from .config import ModelConfig
from .tensor import ShapeError, Tensor


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32):
        scale = 1.0 / math.sqrt(d_in)
        self.w = Tensor((rng.standard_normal((d_in, d_out)) * scale).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Mlp:
    def __init__(self, rng, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def params(self):
        return _prefix({"fc1": self.fc1, "fc2": self.fc2})


def _prefix(children: dict) -> dict:
    out = {}
    for name, child in children.items():
        for k, v in child.params().items():
            out[f"{name}.{k}"] = v
    return out


def _map_to_tokens(f: Tensor):
    C, H, W = f.shape
    return T.reshape(T.transpose(f, (1, 2, 0)), (H * W, C)), H, W


def _tokens_to_map(tokens: Tensor, H: int, W: int) -> Tensor:
    C = tokens.shape[1]
    return T.transpose(T.reshape(tokens, (H, W, C)), (2, 0, 1))


class PatchEmbed:
    """Non-overlapping PxP patches of the single-channel grid, linearly
    projected and normalized."""

    def __init__(self, rng, patch_size, dim, dtype=np.float32):
        self.patch_size = patch_size
        self.proj = Linear(rng, patch_size * patch_size, dim, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def __call__(self, grid: Tensor):
        _, H, W = grid.shape
        P = self.patch_size
        if H % P or W % P:
            raise ShapeError(f"grid {H}x{W} not divisible by patch size {P}")
        Ht, Wt = H // P, W // P
        x = T.reshape(grid, (Ht, P, Wt, P))
        x = T.transpose(x, (0, 2, 1, 3))
        x = T.reshape(x, (Ht * Wt, P * P))
        tokens = self.norm(self.proj(x))
        return tokens, Ht, Wt

    def params(self):
        return _prefix({"proj": self.proj, "norm": self.norm})


class PatchMerge:
    """Concatenate 2x2 neighborhoods (4C), norm, project to 2C."""

    def __init__(self, rng, dim, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduce = Linear(rng, 4 * dim, 2 * dim, bias=False, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        C, H, W = f.shape
        if H % 2 or W % 2:
            raise ShapeError(f"patch merge needs even extents, got {H}x{W}")
        x = T.reshape(f, (C, H // 2, 2, W // 2, 2))
        x = T.transpose(x, (1, 3, 2, 4, 0))          # [H/2, W/2, 2, 2, C]
        x = T.reshape(x, ((H // 2) * (W // 2), 4 * C))
        x = self.reduce(self.norm(x))
        return _tokens_to_map(x, H // 2, W // 2)

    def params(self):
        return _prefix({"norm": self.norm, "reduce": self.reduce})


class SSBlock:
    def __init__(self, rng, dim, state_size, expand=2, conv_kernel=3,
                 chunk=S.DEFAULT_CHUNK, drop_path=0.0, dtype=np.float32):
        inner = expand * dim
        self.dim = dim
        self.inner = inner
        self.chunk = chunk
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.proj_a = Linear(rng, dim, inner, dtype=dtype)
        self.proj_b = Linear(rng, dim, inner, dtype=dtype)
        k = conv_kernel
        self.conv_w = Tensor((rng.standard_normal((inner, k, k)) / k).astype(dtype),
                             requires_grad=True)
        self.conv_b = Tensor(np.zeros(inner, dtype=dtype), requires_grad=True)
        self.ssm = [S.init_scan_params(rng, inner, state_size, dtype=dtype) for _ in range(4)]
        self.branch_norm = LayerNorm(inner, dtype=dtype)
        self.out_proj = Linear(rng, inner, dim, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, 4 * dim, dtype=dtype)

    def __call__(self, f: Tensor, training=False, rng=None) -> Tensor:
        tokens, H, W = _map_to_tokens(f)
        xn = self.norm1(tokens)
        a = self.proj_a(xn)
        a_map = _tokens_to_map(a, H, W)
        a_map = T.silu(T.depthwise_conv2d(a_map, self.conv_w, self.conv_b))
        a_map = S.ss2d_forward(self.ssm, a_map, chunk=self.chunk)
        a = self.branch_norm(_map_to_tokens(a_map)[0])
        b = T.silu(self.proj_b(xn))
        mixed = self.out_proj(T.mul(a, b))
        tokens = _residual(tokens, mixed, self.drop_path, training, rng)
        tokens = _residual(tokens, self.mlp(self.norm2(tokens)), self.drop_path, training, rng)
        return _tokens_to_map(tokens, H, W)

    def params(self):
        out = _prefix({"norm1": self.norm1, "proj_a": self.proj_a, "proj_b": self.proj_b,
                       "branch_norm": self.branch_norm, "out_proj": self.out_proj,
                       "norm2": self.norm2, "mlp": self.mlp})
        out["conv.w"] = self.conv_w
        out["conv.b"] = self.conv_b
        scan_fields = ("A_log", "D_skip", "W_delta_down", "W_delta_up",
                       "delta_bias", "W_B", "W_C")
        for i, p in enumerate(self.ssm):
            for fname in scan_fields:
                out[f"ssm.{i}.{fname}"] = getattr(p, fname)
        return out


def _residual(x: Tensor, branch: Tensor, drop_path: float, training: bool, rng) -> Tensor:
    if training and drop_path > 0.0 and rng is not None:
        if rng.random() < drop_path:
            return x
        keep = 1.0 / (1.0 - drop_path)
        return T.add(x, T.mul(branch, Tensor(np.asarray(keep, dtype=branch.dtype))))
    return T.add(x, branch)


def softmax_last(x: Tensor) -> Tensor:
    # shift by the (constant) row max; the expression is exactly softmax for
    # any constant shift, so its autodiff gradient is the softmax gradient
    m = Tensor(x.data.max(axis=-1, keepdims=True))
    e = T.exp(T.sub(x, m))
    return T.div(e, T.tsum(e, axis=-1, keepdims=True))


class TransformerBlock:
    """Pre-norm multi-head self-attention over flattened tokens + FFN."""

    def __init__(self, rng, dim, n_heads, drop_path=0.0, dtype=np.float32):
        if dim % n_heads:
            raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, 4 * dim, dtype=dtype)

    def attention(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output tokens, attention weights [heads, L, L])."""
        L, D = tokens.shape
        h = self.n_heads
        hd = D // h
        qkv = self.qkv(tokens)                                 # [L, 3D]
        qkv = T.transpose(T.reshape(qkv, (L, 3, h, hd)), (1, 2, 0, 3))  # [3,h,L,hd]
        q = T.reshape(T.take_rows(qkv, np.array([0])), (h, L, hd))
        k = T.reshape(T.take_rows(qkv, np.array([1])), (h, L, hd))
        v = T.reshape(T.take_rows(qkv, np.array([2])), (h, L, hd))
        scale = Tensor(np.asarray(1.0 / math.sqrt(hd), dtype=tokens.dtype))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), scale)   # [h,L,L]
        attn = softmax_last(scores)
        out = T.matmul(attn, v)                                # [h,L,hd]
        out = T.reshape(T.transpose(out, (1, 0, 2)), (L, D))
        return self.proj(out), attn

    def __call__(self, f: Tensor, training=False, rng=None) -> Tensor:
        tokens, H, W = _map_to_tokens(f)
        att, _ = self.attention(self.norm1(tokens))
        tokens = _residual(tokens, att, self.drop_path, training, rng)
        tokens = _residual(tokens, self.mlp(self.norm2(tokens)), self.drop_path, training, rng)
        return _tokens_to_map(tokens, H, W)

    def params(self):
        return _prefix({"norm1": self.norm1, "qkv": self.qkv, "proj": self.proj,
                        "norm2": self.norm2, "mlp": self.mlp})


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class AudioMambaModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.patch_embed = PatchEmbed(rng, config.patch_size, config.dims[0], dtype=dtype)
        total_blocks = sum(config.depths)
        rates = np.linspace(0.0, config.drop_path_rate, total_blocks) if total_blocks > 1 \
            else np.zeros(1)
        self.merges: list[Optional[PatchMerge]] = []
        self.stages: list[list] = []
        bi = 0
        for si, (depth, dim) in enumerate(zip(config.depths, config.dims)):
            self.merges.append(PatchMerge(rng, config.dims[si - 1], dtype=dtype) if si else None)
            blocks = []
            for _ in range(depth):
                blocks.append(SSBlock(rng, dim, config.state_size,
                                      expand=config.expand_ratio,
                                      conv_kernel=config.conv_kernel,
                                      chunk=config.scan_chunk,
                                      drop_path=float(rates[bi]), dtype=dtype))
                if config.with_transformer_interleave:
                    blocks.append(TransformerBlock(rng, dim, config.n_heads,
                                                   drop_path=float(rates[bi]), dtype=dtype))
                bi += 1
            self.stages.append(blocks)
        self.final_norm = LayerNorm(config.dims[-1], dtype=dtype)
        self.head = Linear(rng, config.dims[-1], config.n_classes, dtype=dtype)
        self.last_stage_extents: list[tuple[int, int]] = []

    # ---- forward ----------------------------------------------------------

    def forward_grid(self, grid, training=False, rng=None) -> Tensor:
        """grid: [1, H, W] array or Tensor -> logits [n_classes]."""
        if not isinstance(grid, Tensor):
            grid = Tensor(np.asarray(grid, dtype=self.dtype))
        tokens, H, W = self.patch_embed(grid)
        f = _tokens_to_map(tokens, H, W)
        self.last_stage_extents = []
        for merge, blocks in zip(self.merges, self.stages):
            if merge is not None:
                f = merge(f)
            for blk in blocks:
                f = blk(f, training=training, rng=rng)
            self.last_stage_extents.append((f.shape[1], f.shape[2]))
        tokens, _, _ = _map_to_tokens(f)
        pooled = T.tmean(self.final_norm(tokens), axis=0, keepdims=True)  # [1, C]
        logits = self.head(pooled)
        return T.reshape(logits, (self.config.n_classes,))

    def classify_forward(self, mel: frontend.MelSpectrogram, training=False, rng=None) -> Tensor:
        expected = (self.config.input_frames, self.config.n_mels)
        if mel.values.shape != expected:
            raise ShapeError(f"mel spectrogram must be padded to {expected}, "
                             f"got {mel.values.shape}")
        grid = frontend.mel_to_grid(mel, self.config.n_windows)
        return self.forward_grid(grid, training=training, rng=rng)

    # ---- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.patch_embed.params().items():
            out[f"patch_embed.{k}"] = v
        for si, (merge, blocks) in enumerate(zip(self.merges, self.stages)):
            if merge is not None:
                for k, v in merge.params().items():
                    out[f"merges.{si}.{k}"] = v
            for bi, blk in enumerate(blocks):
                for k, v in blk.params().items():
                    out[f"stages.{si}.{bi}.{k}"] = v
        for k, v in self.final_norm.params().items():
            out[f"final_norm.{k}"] = v
        for k, v in self.head.params().items():
            out[f"head.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def count_params(self) -> int:
        return sum(p.size for p in self.parameters())

    # ---- checkpoints ------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        tensors = {name: p.data for name, p in self.named_parameters().items()}
        tensors[ckpt.CONFIG_KEY] = ckpt.encode_text(model_config_text(self.config))
        ckpt.save_tensors(path, tensors)

    def load_checkpoint(self, path, strictness: str = "strict") -> ckpt.LoadReport:
        if strictness not in ("strict", "permissive"):
            raise ValueError(f"strictness must be strict|permissive, got '{strictness}'")
        archive = ckpt.load_tensors(path)
        archive.pop(ckpt.CONFIG_KEY, None)
        params = self.named_parameters()
        report = ckpt.LoadReport()
        for name, p in params.items():
            if name not in archive:
                report.missing.append(name)
                continue
            arr = archive[name]
            if arr.shape != p.shape:
                report.shape_conflicts.append(name)
                continue
            p.data[...] = arr.astype(p.dtype)
            report.loaded.append(name)
        report.unexpected = [n for n in archive if n not in params]
        if strictness == "strict" and not report.clean:
            raise ckpt.CheckpointFormatError(
                f"strict load failed: missing={report.missing[:5]}... "
                f"unexpected={report.unexpected[:5]}... "
                f"shape_conflicts={report.shape_conflicts[:5]}")
        return report


def model_config_text(config: ModelConfig) -> str:
    from dataclasses import fields
    lines = []
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"model.{f.name}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# analytic parameter accounting (no allocation)
# ---------------------------------------------------------------------------

def _scan_param_count(inner: int, state: int) -> int:
    rank = max(1, inner // 16)
    return (inner * state          # A_log
            + inner                # D_skip
            + inner * rank + rank * inner  # delta projection
            + inner                # delta_bias
            + 2 * inner * state)   # W_B, W_C


def _ss_block_count(dim: int, state: int, expand: int, kernel: int) -> int:
    inner = expand * dim
    return (2 * dim                       # norm1
            + 2 * (dim * inner + inner)   # proj_a, proj_b
            + inner * kernel * kernel + inner  # dwconv
            + 4 * _scan_param_count(inner, state)
            + 2 * inner                   # branch norm
            + inner * dim + dim           # out_proj
            + 2 * dim                     # norm2
            + dim * 4 * dim + 4 * dim + 4 * dim * dim + dim)  # mlp


def transformer_block_count(dim: int) -> int:
    return (2 * dim + dim * 3 * dim + 3 * dim + dim * dim + dim
            + 2 * dim + 8 * dim * dim + 5 * dim)


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Exact per-module trainable-parameter counts from shapes alone."""
    out = {"patch_embed": config.patch_size ** 2 * config.dims[0] + 3 * config.dims[0]}
    for si, (depth, dim) in enumerate(zip(config.depths, config.dims)):
        n = depth * _ss_block_count(dim, config.state_size, config.expand_ratio,
                                    config.conv_kernel)
        if config.with_transformer_interleave:
            n += depth * transformer_block_count(dim)
        if si:
            prev = config.dims[si - 1]
            n += 2 * 4 * prev + 4 * prev * 2 * prev
        out[f"stage{si + 1}"] = n
    out["head"] = 2 * config.dims[-1] + config.dims[-1] * config.n_classes + config.n_classes
    return out


def count_params(config: ModelConfig) -> int:
    return sum(param_breakdown(config).values())
