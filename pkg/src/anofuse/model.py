"""Grouped dual encoder: a frozen random vision transformer and a frozen
random text transformer, each partitioned into N sequential groups.

Every vision group ends with a residual adapter on the patch tokens (the
multi-branch convolutional one, or a plain low-rank one for the ablation
baseline) and every text group ends with a plain low-rank residual. Only
adapters, text residuals, and the fusion gateway train; backbone weights
are drawn once from the model seed and never receive gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .adapter import ConvLoraAdapter, LowRankAdapter
from .config import RunConfig
from .errors import ConfigurationError, ShapeError
from .gateway import STATES, FusionGateway
from .tensor import Tensor, gelu, layer_norm, linear, matmul, parameter, reshape, softmax, transpose

MLP_RATIO = 4
TEXT_CAPACITY = 8

# tiny fixed vocabulary; prompts are token-id sequences over it
VOCAB = ("object", "flawless", "damaged")
PROMPTS = {"normal": ("object", "flawless"), "abnormal": ("object", "damaged")}


class TransformerBlock:
    """Pre-norm attention + MLP block with bias-free projections (frozen)."""

    def __init__(self, channels, heads, rng, name):
        c = channels
        self.heads = heads
        self.head_dim = c // heads
        std = c ** -0.5
        self.wq = parameter(rng.normal(0.0, std, (c, c)), trainable=False, name=f"{name}.wq")
        self.wk = parameter(rng.normal(0.0, std, (c, c)), trainable=False, name=f"{name}.wk")
        self.wv = parameter(rng.normal(0.0, std, (c, c)), trainable=False, name=f"{name}.wv")
        self.wo = parameter(rng.normal(0.0, std, (c, c)), trainable=False, name=f"{name}.wo")
        self.w1 = parameter(rng.normal(0.0, std, (c, MLP_RATIO * c)), trainable=False,
                            name=f"{name}.w1")
        self.w2 = parameter(rng.normal(0.0, (MLP_RATIO * c) ** -0.5, (MLP_RATIO * c, c)),
                            trainable=False, name=f"{name}.w2")
        self.name = name

    def forward(self, x):
        b, l, c = x.data.shape
        h = layer_norm(x)
        q = transpose(reshape(matmul(h, self.wq), (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))
        k = transpose(reshape(matmul(h, self.wk), (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))
        v = transpose(reshape(matmul(h, self.wv), (b, l, self.heads, self.head_dim)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (self.head_dim ** -0.5)
        attn = softmax(scores, axis=-1)
        o = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, l, c))
        x = x + matmul(o, self.wo)
        m = layer_norm(x)
        m = matmul(gelu(matmul(m, self.w1)), self.w2)
        return x + m

    __call__ = forward

    def named_params(self):
        return {t.name: t for t in (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2)}


class GroupedModel:
    def __init__(self, config: RunConfig, rng):
        config.validate()
        self.config = config
        c = config.channels
        p = config.patch_size
        self.grid = (config.image_size // p, config.image_size // p)
        self.n_patches = self.grid[0] * self.grid[1]
        n = config.n_groups

        self.patch_w = parameter(rng.normal(0.0, (p * p) ** -0.5, (p * p, c)),
                                 trainable=False, name="patch_embed.w")
        self.cls_token = parameter(rng.normal(0.0, 1.0, (c,)), trainable=False, name="cls_token")
        self.vis_pos = parameter(rng.normal(0.0, 0.5, (1 + self.n_patches, c)),
                                 trainable=False, name="vis_pos")
        self.tok_embed = parameter(rng.normal(0.0, 1.0, (len(VOCAB), c)),
                                   trainable=False, name="tok_embed")
        self.txt_pos = parameter(rng.normal(0.0, 0.5, (TEXT_CAPACITY, c)),
                                 trainable=False, name="txt_pos")

        self.vision_groups = [[TransformerBlock(c, config.heads, rng, f"vision.g{g}.b{i}")
                               for i in range(config.blocks_per_group)] for g in range(n)]
        self.text_groups = [[TransformerBlock(c, config.heads, rng, f"text.g{g}.b{i}")
                             for i in range(config.blocks_per_group)] for g in range(n)]

        if config.conv_lora_on:
            self.vision_adapters = [
                ConvLoraAdapter(c, config.rank, config.branch_kernels, rng,
                                name=f"vision.g{g}.adapter") for g in range(n)]
        else:
            self.vision_adapters = [
                LowRankAdapter(c, config.rank, rng, name=f"vision.g{g}.adapter")
                for g in range(n)]
        self.text_loras = [LowRankAdapter(c, config.rank, rng, name=f"text.g{g}.lora")
                           for g in range(n)]
        self.gateway = FusionGateway(c, n, config.resolved_gate_hidden(),
                                     config.temperature, dynamic=config.dfg_on, rng=rng)

        self.prompt_ids = {}
        for state in STATES:
            ids = tuple(VOCAB.index(w) for w in PROMPTS[state])
            if len(ids) > TEXT_CAPACITY:
                raise ConfigurationError(
                    f"prompt for {state!r} has {len(ids)} tokens, capacity {TEXT_CAPACITY}")
            self.prompt_ids[state] = ids

    # ------------------------------------------------------------------
    # vision path

    def patchify(self, images):
        """(B, 1, H, W) pixels -> (B, 1 + P, C) tokens with class token first."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) images, got {images.shape}")
        b, _, hpx, wpx = images.shape
        p = self.config.patch_size
        if hpx % p or wpx % p:
            raise ShapeError(f"image {hpx}x{wpx} not divisible by patch size {p}")
        gh, gw = hpx // p, wpx // p
        patches = images.reshape(b, gh, p, gw, p).transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, p * p)
        tokens = patches @ self.patch_w.data
        cls = np.broadcast_to(self.cls_token.data, (b, 1, tokens.shape[-1]))
        seq = np.concatenate([cls, tokens], axis=1) + self.vis_pos.data
        return Tensor(seq)

    def vision_forward(self, images, cache=None):
        """Run all vision groups; adapters update patch tokens after each group.

        Returns (V_list, v_cls_final): V_list[i] is the post-adapter patch
        token tensor of group i, v_cls_final the final class token. When
        `cache` is a dict it receives the token state entering each group
        ("entry", g) and the state after each group's blocks ("mid", g).
        """
        x = self.patchify(images)
        v_list = []
        for g in range(self.config.n_groups):
            if cache is not None:
                cache[("entry", g)] = x.data.copy()
            for block in self.vision_groups[g]:
                x = block(x)
            if cache is not None:
                cache[("mid", g)] = x.data.copy()
            x, v_i = self._apply_vision_adapter(x, g)
            v_list.append(v_i)
        return v_list, x[:, 0, :]

    def _apply_vision_adapter(self, x, g):
        patches = x[:, 1:, :]
        delta = self.vision_adapters[g](patches, self.grid)
        patches = patches + delta
        x = tt.concat([x[:, :1, :], patches], axis=1)
        return x, patches

    def vision_forward_from(self, g0, mid_state):
        """Resume the vision path at group g0's adapter, given the cached
        token state after g0's blocks. Used by the staged gradient check."""
        x = Tensor(mid_state)
        v_list = []
        x, v_i = self._apply_vision_adapter(x, g0)
        v_list.append(v_i)
        for g in range(g0 + 1, self.config.n_groups):
            for block in self.vision_groups[g]:
                x = block(x)
            x, v_i = self._apply_vision_adapter(x, g)
            v_list.append(v_i)
        return v_list, x[:, 0, :]

    # ------------------------------------------------------------------
    # text path

    def embed_prompt(self, state):
        ids = self.prompt_ids[state]
        seq = self.tok_embed.data[list(ids)] + self.txt_pos.data[:len(ids)]
        return Tensor(seq[None, :, :])

    def text_forward(self, cache=None):
        """Per-state, per-group pooled text features.

        Returns (t_feats, anchor): t_feats[g][s] is a (C,) tensor for group g
        and state index s; anchor is the final group's (normal, abnormal)
        pair, i.e. the unfused features used for classification.
        """
        t_feats = [[None] * len(STATES) for _ in range(self.config.n_groups)]
        for s, state in enumerate(STATES):
            x = self.embed_prompt(state)
            for g in range(self.config.n_groups):
                if cache is not None:
                    cache[("text", state, g)] = x.data.copy()
                for block in self.text_groups[g]:
                    x = block(x)
                x = x + self.text_loras[g](x)
                t_feats[g][s] = x[0, -1, :]
        anchor = tuple(t_feats[-1])
        return t_feats, anchor

    def text_forward_from(self, state, g0, entry_state):
        """Resume one state's text path at group g0 from a cached entry state.
        Returns the pooled features of groups g0.. for that state."""
        x = Tensor(entry_state)
        pooled = {}
        for g in range(g0, self.config.n_groups):
            for block in self.text_groups[g]:
                x = block(x)
            x = x + self.text_loras[g](x)
            pooled[g] = x[0, -1, :]
        return pooled

    # ------------------------------------------------------------------

    def forward(self, images, fusion=None, cache=None):
        """Full pipeline: encoders, gateway, per-level and aggregated maps."""
        v_list, v_cls = self.vision_forward(images, cache=cache)
        t_feats, anchor = self.text_forward(cache=cache)
        fusion = fusion or ("dynamic" if self.config.dfg_on else "static")
        amap = self.gateway.forward(v_list, t_feats, self.grid,
                                    (self.config.image_size, self.config.image_size),
                                    mode=fusion)
        return ModelOutputs(v_list=v_list, v_cls=v_cls, t_feats=t_feats,
                            anchor=anchor, amap=amap)

    def named_params(self):
        out = {}
        for t in (self.patch_w, self.cls_token, self.vis_pos, self.tok_embed, self.txt_pos):
            out[t.name] = t
        for groups in (self.vision_groups, self.text_groups):
            for blocks in groups:
                for block in blocks:
                    out.update(block.named_params())
        for ad in self.vision_adapters:
            out.update(ad.named_params())
        for lo in self.text_loras:
            out.update(lo.named_params())
        out.update(self.gateway.named_params())
        return out

    def trainable_params(self):
        return {k: v for k, v in self.named_params().items() if v.trainable}

    def trainable_count(self):
        return sum(v.data.size for v in self.trainable_params().values())


class ModelOutputs:
    def __init__(self, v_list, v_cls, t_feats, anchor, amap):
        self.v_list = v_list
        self.v_cls = v_cls
        self.t_feats = t_feats
        self.anchor = anchor
        self.amap = amap


def build_model(config: RunConfig, seed=None) -> GroupedModel:
    """Deterministic model construction; same seed gives identical params."""
    seed = config.model_seed if seed is None else seed
    return GroupedModel(config, np.random.default_rng(seed))
