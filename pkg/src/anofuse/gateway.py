"""Vision-conditioned fusion of multi-level text features into per-level
anomaly maps.

For each vision level, a per-state gating MLP turns the level's global
context vector into softmax weights over the N text levels; the weighted
text features give that level its normal/abnormal descriptors, and a
temperature softmax over patchwise cosine similarities yields the level
map. The aggregated map is the plain mean across levels. Static mode
replaces the gate with a one-hot alignment of vision level i to text
level i; uniform mode averages all text levels equally.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import (NORM_FLOOR, Tensor, bilinear_upsample, concat, gap, matmul,
                     maximum_const, parameter, reshape, softmax, sqrt, tanh, tsum)

STATES = ("normal", "abnormal")
FUSION_MODES = ("dynamic", "static", "uniform")


class AnomalyMap:
    """Per-level maps, their mean, and the pixel-resolution upsampling.

    All map values lie strictly inside (0, 1). `fusion_weights[(i, s)]`
    keeps the (B, N) weight rows used at level i for state index s, for
    diagnostics and tests.
    """

    def __init__(self, per_level, aggregated, upsampled, fusion_weights):
        self.per_level = per_level
        self.aggregated = aggregated
        self.upsampled = upsampled
        self.fusion_weights = fusion_weights


class FusionGateway:
    def __init__(self, channels, n_groups, hidden, temperature, dynamic=True,
                 rng=None, name="gateway"):
        if temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {temperature}")
        if hidden < 1:
            raise ConfigurationError(f"gate hidden width must be >= 1, got {hidden}")
        self.channels = channels
        self.n_groups = n_groups
        self.hidden = hidden
        self.temperature = temperature
        self.dynamic = dynamic
        self.name = name
        self.w1 = {}
        self.w2 = {}
        if dynamic:
            rng = rng or np.random.default_rng(0)
            for state in STATES:
                self.w1[state] = parameter(rng.normal(0.0, channels ** -0.5, (channels, hidden)),
                                           name=f"{name}.{state}.w1")
                # zero init makes the initial fusion weights uniform
                self.w2[state] = parameter(np.zeros((hidden, n_groups)),
                                           name=f"{name}.{state}.w2")

    def gate_logits(self, v_global, state):
        """Two-layer gating MLP: (B, C) context -> (B, N) logits."""
        if not self.dynamic:
            raise ConfigurationError("gateway built without gating parameters")
        h = tanh(matmul(v_global, self.w1[state]))
        return matmul(h, self.w2[state])

    def fusion_weights(self, v_global, state):
        """Softmax-normalized weights over the N text levels, per image."""
        return softmax(self.gate_logits(v_global, state), axis=-1)

    def fuse_text(self, weights, feats):
        """Convex combination of per-level text features.

        weights: (B, N) rows summing to 1; feats: N tensors of shape (C,).
        """
        if len(feats) != self.n_groups:
            raise ShapeError(f"expected {self.n_groups} text features, got {len(feats)}")
        if not isinstance(weights, Tensor):
            weights = Tensor(weights)
        if weights.data.shape[-1] != self.n_groups:
            raise ShapeError(f"weight rows have {weights.data.shape[-1]} entries, "
                             f"expected {self.n_groups}")
        t_mat = concat([reshape(f, (1, self.channels)) for f in feats], axis=0)
        return matmul(weights, t_mat)

    def level_map(self, v_i, t_normal, t_abnormal, grid):
        """Patchwise two-way softmax over cosine similarities at temperature.

        Descriptors may be single (C,) vectors or per-image (B, C) rows.
        """
        b, l, c = v_i.data.shape
        if grid[0] * grid[1] != l:
            raise ShapeError(f"grid {grid} does not match {l} patches")
        nv = sqrt(maximum_const(tsum(v_i * v_i, axis=2), NORM_FLOOR))
        sims = []
        for t in (t_normal, t_abnormal):
            if t.data.ndim == 1:
                t = reshape(t, (1, c))
            t3 = reshape(t, (t.data.shape[0], 1, c))
            dot = tsum(v_i * t3, axis=2)
            nt = sqrt(maximum_const(tsum(t * t, axis=1), NORM_FLOOR))
            cos = dot / (nv * reshape(nt, (nt.data.shape[0], 1)))
            sims.append(reshape(cos, (b, l, 1)))
        probs = softmax(concat(sims, axis=2) * (1.0 / self.temperature), axis=-1)
        return reshape(probs[:, :, 1], (b, grid[0], grid[1]))

    def forward(self, v_list, t_feats, grid, pixel_hw, mode="dynamic",
                override_weights=None):
        """Per-level maps, their mean, and the upsampled mean.

        `override_weights(level, state_index)` may return a (B, N) array to
        force the fusion weights at one site (ablation and identity tests).
        """
        if mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion mode {mode!r} not in {FUSION_MODES}")
        if len(v_list) != self.n_groups or len(t_feats) != self.n_groups:
            raise ShapeError(f"expected {self.n_groups} levels")
        b = v_list[0].data.shape[0]
        n = self.n_groups
        per_level = []
        weights_used = {}
        for i in range(n):
            v_glob = gap(v_list[i])
            fused = []
            for s in range(len(STATES)):
                forced = override_weights(i, s) if override_weights else None
                if forced is not None:
                    w = Tensor(np.broadcast_to(np.asarray(forced, dtype=np.float64),
                                               (b, n)).copy())
                elif mode == "dynamic":
                    w = self.fusion_weights(v_glob, STATES[s])
                elif mode == "static":
                    row = np.zeros(n)
                    row[i] = 1.0
                    w = Tensor(np.broadcast_to(row, (b, n)).copy())
                else:
                    w = Tensor(np.full((b, n), 1.0 / n))
                weights_used[(i, s)] = w.data.copy()
                fused.append(self.fuse_text(w, [t_feats[j][s] for j in range(n)]))
            per_level.append(self.level_map(v_list[i], fused[0], fused[1], grid))
        agg = per_level[0]
        for m in per_level[1:]:
            agg = agg + m
        agg = agg * (1.0 / n)
        upsampled = bilinear_upsample(agg, pixel_hw)
        return AnomalyMap(per_level, agg, upsampled, weights_used)

    def named_params(self):
        out = {}
        for state in STATES:
            if state in self.w1:
                out[self.w1[state].name] = self.w1[state]
                out[self.w2[state].name] = self.w2[state]
        return out

    def param_count(self):
        return sum(t.data.size for t in self.named_params().values())
