"""Full-model gradient verification against central finite differences.

Perturbing one parameter only invalidates the pipeline downstream of it,
so the finite-difference loop resumes from cached intermediate states:
gateway parameters re-run just the fusion and losses, text residuals re-run
their text groups onward, vision adapters re-run their group's adapter and
everything after it. Every partial evaluator is checked to reproduce the
reference loss bit-for-bit before any perturbation happens.
"""

from __future__ import annotations

import numpy as np

from .gateway import STATES
from .gradcheck import GradCheckResult, compare_gradients
from .losses import cls_loss, model_loss, seg_loss
from .tensor import Tensor, grad, no_grad


def randomize_trainables(model, seed, scale=0.2, out_boost=3.0):
    """Move every trainable tensor to a generic (non-zero) point.

    At the zero init the up-projections and gate output layers annihilate
    most gradient paths, so a meaningful full-model check needs a point in
    general position. Output-side tensors (up-projections, gate output
    layers) get a larger scale: every other tensor's gradient is
    proportional to them, and keeping those gradients well above the
    central-difference roundoff floor (|loss| * eps / 2h) is what makes a
    relative tolerance meaningful under the |gradient| > floor filter.
    """
    rng = np.random.default_rng(seed)
    params = model.trainable_params()
    for name in sorted(params):
        s = scale * (out_boost if name.endswith((".w_up", ".w2")) else 1.0)
        params[name].data[:] = rng.normal(0.0, s, params[name].data.shape)


def staged_gradient_check(model, images, masks, labels, loss_cfg,
                          h=1e-5, rtol=1e-4, floor=1e-8, progress=None):
    """Compare reverse-mode gradients of the total loss with central
    finite differences, elementwise over every trainable parameter."""
    fusion = "dynamic" if model.config.dfg_on else "static"
    tau = model.config.temperature
    pixel_hw = (model.config.image_size, model.config.image_size)
    lam_cls = loss_cfg.lambda_cls

    cache = {}
    out = model.forward(images, fusion=fusion, cache=cache)
    total, _, _, _ = model_loss(model, images, masks, labels, loss_cfg, outputs=out)
    reference = float(total.data)
    analytic = grad(total, model.trainable_params())

    cached_v = [Tensor(v.data) for v in out.v_list]
    cached_vcls = Tensor(out.v_cls.data)
    cached_t = [[Tensor(t.data) for t in row] for row in out.t_feats]

    def loss_tail(v_list, v_cls, t_feats):
        amap = model.gateway.forward(v_list, t_feats, model.grid, pixel_hw, mode=fusion)
        seg = seg_loss(amap.upsampled, masks, loss_cfg)
        cls = cls_loss(v_cls, (t_feats[-1][0], t_feats[-1][1]), tau, labels)
        return float(seg.data) + lam_cls * float(cls.data)

    def eval_gateway():
        return loss_tail(cached_v, cached_vcls, cached_t)

    def make_vision(g):
        mid = cache[("mid", g)]

        def eval_vision():
            v_tail, v_cls = model.vision_forward_from(g, mid)
            return loss_tail(cached_v[:g] + v_tail, v_cls, cached_t)
        return eval_vision

    def make_text(g):
        entries = {state: cache[("text", state, g)] for state in STATES}

        def eval_text():
            t_feats = [list(row) for row in cached_t]
            for s, state in enumerate(STATES):
                for gg, feat in model.text_forward_from(state, g, entries[state]).items():
                    t_feats[gg][s] = feat
            return loss_tail(cached_v, cached_vcls, t_feats)
        return eval_text

    def route(name):
        if name.startswith("gateway."):
            return eval_gateway
        head, rest = name.split(".g", 1)
        g = int(rest.split(".", 1)[0])
        return make_vision(g) if head == "vision" else make_text(g)

    params = model.trainable_params()
    numeric = {}
    with no_grad():
        for name in sorted(params):
            f = route(name)
            if f() != reference:
                raise AssertionError(f"staged evaluator for {name} diverges from reference")
            p = params[name]
            flat = p.data.ravel()
            g_out = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f()
                flat[i] = orig - h
                f_minus = f()
                flat[i] = orig
                g_out[i] = (f_plus - f_minus) / (2.0 * h)
            numeric[name] = g_out.reshape(p.data.shape)
            if progress:
                progress(name, flat.size)
    return compare_gradients(analytic, numeric, rtol=rtol, floor=floor)


def full_model_gradient_suite(config, seed=11, scale=0.2, h=1e-5, rtol=1e-4,
                              floor=1e-8, progress=None) -> GradCheckResult:
    """Build the model from config, move trainables to a generic point, and
    run the staged finite-difference comparison on one batch."""
    from .data import batch_arrays, gen_synthetic
    from .model import build_model

    model = build_model(config)
    randomize_trainables(model, seed, scale=scale)
    samples = gen_synthetic(config, config.data_seed, n=1, prefix="gradcheck")
    if samples[0].label == 0:
        # want a mixed mask so both focal branches are exercised
        for k in range(2, 50):
            samples = gen_synthetic(config, config.data_seed + k, n=1, prefix="gradcheck")
            if samples[0].label == 1:
                break
    images, masks, labels = batch_arrays(samples)
    return staged_gradient_check(model, images, masks, labels, config.loss_config(),
                                 h=h, rtol=rtol, floor=floor, progress=progress)


# ---------------------------------------------------------------------------
# selftest: oracle suites runnable from the CLI on a fresh checkout


def _selftest_config():
    from .config import RunConfig
    return RunConfig(n_groups=2, channels=16, heads=2, rank=2, gate_hidden=4,
                     patch_size=8, image_size=16, defect_min=3, defect_max=8)


def _auroc_pairs(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def _ap_sweep(scores, labels):
    n_pos = int(labels.sum())
    ap, prev_tp = 0.0, 0
    for t in np.unique(scores)[::-1]:
        sel = scores >= t
        tp = int(labels[sel].sum())
        if tp > prev_tp:
            ap += ((tp - prev_tp) / n_pos) * (tp / int(sel.sum()))
        prev_tp = tp
    return ap


def run_selftest(log=print):
    """Gradient checks and oracle suites; True when everything passes."""
    from .adapter import ConvLoraAdapter
    from .gateway import FusionGateway
    from .losses import dice_loss, focal_loss, seg_loss
    from .metrics import auroc, average_precision
    from .tensor import conv2d_same, reshape_2d_to_seq, reshape_seq_to_2d, softmax_vec

    ok = True

    def report(name, passed, detail=""):
        nonlocal ok
        ok = ok and passed
        log(f"[{'ok' if passed else 'FAIL'}] {name}{(' ' + detail) if detail else ''}")

    rng = np.random.default_rng(0)

    x = rng.normal(size=(2, 12, 5))
    back = reshape_2d_to_seq(reshape_seq_to_2d(x, (3, 4)))
    report("reshape roundtrip bit-exact", bool((back == x).all()))

    v = rng.normal(size=6) * 8
    w = softmax_vec(v)
    report("softmax normalization and shift invariance",
           abs(w.sum() - 1.0) < 1e-12
           and np.abs(w - softmax_vec(v + 3.0)).max() < 1e-12)

    xs = rng.normal(size=(1, 2, 5, 5))
    ks = rng.normal(size=(2, 2, 3, 3))
    ref = np.zeros((1, 2, 5, 5))
    for co in range(2):
        for hh in range(5):
            for ww in range(5):
                acc = 0.0
                for ci in range(2):
                    for i in range(3):
                        for j in range(3):
                            sh, sw = hh + i - 1, ww + j - 1
                            if 0 <= sh < 5 and 0 <= sw < 5:
                                acc += xs[0, ci, sh, sw] * ks[co, ci, i, j]
                ref[0, co, hh, ww] = acc
    got = conv2d_same(Tensor(xs), Tensor(ks)).data
    report("convolution vs nested-loop reference", np.abs(got - ref).max() < 1e-12)

    metric_ok = True
    for _ in range(200):
        n = int(rng.integers(2, 150))
        scores = rng.integers(0, 9, n).astype(np.float64)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        metric_ok &= auroc(scores, labels) == _auroc_pairs(scores, labels)
        metric_ok &= average_precision(scores, labels) == _ap_sweep(scores, labels)
    report("auroc/ap equal brute-force oracles (200 tied instances)", metric_ok)

    ad = ConvLoraAdapter(4, 2, (3, 5), rng=np.random.default_rng(3))
    ad.w_up.data[:] = rng.normal(0, 0.3, ad.w_up.data.shape)
    xa = rng.normal(size=(1, 9, 4))
    with no_grad():
        got = ad(Tensor(xa), (3, 3)).data
    parts = []
    for k in ad.branch_kernels:
        z = xa @ ad.w_down.data
        z = reshape_seq_to_2d(z, (3, 3))
        with no_grad():
            z = conv2d_same(Tensor(z), ad.conv_down[k]).data / k
            z = conv2d_same(Tensor(z), ad.conv_up[k]).data / k
        parts.append(reshape_seq_to_2d(reshape_2d_to_seq(z) @ ad.w_up.data, (3, 3)))
    with no_grad():
        fused = conv2d_same(Tensor(np.concatenate(parts, axis=1)), ad.fuse_1x1).data
    report("adapter matches straight-line composition",
           np.abs(got - reshape_2d_to_seq(fused)).max() < 1e-12)

    gw = FusionGateway(5, 2, 3, 0.07, dynamic=True, rng=np.random.default_rng(4))
    for state in gw.w2:
        gw.w2[state].data[:] = rng.normal(0, 0.4, gw.w2[state].data.shape)
    v_list = [Tensor(rng.normal(size=(2, 9, 5))) for _ in range(2)]
    t_feats = [[Tensor(rng.normal(size=(5,))) for _ in range(2)] for _ in range(2)]
    with no_grad():
        amap = gw.forward(v_list, t_feats, (3, 3), (9, 9), mode="dynamic")
    maps = []
    for i in range(2):
        vg = v_list[i].data.mean(axis=1)
        fused = []
        for s, state in enumerate(("normal", "abnormal")):
            logits = np.tanh(vg @ gw.w1[state].data) @ gw.w2[state].data
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            fused.append((e / e.sum(axis=1, keepdims=True))
                         @ np.stack([t_feats[j][s].data for j in range(2)]))
        vv = v_list[i].data
        nv = np.sqrt((vv * vv).sum(axis=2))
        sims = []
        for t in fused:
            nt = np.sqrt((t * t).sum(axis=1))
            sims.append((vv * t[:, None, :]).sum(axis=2) / (nv * nt[:, None]))
        z = np.stack(sims, axis=-1) / 0.07
        ez = np.exp(z - z.max(axis=-1, keepdims=True))
        maps.append((ez[..., 1] / ez.sum(axis=-1)).reshape(2, 3, 3))
    report("gateway matches straight-line composition",
           np.abs(amap.aggregated.data - np.mean(maps, axis=0)).max() < 1e-12)

    pred = rng.uniform(0.02, 0.98, (6, 6))
    target = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
    bce = -(target * np.log(pred) + (1 - target) * np.log(1 - pred)).mean()
    f0 = float(focal_loss(pred, target, gamma=0.0, alpha=0.5).data)
    report("focal(gamma=0, alpha=1/2) reduces to BCE/2", abs(f0 - 0.5 * bce) < 1e-12)

    from .config import LossConfig
    lc = LossConfig()
    seg = float(seg_loss(pred, target, lc).data)
    want = (float(focal_loss(pred, target, lc.focal_gamma, lc.focal_alpha).data)
            + float(dice_loss(pred, target, lc.dice_smooth).data))
    report("segmentation loss additivity", abs(seg - want) < 1e-12)

    res = full_model_gradient_suite(_selftest_config(), seed=39)
    report("small-model gradient suite vs finite differences",
           res.passed() and res.n_skipped == 0,
           f"(max rel err {res.max_rel_err:.2e} over {res.n_checked} params)")

    log("selftest " + ("PASSED" if ok else "FAILED"))
    return ok
