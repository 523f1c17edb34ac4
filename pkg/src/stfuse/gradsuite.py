"""Finite-difference verification of every differentiable operation.

Each op is checked on several random small shapes against central
differences. Outputs are reduced to a scalar through a random weighting that
is drawn once per case and reused on every re-evaluation (a plain sum would
make constant-output ops like softmax degenerate, and finite differencing
needs a pure f). Runs in 32-bit (h=1e-3, tol 1e-3) or 64-bit (h=1e-6,
tol 1e-5).
"""

from __future__ import annotations

import numpy as np

from . import nn_core as nn
from .alignment import CoordinateQuery
from .fusion import AttentionParams, CrossAttnParams
from .nn_core import GradCheckReport, Tensor, grad_check


def _make_ws(rng):
    cache = {}

    def ws(out: Tensor, tag: int = 0) -> Tensor:
        key = (tag, out.shape)
        if key not in cache:
            cache[key] = Tensor(np.asarray(rng.standard_normal(out.shape),
                                           dtype=out.data.dtype))
        return (out * cache[key]).sum()

    return ws


def _rand(rng, shape, dtype):
    return Tensor(np.asarray(rng.standard_normal(shape), dtype=dtype),
                  requires_grad=True)


def run_grad_suite(bits: int = 32, seed: int = 0, trials: int = 5):
    """Check every differentiable op on `trials` random shapes; returns a
    list of GradCheckReport, one per op (worst case over trials)."""
    dtype = np.float32 if bits == 32 else np.float64
    h = 1e-3 if bits == 32 else 1e-6
    tol = 1e-3 if bits == 32 else 1e-5
    master = np.random.default_rng(seed)
    reports = []

    def check(name, make_case):
        worst = 0.0
        for _ in range(trials):
            rng = np.random.default_rng(int(master.integers(1 << 31)))
            f, inputs = make_case(rng)
            rep = grad_check(f, inputs, h=h, tol=tol, name=name)
            worst = max(worst, rep.max_rel_err)
        reports.append(GradCheckReport(name=name, max_rel_err=worst, tol=tol))

    def dims(rng, lo=2, hi=5):
        return int(rng.integers(lo, hi + 1))

    def case_linear(rng):
        ws = _make_ws(rng)
        n, di, do = dims(rng), dims(rng), dims(rng)
        x, w = _rand(rng, (n, di), dtype), _rand(rng, (di, do), dtype)
        return (lambda x, w: ws(nn.linear(x, w))), [x, w]

    def case_softmax(rng):
        ws = _make_ws(rng)
        x = _rand(rng, (dims(rng), dims(rng)), dtype)
        return (lambda x: ws(nn.softmax_rows(x))), [x]

    def case_layer_norm(rng):
        ws = _make_ws(rng)
        n, d = dims(rng), dims(rng, 3, 6)
        x = _rand(rng, (n, d), dtype)
        gamma, beta = _rand(rng, (d,), dtype), _rand(rng, (d,), dtype)
        return (lambda x, g, b: ws(nn.layer_norm(x, g, b))), [x, gamma, beta]

    def case_sdp(rng):
        ws = _make_ws(rng)
        n, m, d = dims(rng), dims(rng), dims(rng)
        q, k, v = (_rand(rng, s, dtype) for s in ((n, d), (m, d), (m, d)))
        return (lambda q, k, v: ws(nn.sdp_attention(q, k, v))), [q, k, v]

    def case_mlp2(rng):
        ws = _make_ws(rng)
        n, di, dh, do = dims(rng), dims(rng), dims(rng), dims(rng)
        x = _rand(rng, (n, di), dtype)
        w1, b1 = _rand(rng, (di, dh), dtype), _rand(rng, (dh,), dtype)
        w2, b2 = _rand(rng, (dh, do), dtype), _rand(rng, (do,), dtype)
        return (lambda *a: ws(nn.mlp2(*a))), [x, w1, b1, w2, b2]

    def case_st_map(rng):
        from .encoders import st_map
        ws = _make_ws(rng)
        t, p, d = dims(rng), dims(rng), dims(rng)
        f = _rand(rng, (t, p, d), dtype)

        def run(f):
            f_s, f_t = st_map(f)
            return ws(f_s, 0) + ws(f_t, 1)

        return run, [f]

    def _attn(rng, d):
        # 1/sqrt(d)-scaled weights keep attention logits out of the
        # saturated-softmax regime where gradients vanish below the
        # finite-difference noise floor.
        def w():
            t = _rand(rng, (d, d), dtype)
            t.data *= d ** -0.5
            return t

        return AttentionParams(w_q=w(), w_k=w(), w_v=w())

    def case_cross_spatial(rng):
        from .fusion import cross_attn_spatial
        ws = _make_ws(rng)
        n, d = dims(rng), dims(rng, 3, 6)
        ap = _attn(rng, d)
        gamma, beta = _rand(rng, (d,), dtype), _rand(rng, (d,), dtype)
        f_vs, f_es = _rand(rng, (n, d), dtype), _rand(rng, (n, d), dtype)

        def run(f_vs, f_es, wq, wk, wv, gamma, beta):
            p = CrossAttnParams(AttentionParams(wq, wk, wv), gamma, beta)
            return ws(cross_attn_spatial(f_vs, f_es, p))

        return run, [f_vs, f_es, ap.w_q, ap.w_k, ap.w_v, gamma, beta]

    def case_cross_temporal(rng):
        from .fusion import cross_attn_temporal
        ws = _make_ws(rng)
        m, mv, d = dims(rng), dims(rng), dims(rng, 3, 6)
        ap = _attn(rng, d)
        gamma, beta = _rand(rng, (d,), dtype), _rand(rng, (d,), dtype)
        f_et, f_vt = _rand(rng, (m, d), dtype), _rand(rng, (mv, d), dtype)

        def run(f_et, f_vt, wq, wk, wv, gamma, beta):
            p = CrossAttnParams(AttentionParams(wq, wk, wv), gamma, beta)
            return ws(cross_attn_temporal(f_et, f_vt, p))

        return run, [f_et, f_vt, ap.w_q, ap.w_k, ap.w_v, gamma, beta]

    def case_match(rng):
        from .fusion import self_attn_match
        ws = _make_ws(rng)
        n, m, d = dims(rng), dims(rng), dims(rng)
        ap = _attn(rng, d)
        f_s, f_t = _rand(rng, (n, d), dtype), _rand(rng, (m, d), dtype)

        def run(f_s, f_t, wq, wk, wv):
            return ws(self_attn_match(f_s, f_t, AttentionParams(wq, wk, wv)))

        return run, [f_s, f_t, ap.w_q, ap.w_k, ap.w_v]

    def case_projector(rng):
        from .alignment import MLPParams, project_tokens
        ws = _make_ws(rng)
        k, d, dt = dims(rng), dims(rng), dims(rng)
        x = _rand(rng, (k, d), dtype)
        w1, b1 = _rand(rng, (d, 2 * d), dtype), _rand(rng, (2 * d,), dtype)
        w2, b2 = _rand(rng, (2 * d, dt), dtype), _rand(rng, (dt,), dtype)

        def run(x, w1, b1, w2, b2):
            return ws(project_tokens(x, MLPParams(w1, b1, w2, b2)))

        return run, [x, w1, b1, w2, b2]

    def case_coord(rng):
        from .alignment import AlignParams, coord_token, embed_coordinates
        ws = _make_ws(rng)
        k, dt = dims(rng), dims(rng)
        q = CoordinateQuery(p=(0.1, 0.2, 0.6, 0.7), t=(0.3, 0.8),
                            mask_p=True, mask_t=True)
        v_st = _rand(rng, (k, dt), dtype)
        w_p, w_t = _rand(rng, (4, dt), dtype), _rand(rng, (2, dt), dtype)
        alpha = _rand(rng, (), dtype)

        def run(v_st, w_p, w_t, alpha):
            params = AlignParams(projector=None, w_p=w_p, w_t=w_t, alpha=alpha)
            return ws(embed_coordinates(v_st, coord_token(q, params), alpha))

        return run, [v_st, w_p, w_t, alpha]

    def case_head(rng):
        from .grounding import GroundingHead, ground
        ws = _make_ws(rng)
        k, dt = dims(rng), dims(rng)
        tokens = _rand(rng, (k, dt), dtype)
        head = GroundingHead(
            pool=_rand(rng, (dt,), dtype),
            out_p=_rand(rng, (dt, 4), dtype), b_p=_rand(rng, (4,), dtype),
            out_t=_rand(rng, (dt, 2), dtype), b_t=_rand(rng, (2,), dtype))

        def run(tokens, pool, out_p, b_p, out_t, b_t):
            box, iv = ground(tokens, GroundingHead(pool, out_p, b_p, out_t, b_t))
            return ws(box, 0) + ws(iv, 1)

        return run, [tokens, head.pool, head.out_p, head.b_p, head.out_t, head.b_t]

    check("linear", case_linear)
    check("softmax_rows", case_softmax)
    check("layer_norm", case_layer_norm)
    check("sdp_attention", case_sdp)
    check("mlp2", case_mlp2)
    check("st_map", case_st_map)
    check("cross_attn_spatial", case_cross_spatial)
    check("cross_attn_temporal", case_cross_temporal)
    check("self_attn_match", case_match)
    check("projector", case_projector)
    check("coord_embedding", case_coord)
    check("grounding_head", case_head)
    return reports
