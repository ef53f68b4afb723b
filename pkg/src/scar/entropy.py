"""Autoregressive entropy model over RVQ index sequences.

A 2-layer GRU reads the indices decoded so far. For the full model
(``gru-attn``) the spatial embedding of the anchor is projected to a single
query that attends over the GRU hidden states; the attended context plus the
query feeds an MLP head whose softmax is the distribution of the next index.
Three reduced architectures (``mlp``, ``branched-mlp``, ``gru``) share the
same head and training code.

All gradients are derived by hand; ``tests/test_entropy.py`` checks them
against central finite differences.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ARCH_TAGS, CodecConfig, DataError, ParameterError, Rng, ScarError
from .context import binarized_view

LN2 = np.log(2.0)


class TrainingError(ScarError):
    """Training produced a non-finite loss."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class EntropyModel:
    arch: str
    K_base: int
    K_res: int
    spatial_dim: int
    embed: int
    hidden: int
    d_model: int
    head_hidden: int
    layers: int
    p_floor: float
    params: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: CodecConfig, spatial_dim: int, rng: Rng | None = None,
                    arch: str | None = None, zero: bool = False) -> "EntropyModel":
        arch = config.arch if arch is None else arch
        if arch not in ARCH_TAGS:
            raise ParameterError(f"unknown architecture tag {arch!r}")
        model = cls(arch, config.K_base, config.K_res, spatial_dim, config.embed, config.hidden,
                    config.d_model, config.head_hidden, config.gru_layers, config.p_floor)
        model.params = model._init_params(rng or Rng(config.seed), zero)
        return model

    @property
    def uses_gru(self) -> bool:
        return self.arch in ("gru", "gru-attn")

    @property
    def uses_spatial(self) -> bool:
        return self.arch != "gru"

    def shapes(self) -> dict:
        E, H, S, d, Hh = self.embed, self.hidden, self.spatial_dim, self.d_model, self.head_hidden
        s = {"emb_b": (self.K_base, E), "emb_r": (self.K_res, E)}
        if self.uses_gru:
            for l in range(self.layers):
                s[f"gru{l}_wx"] = (E if l == 0 else H, 3 * H)
                s[f"gru{l}_wh"] = (H, 3 * H)
                s[f"gru{l}_bx"] = (3 * H,)
                s[f"gru{l}_bh"] = (3 * H,)
            s["start"] = (self.layers, H)
        if self.arch == "gru-attn":
            s["attn_wq"] = (S, d)
            s["attn_wk"] = (H, d)
            s["attn_wv"] = (H, d)
            head_in = d
        elif self.arch == "gru":
            head_in = H
        elif self.arch == "mlp":
            head_in = S + E
        else:
            half = max(Hh // 2, 1)
            s["br_ws"], s["br_bs"] = (S, half), (half,)
            s["br_wt"], s["br_bt"] = (E, half), (half,)
            head_in = 2 * half
        s["head_w1"], s["head_b1"] = (head_in, Hh), (Hh,)
        s["head_w2"], s["head_b2"] = (Hh, max(self.K_base, self.K_res)), (max(self.K_base, self.K_res),)
        return s

    def _init_params(self, rng: Rng, zero: bool) -> dict:
        params = {}
        for name, shape in self.shapes().items():
            if zero or len(shape) == 1:
                params[name] = np.zeros(shape)
            elif name.startswith("emb"):
                params[name] = rng.normal(0.0, 1.0, shape)
            elif name == "start":
                params[name] = rng.normal(0.0, 0.1, shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        return params

    def codebook_size(self, stage: int) -> int:
        return self.K_base if stage == 1 else self.K_res

    def copy(self) -> "EntropyModel":
        m = EntropyModel(self.arch, self.K_base, self.K_res, self.spatial_dim, self.embed, self.hidden,
                         self.d_model, self.head_hidden, self.layers, self.p_floor)
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- serialization ----------------------------------------------------
    def to_bytes(self) -> bytes:
        """Ordered tensors: 16-byte name, ndim u8, dims u32, float32 data."""
        buf = io.BytesIO()
        buf.write(struct.pack("<I", len(self.params)))
        for name in self.shapes():
            arr = self.params[name]
            buf.write(name.encode("ascii").ljust(16, b"\0"))
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f4").tobytes())
        return buf.getvalue()

    def load_bytes(self, data: bytes) -> "EntropyModel":
        """Copy of this model (same architecture) with weights read from ``data``."""
        m = self.copy()
        expected = self.shapes()
        try:
            (count,) = struct.unpack_from("<I", data, 0)
            off = 4
            for _ in range(count):
                name = data[off:off + 16].rstrip(b"\0").decode("ascii")
                (ndim,) = struct.unpack_from("<B", data, off + 16)
                shape = struct.unpack_from(f"<{ndim}I", data, off + 17)
                off += 17 + 4 * ndim
                size = int(np.prod(shape))
                if name not in expected or tuple(expected[name]) != tuple(shape):
                    raise DataError(f"unexpected tensor {name} {shape}")
                m.params[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float64)
                off += 4 * size
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise DataError(f"malformed model weights: {exc}") from exc
        if off != len(data) or count != len(expected):
            raise DataError("model weight record size mismatch")
        return m

    def rounded(self) -> "EntropyModel":
        """The model exactly as a decoder reconstructs it from float32 weights."""
        return self.load_bytes(self.to_bytes())


# -- GRU cell -------------------------------------------------------------

def gru_step(x, h, wx, wh, bx, bh):
    """One GRU update; gate order in the packed weights is (reset, update, candidate)."""
    H = h.shape[-1]
    a = x @ wx + bx
    b = h @ wh + bh
    r = _sigmoid(a[:, :H] + b[:, :H])
    z = _sigmoid(a[:, H:2 * H] + b[:, H:2 * H])
    n = np.tanh(a[:, 2 * H:] + r * b[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, b[:, 2 * H:])


def gru_step_backward(dh_new, cache, wx, wh):
    x, h, r, z, n, bn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dbn = dan * r
    dr = dan * bn
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    da = np.concatenate([dar, daz, dan], axis=1)
    db = np.concatenate([dar, daz, dbn], axis=1)
    dx = da @ wx.T
    dh = dh + db @ wh.T
    return dx, dh, x.T @ da, h.T @ db, da.sum(0), db.sum(0)


# -- incremental (coding-time) interface ------------------------------------

@dataclass(frozen=True)
class HistoryState:
    """Decoded-so-far state of a batch of anchors that are all at the same stage.

    ``states`` holds the top-layer GRU output after each consumed index
    (the learned start state is prepended by the model when attending);
    ``h`` the current per-layer recurrent state; ``emb_sum`` the running sum
    of index embeddings used by the MLP architectures.
    """

    states: tuple
    h: np.ndarray | None
    emb_sum: np.ndarray
    batch: int
    consumed: int = 0

    def select(self, rows) -> "HistoryState":
        rows = np.asarray(rows)
        return HistoryState(tuple(s[rows] for s in self.states),
                            None if self.h is None else self.h[:, rows],
                            self.emb_sum[rows], len(rows), self.consumed)


def start_history(model: EntropyModel, batch: int) -> HistoryState:
    h = None
    if model.uses_gru:
        h = np.repeat(model.params["start"][:, None, :], batch, axis=1)
    return HistoryState((), h, np.zeros((batch, model.embed)), batch, 0)


def _head(model, u):
    p = model.params
    pre = u @ p["head_w1"] + p["head_b1"]
    act = _silu(pre)
    return act @ p["head_w2"] + p["head_b2"], (u, pre, act)


def _floor(sm, model, K):
    f = model.p_floor
    return (sm + f) / (1.0 + K * f)


def _context(model, hs, G, mean_emb):
    """Head input for a batch at one stage. ``G`` is (B, m, H) including the start state."""
    p = model.params
    if model.arch == "gru-attn":
        q = hs @ p["attn_wq"]
        keys = G @ p["attn_wk"]
        vals = G @ p["attn_wv"]
        scores = (keys @ q[:, :, None])[:, :, 0] / np.sqrt(model.d_model)
        att = _softmax(scores)
        c = (att[:, None, :] @ vals)[:, 0]
        return q + c, ("attn", q, keys, vals, att, c)
    if model.arch == "gru":
        return G[:, -1], ("gru",)
    if model.arch == "mlp":
        return np.concatenate([hs, mean_emb], axis=1), ("mlp",)
    ps = hs @ p["br_ws"] + p["br_bs"]
    pt = mean_emb @ p["br_wt"] + p["br_bt"]
    return np.concatenate([_silu(ps), _silu(pt)], axis=1), ("branched", ps, pt)


def attention_context(model: EntropyModel, h_spatial, G):
    """The attended context ``c_attn`` alone, for inspection and tests."""
    _, cache = _context(model, np.atleast_2d(h_spatial), G, None)
    return cache[5]


def predict_distribution(model: EntropyModel, h_spatial, hist: HistoryState, stage: int):
    """Probabilities (B, K_stage) of the stage-``stage`` index given the history."""
    if hist.consumed != stage - 1:
        raise ParameterError(f"history holds {hist.consumed} stages; stage {stage} needs {stage - 1}")
    hs = np.atleast_2d(np.asarray(h_spatial, dtype=np.float64))
    G = None
    if model.uses_gru:
        top = model.params["start"][-1]
        G = np.stack([np.broadcast_to(top, (hist.batch, model.hidden))] + list(hist.states), axis=1)
    mean_emb = hist.emb_sum / max(stage - 1, 1)
    u, _ = _context(model, hs, G, mean_emb)
    K = model.codebook_size(stage)
    logits, _ = _head(model, u)
    return _floor(_softmax(logits[:, :K]), model, K)


def advance(hist: HistoryState, k, stage: int, model: EntropyModel) -> HistoryState:
    """Consume the decoded stage-``stage`` indices ``k`` (B,)."""
    k = np.asarray(k, dtype=np.int64).reshape(-1)
    if hist.consumed != stage - 1:
        raise ParameterError("advance called out of order")
    if np.any(k < 0) or np.any(k >= model.codebook_size(stage)):
        raise ParameterError("index out of range for stage")
    p = model.params
    emb = (p["emb_b"] if stage == 1 else p["emb_r"])[k]
    if not model.uses_gru:
        return HistoryState((), None, hist.emb_sum + emb, hist.batch, hist.consumed + 1)
    x = emb
    hs = []
    for l in range(model.layers):
        x, _ = gru_step(x, hist.h[l], p[f"gru{l}_wx"], p[f"gru{l}_wh"], p[f"gru{l}_bx"], p[f"gru{l}_bh"])
        hs.append(x)
    return HistoryState(hist.states + (x,), np.stack(hs), hist.emb_sum + emb, hist.batch, hist.consumed + 1)


# -- teacher-forced training path --------------------------------------------

def forward_backward(model: EntropyModel, h_spatial, indices, grad: bool = True):
    """Teacher-forced code length of ``indices`` (B, M) in bits.

    Returns ``(total_bits, per_symbol_bits, grads)`` where ``grads`` maps each
    parameter name to its gradient and ``"h_spatial"`` to the gradient with
    respect to the spatial embeddings. ``grads`` is None when ``grad=False``.
    """
    p = model.params
    idx = np.asarray(indices, dtype=np.int64)
    hs = np.asarray(h_spatial, dtype=np.float64)
    B, M = idx.shape
    if hs.shape != (B, model.spatial_dim):
        raise ParameterError(f"h_spatial shape {hs.shape} != ({B}, {model.spatial_dim})")
    if np.any(idx[:, 0] >= model.K_base) or np.any(idx[:, 1:] >= model.K_res) or np.any(idx < 0):
        raise ParameterError("index out of range")
    embs = [p["emb_b"][idx[:, 0]]] + [p["emb_r"][idx[:, t]] for t in range(1, M)]

    # GRU over k_1 .. k_{M-1}
    G = None
    gru_caches = []
    if model.uses_gru:
        h = [np.repeat(p["start"][l][None], B, axis=0) for l in range(model.layers)]
        tops = [h[-1]]
        for t in range(M - 1):
            x = embs[t]
            step = []
            for l in range(model.layers):
                x, cache = gru_step(x, h[l], p[f"gru{l}_wx"], p[f"gru{l}_wh"], p[f"gru{l}_bx"], p[f"gru{l}_bh"])
                h[l] = x
                step.append(cache)
            gru_caches.append(step)
            tops.append(x)
        G = np.stack(tops, axis=1)  # (B, M, H)

    cum = np.cumsum(np.stack(embs, axis=1), axis=1) if not model.uses_gru else None
    bits = np.zeros((B, M))
    stage_caches = []
    for m in range(1, M + 1):
        mean_emb = None
        if cum is not None:
            mean_emb = cum[:, m - 2] / (m - 1) if m > 1 else np.zeros((B, model.embed))
        u, ctx = _context(model, hs, None if G is None else G[:, :m], mean_emb)
        K = model.codebook_size(m)
        logits, hcache = _head(model, u)
        sm = _softmax(logits[:, :K])
        k = idx[:, m - 1]
        pk = _floor(sm[np.arange(B), k], model, K)
        bits[:, m - 1] = -np.log2(pk)
        stage_caches.append((ctx, hcache, sm, K, mean_emb))
    total = float(bits.sum())
    if not grad:
        return total, bits, None

    g = {name: np.zeros_like(v) for name, v in p.items()}
    dhs = np.zeros_like(hs)
    dG = np.zeros_like(G) if G is not None else None
    dembs = [np.zeros((B, model.embed)) for _ in range(M)]
    rows = np.arange(B)
    for m in range(1, M + 1):
        (ctx, (u, pre, act), sm, K, mean_emb) = stage_caches[m - 1]
        k = idx[:, m - 1]
        sk = sm[rows, k]
        coef = -sk / ((sk + model.p_floor) * LN2)
        dlog = -coef[:, None] * sm
        dlog[rows, k] += coef
        g["head_w2"][:, :K] += act.T @ dlog
        g["head_b2"][:K] += dlog.sum(0)
        dact = dlog @ p["head_w2"][:, :K].T
        dpre = dact * _silu_grad(pre)
        g["head_w1"] += u.T @ dpre
        g["head_b1"] += dpre.sum(0)
        du = dpre @ p["head_w1"].T
        kind = ctx[0]
        if kind == "attn":
            _, q, keys, vals, att, c = ctx
            Gm = G[:, :m]
            dq = du.copy()
            dc = du
            dvals = att[:, :, None] * dc[:, None, :]
            datt = (vals @ dc[:, :, None])[:, :, 0]
            dscore = att * (datt - (att * datt).sum(1, keepdims=True))
            scale = 1.0 / np.sqrt(model.d_model)
            dq += scale * (dscore[:, None, :] @ keys)[:, 0]
            dkeys = scale * dscore[:, :, None] * q[:, None, :]
            Gf = Gm.reshape(-1, Gm.shape[-1])
            g["attn_wk"] += Gf.T @ dkeys.reshape(-1, dkeys.shape[-1])
            g["attn_wv"] += Gf.T @ dvals.reshape(-1, dvals.shape[-1])
            dG[:, :m] += dkeys @ p["attn_wk"].T + dvals @ p["attn_wv"].T
            g["attn_wq"] += hs.T @ dq
            dhs += dq @ p["attn_wq"].T
        elif kind == "gru":
            dG[:, m - 1] += du
        elif kind == "mlp":
            S = model.spatial_dim
            dhs += du[:, :S]
            dmean = du[:, S:]
            for t in range(m - 1):
                dembs[t] += dmean / (m - 1)
        else:
            _, ps, pt = ctx
            half = ps.shape[1]
            dps = du[:, :half] * _silu_grad(ps)
            dpt = du[:, half:] * _silu_grad(pt)
            g["br_ws"] += hs.T @ dps
            g["br_bs"] += dps.sum(0)
            dhs += dps @ p["br_ws"].T
            g["br_wt"] += mean_emb.T @ dpt
            g["br_bt"] += dpt.sum(0)
            dmean = dpt @ p["br_wt"].T
            for t in range(m - 1):
                dembs[t] += dmean / (m - 1)

    if model.uses_gru:
        carry = [np.zeros((B, model.hidden)) for _ in range(model.layers)]
        for t in range(M - 2, -1, -1):
            carry[-1] = carry[-1] + dG[:, t + 1]
            dx = None
            for l in range(model.layers - 1, -1, -1):
                dh_new = carry[l] if dx is None else carry[l] + dx
                dx, dh_prev, dwx, dwh, dbx, dbh = gru_step_backward(
                    dh_new, gru_caches[t][l], p[f"gru{l}_wx"], p[f"gru{l}_wh"])
                g[f"gru{l}_wx"] += dwx
                g[f"gru{l}_wh"] += dwh
                g[f"gru{l}_bx"] += dbx
                g[f"gru{l}_bh"] += dbh
                carry[l] = dh_prev
            dembs[t] += dx
        carry[-1] = carry[-1] + dG[:, 0]
        for l in range(model.layers):
            g["start"][l] += carry[l].sum(0)

    np.add.at(g["emb_b"], idx[:, 0], dembs[0])
    for t in range(1, M):
        np.add.at(g["emb_r"], idx[:, t], dembs[t])
    g["h_spatial"] = dhs
    return total, bits, g


def rate_loss(model: EntropyModel, grid, cloud, indices, positions=None) -> float:
    """Teacher-forced code length in bits of all anchors' index sequences.

    ``positions`` overrides the cloud positions (e.g. the decoder's
    quantized positions); ``grid`` may be None for architectures without a
    spatial input.
    """
    idx = indices.indices if hasattr(indices, "indices") else np.asarray(indices)
    pos = cloud.positions if positions is None else positions
    if len(pos) != len(idx):
        raise ParameterError("indices and anchors disagree on N")
    hs = grid.embed(pos) if grid is not None else np.zeros((len(idx), model.spatial_dim))
    total = 0.0
    for s in range(0, len(idx), 4096):
        total += forward_backward(model, hs[s:s + 4096], idx[s:s + 4096], grad=False)[0]
    return total


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    grid_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _adam_update(name, param, grad, st: AdamState, lr):
    if name not in st.m:
        st.m[name] = np.zeros_like(param)
        st.v[name] = np.zeros_like(param)
    st.m[name] = st.beta1 * st.m[name] + (1 - st.beta1) * grad
    st.v[name] = st.beta2 * st.v[name] + (1 - st.beta2) * grad * grad
    mhat = st.m[name] / (1 - st.beta1 ** st.t)
    vhat = st.v[name] / (1 - st.beta2 ** st.t)
    return param - lr * mhat / (np.sqrt(vhat) + st.eps)


def train_step(model: EntropyModel, grid, batch, state: AdamState, weight: float = 1.0,
               binarize: bool = False):
    """One Adam step on the mean bits per anchor of ``batch = (positions, indices)``.

    Updates ``model`` and ``grid`` in place and returns ``(model, grid, bits_per_anchor)``.
    With ``binarize`` the forward pass sees the 1-bit grid while gradients
    reach the full-precision tables straight through.
    """
    positions, idx = batch
    idx = np.asarray(idx)
    B = len(idx)
    lookup = None
    if model.uses_spatial and grid is not None:
        lookup = grid.lookup(positions)
        if binarize:
            hs = binarized_view(grid).embed(None, lookup)
        else:
            hs = grid.embed(None, lookup)
    else:
        hs = np.zeros((B, model.spatial_dim))
    total, _, g = forward_backward(model, hs, idx)
    loss = total / B
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite rate loss at optimizer step {state.t + 1}: {loss}")
    state.t += 1
    scale = weight / B
    for name in model.params:
        model.params[name] = _adam_update(name, model.params[name], scale * g[name], state, state.lr)
    if lookup is not None:
        gt = grid.embed_backward(scale * g["h_spatial"], lookup)
        grid.tables = _adam_update("grid", grid.tables, gt, state, state.grid_lr)
    return model, grid, loss


def build_ablation_model(tag: str, config: CodecConfig, spatial_dim: int, rng: Rng | None = None) -> EntropyModel:
    """Entropy model of one architecture from the ablation set.

    ``gru-attn`` is the default full model.
    """
    if tag not in ARCH_TAGS:
        raise ParameterError(f"unknown architecture tag {tag!r}; expected one of {ARCH_TAGS}")
    return EntropyModel.from_config(config, spatial_dim, rng, arch=tag)
