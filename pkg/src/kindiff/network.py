"""Periodic-translation-invariant message-passing score network.

Node states are built from atom-type features and a sinusoidal time
embedding; every message-passing layer sees both endpoint states, both
endpoint velocities, the encoded lattice and a sinusoidal embedding of the
pairwise fractional-coordinate difference.  Because coordinates enter only
through f_j - f_i, a global shift of all coordinates leaves every head
unchanged exactly.

The architecture is small and fixed, so parameter gradients are computed
by explicit reverse accumulation (no autodiff framework); the backward
pass is verified against central finite differences in the tests.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .euclidean import Standardizer, VpSchedule, analog_bits_width
from .kinetic import KineticSchedule, assemble_score

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"KDIFNET1"


def sinusoidal_embed(x, n_freq: int) -> np.ndarray:
    """Period-1 features (sin(2 pi k x), cos(2 pi k x)) for k = 1..n_freq.

    Output has shape x.shape + (2 * n_freq,), entries in [-1, 1].
    """
    x = np.asarray(x, dtype=float)
    k = np.arange(1, n_freq + 1, dtype=float)
    arg = 2.0 * np.pi * x[..., None] * k
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def time_embed(u, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the normalized diffusion time u in [0, 1]."""
    u = np.asarray(u, dtype=float)
    half = dim // 2
    if half < 1:
        raise ValueError("time_embed_dim must be >= 2")
    expo = np.arange(half, dtype=float) / max(half - 1, 1)
    freqs = 1000.0 ** expo
    arg = u[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass(frozen=True)
class NetConfig:
    """Architecture and head semantics of the score network."""

    n_layers: int = 4
    hidden_dim: int = 64
    time_embed_dim: int = 32
    n_freq: int = 8
    num_species: int = 1
    layer_norm: bool = True
    mean_free: bool = True
    parameterization: str = "simplified"  # "simplified" | "direct"
    lattice_param: str = "eps"            # "eps" | "x0"
    atom_types: str = "one-hot"           # "one-hot" | "analog-bits"
    task: str = "csp"                     # "csp" | "dng"

    def __post_init__(self):
        if self.n_freq < 1 or self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("n_freq, hidden_dim and n_layers must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")
        if self.parameterization not in ("simplified", "direct"):
            raise ValueError(f"unknown parameterization: {self.parameterization!r}")
        if self.lattice_param not in ("eps", "x0"):
            raise ValueError(f"unknown lattice parameterization: {self.lattice_param!r}")
        if self.atom_types not in ("one-hot", "analog-bits"):
            raise ValueError(f"unknown atom-type mode: {self.atom_types!r}")
        if self.task not in ("csp", "dng"):
            raise ValueError(f"unknown task: {self.task!r}")

    @property
    def a_dim(self) -> int:
        """Width of the atom-type channel seen (and emitted) by the network."""
        if self.task == "dng" and self.atom_types == "analog-bits":
            return analog_bits_width(self.num_species)
        return self.num_species


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class ScoreNet:
    """Fixed message-passing architecture over a flat parameter vector."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        H = cfg.hidden_dim
        edge_in = 2 * H + 3 + 3 + 6 + 3 * 2 * cfg.n_freq
        node_in = cfg.a_dim + cfg.time_embed_dim
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("node.W0", (node_in, H)), ("node.b0", (H,)),
            ("node.W1", (H, H)), ("node.b1", (H,)),
        ]
        for i in range(cfg.n_layers):
            shapes += [
                (f"layer{i}.msg.W0", (edge_in, H)), (f"layer{i}.msg.b0", (H,)),
                (f"layer{i}.msg.W1", (H, H)), (f"layer{i}.msg.b1", (H,)),
                (f"layer{i}.upd.W0", (2 * H, H)), (f"layer{i}.upd.b0", (H,)),
                (f"layer{i}.upd.W1", (H, H)), (f"layer{i}.upd.b1", (H,)),
            ]
            if cfg.layer_norm:
                shapes += [(f"layer{i}.ln.g", (H,)), (f"layer{i}.ln.b", (H,))]
        shapes += [
            ("head_v.W0", (H, H)), ("head_v.b0", (H,)),
            ("head_v.W1", (H, 3)), ("head_v.b1", (3,)),
            ("head_l.W", (H, 6)), ("head_l.b", (6,)),
            ("head_a.W", (H, cfg.a_dim)), ("head_a.b", (cfg.a_dim,)),
        ]
        self.shapes = shapes
        self._offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shp in shapes:
            size = int(np.prod(shp))
            self._offsets[name] = (off, shp)
            off += size
        self.n_params = off

    # -- parameter plumbing -------------------------------------------------

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        off, shp = self._offsets[name]
        return params[off:off + int(np.prod(shp))].reshape(shp)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.n_params)
        for name, shp in self.shapes:
            v = self.view(params, name)
            if name.endswith(".g"):
                v[...] = 1.0
            elif len(shp) == 2:
                v[...] = rng.standard_normal(shp) / np.sqrt(shp[0])
            # biases and LN shifts stay zero
        return params

    # -- forward ------------------------------------------------------------

    def _mlp2(self, params, prefix, x, cache=None):
        W0, b0 = self.view(params, prefix + ".W0"), self.view(params, prefix + ".b0")
        W1, b1 = self.view(params, prefix + ".W1"), self.view(params, prefix + ".b1")
        z = x @ W0 + b0
        h = _silu(z)
        y = h @ W1 + b1
        if cache is not None:
            cache[prefix] = (x, z, h)
        return y

    def _mlp2_backward(self, params, grads, cache, prefix, gy):
        x, z, h = cache[prefix]
        W0 = self.view(params, prefix + ".W0")
        W1 = self.view(params, prefix + ".W1")
        gW1 = self.view(grads, prefix + ".W1")
        gb1 = self.view(grads, prefix + ".b1")
        gW0 = self.view(grads, prefix + ".W0")
        gb0 = self.view(grads, prefix + ".b0")

        h2 = h.reshape(-1, h.shape[-1])
        gy2 = gy.reshape(-1, gy.shape[-1])
        gW1 += h2.T @ gy2
        gb1 += gy2.sum(axis=0)
        gh = gy @ W1.T
        gz = gh * _silu_grad(z)
        x2 = x.reshape(-1, x.shape[-1])
        gz2 = gz.reshape(-1, gz.shape[-1])
        gW0 += x2.T @ gz2
        gb0 += gz2.sum(axis=0)
        return gz @ W0.T

    def _linear(self, params, prefix, x, cache=None):
        W, b = self.view(params, prefix + ".W"), self.view(params, prefix + ".b")
        if cache is not None:
            cache[prefix] = (x,)
        return x @ W + b

    def _linear_backward(self, params, grads, cache, prefix, gy):
        (x,) = cache[prefix]
        W = self.view(params, prefix + ".W")
        gW = self.view(grads, prefix + ".W")
        gb = self.view(grads, prefix + ".b")
        gW += x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
        gb += gy.reshape(-1, gy.shape[-1]).sum(axis=0)
        return gy @ W.T

    @staticmethod
    def _layernorm(x, g, b, cache=None, key=None):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = xc * inv
        if cache is not None:
            cache[key] = (xhat, inv)
        return g * xhat + b

    def _layernorm_backward(self, params, grads, cache, key, gy):
        xhat, inv = cache[key]
        g = self.view(params, key + ".g")
        gg = self.view(grads, key + ".g")
        gb = self.view(grads, key + ".b")
        gg += (gy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        gb += gy.reshape(-1, gy.shape[-1]).sum(axis=0)
        gxhat = gy * g
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (gxhat - m1 - xhat * m2)

    def forward(self, params, u, f, v, l, a, want_cache: bool = False):
        """Run the network.

        u: (B,) normalized times; f, v: (B, K, 3); l: (B, 6); a: (B, K, C).
        Returns (out_v, out_l, out_a) and, when requested, the cache needed
        by :meth:`backward`.
        """
        cfg = self.cfg
        B, K, _ = f.shape
        cache: dict = {} if want_cache else None

        te = time_embed(u, cfg.time_embed_dim)
        node_in = np.concatenate([a, np.broadcast_to(te[:, None, :], (B, K, cfg.time_embed_dim))], axis=-1)
        h = self._mlp2(params, "node", node_in, cache)

        diff = f[:, None, :, :] - f[:, :, None, :]        # f_j - f_i at [b, i, j]
        pe = sinusoidal_embed(diff, cfg.n_freq).reshape(B, K, K, -1)
        v_i = np.broadcast_to(v[:, :, None, :], (B, K, K, 3))
        v_j = np.broadcast_to(v[:, None, :, :], (B, K, K, 3))
        l_e = np.broadcast_to(l[:, None, None, :], (B, K, K, 6))

        for i in range(cfg.n_layers):
            h_i = np.broadcast_to(h[:, :, None, :], (B, K, K, cfg.hidden_dim))
            h_j = np.broadcast_to(h[:, None, :, :], (B, K, K, cfg.hidden_dim))
            e_in = np.concatenate([h_i, h_j, v_i, v_j, l_e, pe], axis=-1)
            m_ij = self._mlp2(params, f"layer{i}.msg", e_in, cache)
            m = m_ij.sum(axis=2)
            upd_in = np.concatenate([h, m], axis=-1)
            upd = self._mlp2(params, f"layer{i}.upd", upd_in, cache)
            h_new = h + upd
            if cfg.layer_norm:
                h_new = self._layernorm(h_new, self.view(params, f"layer{i}.ln.g"),
                                        self.view(params, f"layer{i}.ln.b"),
                                        cache, f"layer{i}.ln")
            h = h_new

        out_v = self._mlp2(params, "head_v", h, cache)
        if cfg.mean_free:
            out_v = out_v - out_v.mean(axis=1, keepdims=True)
        pool = h.mean(axis=1)
        out_l = self._linear(params, "head_l", pool, cache)
        out_a = self._linear(params, "head_a", h, cache)

        if want_cache:
            cache["_dims"] = (B, K)
            return out_v, out_l, out_a, cache
        return out_v, out_l, out_a

    # -- backward -----------------------------------------------------------

    def backward(self, params, cache, g_v, g_l, g_a) -> np.ndarray:
        """Accumulate d(loss)/d(params) from head gradients; returns flat grad."""
        cfg = self.cfg
        B, K = cache["_dims"]
        grads = np.zeros_like(params)

        if cfg.mean_free:
            g_v = g_v - g_v.mean(axis=1, keepdims=True)
        gh = self._mlp2_backward(params, grads, cache, "head_v", g_v)
        g_pool = self._linear_backward(params, grads, cache, "head_l", g_l)
        gh = gh + np.broadcast_to(g_pool[:, None, :] / K, gh.shape)
        gh = gh + self._linear_backward(params, grads, cache, "head_a", g_a)

        H = cfg.hidden_dim
        for i in reversed(range(cfg.n_layers)):
            if cfg.layer_norm:
                gh = self._layernorm_backward(params, grads, cache, f"layer{i}.ln", gh)
            g_upd_in = self._mlp2_backward(params, grads, cache, f"layer{i}.upd", gh)
            gh_new = gh + g_upd_in[..., :H]
            g_m = g_upd_in[..., H:]
            g_mij = np.broadcast_to(g_m[:, :, None, :], (B, K, K, H))
            g_ein = self._mlp2_backward(params, grads, cache, f"layer{i}.msg", g_mij)
            gh_new = gh_new + g_ein[..., :H].sum(axis=2)       # h_i term
            gh_new = gh_new + g_ein[..., H:2 * H].sum(axis=1)  # h_j term
            gh = gh_new

        self._mlp2_backward(params, grads, cache, "node", gh)
        return grads


# ---------------------------------------------------------------------------
# loss


@dataclass
class TrainingBatch:
    """Noisy inputs and targets for one optimization step (fixed K)."""

    t: np.ndarray          # (B,) torus times
    u: np.ndarray          # (B,) normalized times for the Euclidean channels
    f_t: np.ndarray        # (B, K, 3) fractional coordinates
    v_t: np.ndarray        # (B, K, 3)
    l_t: np.ndarray        # (B, 6)
    a_t: np.ndarray        # (B, K, C)
    target_v: np.ndarray   # (B, K, 3)
    target_l: np.ndarray   # (B, 6)
    target_a: np.ndarray | None  # (B, K, C) for DNG, else None
    lam: np.ndarray        # (B,) score-loss weights

    @property
    def size(self) -> int:
        return self.t.shape[0]


@dataclass(frozen=True)
class LossWeights:
    v: float = 1.0
    l: float = 1.0
    a: float = 20.0


def loss_gradients(params, net: ScoreNet, batch: TrainingBatch, sched: KineticSchedule,
                   weights: LossWeights = LossWeights()):
    """Total weighted DSM loss and its exact parameter gradient.

    The velocity term compares the assembled score (simplified mode) or the
    raw head (direct mode) against the kernel score target, weighted by the
    precomputed lambda(t); Euclidean channels use plain squared error.
    Returns (loss_total, parts, grad).
    """
    cfg = net.cfg
    B = batch.size
    out_v, out_l, out_a, cache = net.forward(
        params, batch.u, batch.f_t, batch.v_t, batch.l_t, batch.a_t, want_cache=True)

    if cfg.parameterization == "simplified":
        t3 = batch.t[:, None, None]
        s_v = assemble_score(out_v, batch.v_t, t3, sched)
        ds_dout = sched.a(t3)
    else:
        s_v = out_v
        ds_dout = 1.0

    res_v = s_v - batch.target_v
    lam3 = batch.lam[:, None, None]
    loss_v = float(np.sum(lam3 * res_v * res_v) / B)
    g_v = (2.0 / B) * weights.v * lam3 * res_v * ds_dout

    res_l = out_l - batch.target_l
    loss_l = float(np.sum(res_l * res_l) / B)
    g_l = (2.0 / B) * weights.l * res_l

    if batch.target_a is not None:
        res_a = out_a - batch.target_a
        loss_a = float(np.sum(res_a * res_a) / B)
        g_a = (2.0 / B) * weights.a * res_a
    else:
        loss_a = 0.0
        g_a = np.zeros_like(out_a)

    loss = weights.v * loss_v + weights.l * loss_l + weights.a * loss_a
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    grad = net.backward(params, cache, g_v, g_l, g_a)
    parts = {"loss_v": loss_v, "loss_l": loss_l, "loss_a": loss_a}
    return loss, parts, grad


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelBundle:
    """A trained network together with everything needed to sample from it."""

    net: ScoreNet
    params: np.ndarray
    ksched: KineticSchedule
    vsched: VpSchedule
    standardizer: Standardizer | None = None
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self) -> NetConfig:
        return self.net.cfg


def save_checkpoint(path, bundle: ModelBundle) -> None:
    """Self-describing checkpoint: JSON header + little-endian f64 payload.

    The header records the architecture, schedules, shape table and a
    sha256 checksum of the payload.
    """
    payload = np.ascontiguousarray(bundle.params, dtype="<f8").tobytes()
    header = {
        "format": 1,
        "net_config": asdict(bundle.cfg),
        "kinetic_schedule": asdict(bundle.ksched),
        "vp_schedule": asdict(bundle.vsched),
        "standardizer": None if bundle.standardizer is None else {
            "mean": bundle.standardizer.mean.tolist(),
            "std": bundle.standardizer.std.tolist(),
        },
        "shapes": [[name, list(shp)] for name, shp in bundle.net.shapes],
        "param_count": int(bundle.params.size),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": bundle.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError("checkpoint payload checksum mismatch")
    params = np.frombuffer(payload, dtype="<f8").astype(float)
    if params.size != header["param_count"]:
        raise ValueError("checkpoint payload length mismatch")
    cfg = NetConfig(**header["net_config"])
    net = ScoreNet(cfg)
    if net.n_params != params.size:
        raise ValueError("checkpoint parameter count does not match its config")
    std = header["standardizer"]
    return ModelBundle(
        net=net,
        params=params,
        ksched=KineticSchedule(**header["kinetic_schedule"]),
        vsched=VpSchedule(**header["vp_schedule"]),
        standardizer=None if std is None else Standardizer(
            mean=np.asarray(std["mean"]), std=np.asarray(std["std"])),
        meta=header.get("meta", {}),
    )
