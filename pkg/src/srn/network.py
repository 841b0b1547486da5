"""The structural relation network: convolutional backbone over shape-indexed
patches, a non-local relation block, a recurrent hidden state, per-group
relational branches, and global shape integration.

Tensor shapes follow the batch-first convention:

* patches:   (B, N, C, P, P)
* features:  (B, N, D) where D = k * m * m after the conv stack
* hidden:    (B, H)
* residuals: (B, 2N), paired as (x0, y0, x1, y1, ...) in landmark order
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInput
from .geometry import GROUP_ORDER, NEIGHBORHOOD_ORDER, GroupSchema, partition
from .params import ParamStore, fan_in_uniform

# Each group's branch consumes its own neighborhood embedding plus one
# paired neighborhood: ocular and snout exchange context, cheeks borrow
# from the snout.
PAIRED_NEIGHBORHOOD = {"ocular": "snout", "snout": "ocular", "cheek": "snout"}

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class SrnConfig:
    """Architecture constants; defaults match the full 68-landmark model."""

    num_landmarks: int = 68
    patch_size: int = 36
    in_channels: int = 1
    channels: tuple[int, int, int] = (32, 64, 64)
    kernels: tuple[int, int, int] = (7, 3, 3)
    nonlocal_embed: int | None = None  # None -> final conv channel count
    rnn_hidden: int = 256
    g_dim: int = 512
    f_dim: int = 256
    use_nonlocal: bool = True
    use_g: bool = True
    use_f: bool = True
    use_d: bool = True
    use_mu: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.channels) != 3 or len(self.kernels) != 3:
            raise InvalidInput("backbone uses exactly three conv layers")
        if not (self.use_f or self.use_d):
            raise InvalidInput("at least one of the f/d branch stages must be enabled")
        if self.dtype not in _DTYPES:
            raise InvalidInput(f"dtype must be one of {sorted(_DTYPES)}")
        if self.feature_side < 1:
            raise InvalidInput(f"patch_size {self.patch_size} collapses below 1x1 in the conv stack")

    @property
    def feature_side(self) -> int:
        side = self.patch_size
        for _ in range(3):
            side //= 2
        return side

    @property
    def descriptor_dim(self) -> int:
        return self.channels[-1] * self.feature_side ** 2

    @property
    def embed_dim(self) -> int:
        return self.nonlocal_embed if self.nonlocal_embed is not None else self.channels[-1]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SrnConfig":
        d = dict(d)
        for key in ("channels", "kernels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def init_conv_stack(rng: np.random.Generator, cfg: SrnConfig, prefix: str = "backbone") -> dict[str, Tensor]:
    """Fan-in-scaled uniform conv weights, zero biases."""
    params: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for i, (cout, k) in enumerate(zip(cfg.channels, cfg.kernels), start=1):
        w = fan_in_uniform(rng, (cout, cin, k, k), cin * k * k, cfg.np_dtype)
        params[f"{prefix}.conv{i}.w"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.conv{i}.b"] = Tensor(np.zeros(cout, dtype=cfg.np_dtype), requires_grad=True)
        cin = cout
    return params


def conv_stack_forward(params: dict[str, Tensor], patches: Tensor, cfg: SrnConfig,
                       prefix: str = "backbone") -> Tensor:
    """conv(same) -> relu -> maxpool2, three times; (B*, C, P, P) in,
    (B*, k, m, m) out."""
    x = patches
    for i in range(1, 4):
        x = ad.conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"],
                      stride=1, padding="same")
        x = ad.relu(x)
        x = ad.max_pool2(x)
    return x


def _linear(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.fully_connected(x, params[f"{name}.w"], params[f"{name}.b"])


class SrnModel:
    """Forward network over a group schema, parameterized by named tensors.

    The parameter dictionary is the single source of truth; checkpoints
    round-trip through :class:`ParamStore`.
    """

    def __init__(self, cfg: SrnConfig, schema: GroupSchema | None = None,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.schema = schema if schema is not None else partition(cfg.num_landmarks)
        if self.schema.num_landmarks != cfg.num_landmarks:
            raise InvalidInput("schema landmark count does not match config")
        self.params = params if params is not None else self._init_params(seed)

    # -- construction -------------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        params = init_conv_stack(rng, cfg)
        d_dim = cfg.descriptor_dim

        def dense(name: str, fan_in: int, fan_out: int):
            params[f"{name}.w"] = Tensor(fan_in_uniform(rng, (fan_in, fan_out), fan_in, dt),
                                         requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dt), requires_grad=True)

        if cfg.use_nonlocal:
            dense("nonlocal.embed", d_dim, cfg.embed_dim)
            dense("nonlocal.out", cfg.embed_dim, d_dim)
        rnn_in = cfg.num_landmarks * d_dim + cfg.rnn_hidden
        params["rnn.w1"] = Tensor(fan_in_uniform(rng, (rnn_in, cfg.rnn_hidden), rnn_in, dt),
                                  requires_grad=True)
        params["rnn.b1"] = Tensor(np.zeros(cfg.rnn_hidden, dtype=dt), requires_grad=True)
        if cfg.use_g:
            for nb in NEIGHBORHOOD_ORDER:
                dense(f"g.{nb}", len(self.schema.neighborhoods[nb]) * d_dim, cfg.g_dim)
        for grp in GROUP_ORDER:
            fin = self._branch_input_dim(grp)
            if cfg.use_f:
                fout = cfg.f_dim if cfg.use_d else 2 * len(self.schema.groups[grp])
                dense(f"f.{grp}", fin, fout)
            if cfg.use_d:
                din = 2 * cfg.f_dim if cfg.use_f else fin
                dense(f"d.{grp}", din, 2 * len(self.schema.groups[grp]))
        if cfg.use_mu:
            dense("mu", 2 * cfg.num_landmarks, 2 * cfg.num_landmarks)
        return params

    def _branch_input_dim(self, group: str) -> int:
        cfg = self.cfg
        own = self.schema.parent[group]
        paired = PAIRED_NEIGHBORHOOD[own]
        if cfg.use_g:
            return 2 * cfg.g_dim + cfg.rnn_hidden
        own_n = len(self.schema.neighborhoods[own])
        paired_n = len(self.schema.neighborhoods[paired])
        return (own_n + paired_n) * cfg.descriptor_dim + cfg.rnn_hidden

    @classmethod
    def from_store(cls, store: ParamStore, schema: GroupSchema | None = None) -> "SrnModel":
        cfg = SrnConfig.from_dict(store.config["model"])
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in store.arrays.items()}
        return cls(cfg, schema=schema, params=params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- forward stages -----------------------------------------------------

    def features(self, patches) -> Tensor:
        """Backbone over every patch: (B, N, C, P, P) -> (B, N, D)."""
        t = patches if isinstance(patches, Tensor) else Tensor(
            np.asarray(patches, dtype=self.cfg.np_dtype))
        b, n, c, p1, p2 = t.data.shape
        cfg = self.cfg
        if n != cfg.num_landmarks or c != cfg.in_channels or p1 != cfg.patch_size or p2 != cfg.patch_size:
            raise InvalidInput(
                f"patch tensor {t.data.shape} does not match config "
                f"(N={cfg.num_landmarks}, C={cfg.in_channels}, P={cfg.patch_size})"
            )
        flat = ad.reshape(t, (b * n, c, p1, p2))
        maps = conv_stack_forward(self.params, flat, cfg)
        return ad.reshape(maps, (b, n, cfg.descriptor_dim))

    def relation(self, x: Tensor) -> Tensor:
        """Non-local aggregation with a residual connection.

        Positions are the N per-patch descriptors; pairwise weights are dot
        products of embedded descriptors, normalized by the position count.
        """
        if not self.cfg.use_nonlocal:
            return x
        n = x.data.shape[1]
        emb_w = self.params["nonlocal.embed.w"]
        emb_b = self.params["nonlocal.embed.b"]
        out_w = self.params["nonlocal.out.w"]
        out_b = self.params["nonlocal.out.b"]
        e = ad.matmul(x, emb_w) + emb_b                       # (B, N, E)
        sim = ad.matmul(e, ad.transpose(e, (0, 2, 1)))        # (B, N, N)
        y = ad.scale(ad.matmul(sim, e), 1.0 / n)              # (B, N, E)
        return ad.matmul(y, out_w) + out_b + x

    def hidden_step(self, x: Tensor, h: Tensor, temporal: bool = False) -> Tensor:
        """tanh((flatten(x) ++ h) @ W + b); W1 spatially across cascade
        iterations, W2 (falling back to W1 until re-tasked) across frames."""
        b = x.data.shape[0]
        flat = ad.reshape(x, (b, x.data.shape[1] * x.data.shape[2]))
        key = "2" if temporal and "rnn.w2" in self.params else "1"
        w, bias = self.params[f"rnn.w{key}"], self.params[f"rnn.b{key}"]
        if h.data.ndim != 2 or h.data.shape[1] + flat.data.shape[1] != w.data.shape[0]:
            raise InvalidInput(
                f"rnn input width does not match W{key} {w.data.shape}"
            )
        return ad.tanh(ad.fully_connected(ad.concat([flat, h], axis=1), w, bias))

    def zero_hidden(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.cfg.rnn_hidden), dtype=self.cfg.np_dtype))

    def group_residuals(self, r: Tensor, h: Tensor) -> dict[str, Tensor]:
        """Per-group residual branches conditioned on the hidden state."""
        cfg = self.cfg
        if r.data.shape[1] != cfg.num_landmarks:
            raise InvalidInput("relation features do not match the schema")
        b = r.data.shape[0]
        nb_embed: dict[str, Tensor] = {}
        for nb in NEIGHBORHOOD_ORDER:
            idx = self.schema.neighborhoods[nb]
            flat = ad.reshape(ad.take(r, idx, axis=1), (b, len(idx) * cfg.descriptor_dim))
            nb_embed[nb] = _linear(self.params, f"g.{nb}", flat) if cfg.use_g else flat
        base: dict[str, Tensor] = {}
        for grp in GROUP_ORDER:
            own = self.schema.parent[grp]
            paired = PAIRED_NEIGHBORHOOD[own]
            base[grp] = ad.concat([nb_embed[own], nb_embed[paired], h], axis=1)
        out: dict[str, Tensor] = {}
        if cfg.use_f:
            f_out = {grp: _linear(self.params, f"f.{grp}", base[grp]) for grp in GROUP_ORDER}
            if cfg.use_d:
                for grp in GROUP_ORDER:
                    sib = self.schema.sibling(grp)
                    out[grp] = _linear(self.params, f"d.{grp}",
                                       ad.concat([f_out[grp], f_out[sib]], axis=1))
            else:
                out = f_out
        else:
            for grp in GROUP_ORDER:
                out[grp] = _linear(self.params, f"d.{grp}", base[grp])
        return out

    def integrate(self, residuals: dict[str, Tensor]) -> Tensor:
        """Merge group residuals into landmark order and apply the global
        point-to-point layer; returns (B, 2N)."""
        missing = [g for g in GROUP_ORDER if g not in residuals]
        if missing:
            raise InvalidInput(f"missing group residuals: {missing}")
        merged = ad.concat([residuals[g] for g in GROUP_ORDER], axis=1)
        perm = self._landmark_order_permutation()
        ordered = ad.take(merged, perm, axis=1)
        if self.cfg.use_mu:
            ordered = _linear(self.params, "mu", ordered)
        return ordered

    def _landmark_order_permutation(self) -> np.ndarray:
        concat_landmarks = np.concatenate([self.schema.groups[g] for g in GROUP_ORDER])
        slot_of = np.empty(self.cfg.num_landmarks, dtype=np.intp)
        slot_of[concat_landmarks] = np.arange(len(concat_landmarks))
        perm = np.empty(2 * self.cfg.num_landmarks, dtype=np.intp)
        perm[0::2] = 2 * slot_of
        perm[1::2] = 2 * slot_of + 1
        return perm

    def shape_residual(self, r: Tensor, h: Tensor) -> Tensor:
        """Full relational head: (B, N, D) features -> (B, N, 2) residual."""
        flat = self.integrate(self.group_residuals(r, h))
        return ad.reshape(flat, (flat.data.shape[0], self.cfg.num_landmarks, 2))

    # -- re-tasking ---------------------------------------------------------

    def retask_temporal(self) -> None:
        """Create the temporal recurrent weights from the spatial ones and
        drop the spatial pair; parameter shapes are preserved."""
        if "rnn.w2" in self.params:
            return
        self.params["rnn.w2"] = Tensor(self.params["rnn.w1"].data.copy(), requires_grad=True)
        self.params["rnn.b2"] = Tensor(self.params["rnn.b1"].data.copy(), requires_grad=True)
        del self.params["rnn.w1"]
        del self.params["rnn.b1"]
