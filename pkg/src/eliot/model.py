"""Pose regression network: set abstraction over two scans, an implicit
flow embedding built from Fourier-encoded keypoints (or the classic KNN
flow-embedding baseline), a transformer encoder-decoder, and a
dual-quaternion head.

One forward pass consumes a consecutive scan pair (P at frame t, Q at
frame t+1) and predicts the transform mapping frame-(t+1) coordinates into
frame t, as a raw 8-vector in the dual-quaternion storage order (train
mode) or a normalized unit dual quaternion (eval mode). Internally every
stage is batched over pairs so mini-batch training gives batch norm real
batch statistics; the public per-pair methods run with batch size 1.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import diffops as ops
from . import dualquat, sampling
from .errors import ConfigError
from .seeding import make_rng


@dataclass
class NetConfig:
    """Structural hyperparameters; defaults follow the reference KITTI
    configuration except pe_bands, which defaults to the desk-scale band
    count (set 64 to reproduce the reference encoder width)."""

    n_key: int = 1024
    sa_radii: tuple = (0.5, 1.0)
    sa_mlps: tuple = ((16, 16, 32), (16, 16, 32))
    max_samples: tuple = (16, 32)
    feature_dim: int = 1
    fps_start: int = 0

    pe_bands: int = 10
    pe_method: str = "fourier"  # "fourier" | "gauss"
    pe_normalize: bool = True
    pe_gauss_scale: float = 1.0
    pe_extent: float = 75.0  # scene half-extent used for normalization

    enc_layers: int = 3
    enc_dim: int = 256
    enc_heads: int = 4
    enc_ffn: int = 16
    enc_dropout: float = 0.1
    activation: str = "relu"
    dec_layers: int = 3
    dec_dim: int = 256
    dec_heads: int = 2
    dec_ffn: int = 16
    dec_dropout: float = 0.1
    num_queries: int = 1024

    head_mlp_pn: tuple = (256, 512, 1024)
    head_mlp_fc: tuple = (1024, 512, 256, 8)
    lambda_dual: float = 1.0

    flow_embedding: str = "irfe"  # "irfe" | "knn"
    n_group: int = 16
    fe_mlp: tuple = None  # KNN-baseline MLP widths; default (2c', 4c')

    @property
    def c_prime(self):
        return sum(m[-1] for m in self.sa_mlps)

    @property
    def pe_width(self):
        return 3 * (2 * self.pe_bands + 1)

    @property
    def token_width(self):
        return 4 * self.c_prime

    def resolved_fe_mlp(self):
        return tuple(self.fe_mlp) if self.fe_mlp else (2 * self.c_prime, 4 * self.c_prime)

    def validate(self):
        if self.num_queries != self.n_key:
            raise ConfigError(f"num_queries ({self.num_queries}) must equal n_key ({self.n_key})")
        if len(self.sa_radii) != len(self.sa_mlps) or len(self.sa_radii) != len(self.max_samples):
            raise ConfigError("sa_radii, sa_mlps and max_samples must have equal length")
        if any(r2 <= r1 for r1, r2 in zip(self.sa_radii, self.sa_radii[1:])):
            raise ConfigError(f"sa_radii must be strictly increasing, got {self.sa_radii}")
        widths = [w for m in self.sa_mlps for w in m]
        widths += list(self.head_mlp_pn) + list(self.head_mlp_fc) + list(self.resolved_fe_mlp())
        if any(w < 1 for w in widths):
            raise ConfigError("all MLP widths must be >= 1")
        if self.head_mlp_fc[-1] != 8:
            raise ConfigError(f"final head width must be 8, got {self.head_mlp_fc[-1]}")
        if self.enc_dim % self.enc_heads != 0:
            raise ConfigError(f"enc_heads ({self.enc_heads}) must divide enc_dim ({self.enc_dim})")
        if self.dec_dim % self.dec_heads != 0:
            raise ConfigError(f"dec_heads ({self.dec_heads}) must divide dec_dim ({self.dec_dim})")
        if self.pe_bands < 1:
            raise ConfigError("pe_bands must be >= 1")
        if self.pe_normalize and not (np.isfinite(self.pe_extent) and self.pe_extent > 0):
            raise ConfigError(f"pe_extent must be finite and positive, got {self.pe_extent}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.pe_method not in ("fourier", "gauss"):
            raise ConfigError(f"unknown pe_method {self.pe_method!r}")
        if self.flow_embedding not in ("irfe", "knn"):
            raise ConfigError(f"unknown flow_embedding {self.flow_embedding!r}")
        if self.flow_embedding == "knn":
            if self.n_group > self.n_key:
                raise ConfigError(f"n_group ({self.n_group}) must be <= n_key ({self.n_key})")
            if self.resolved_fe_mlp()[-1] != self.token_width:
                raise ConfigError("fe_mlp must end at 4 * c' so both embeddings interchange")
        return self

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale profile for tests and the overfit run."""
        cfg = cls(
            n_key=64, sa_radii=(1.5, 3.0), sa_mlps=((8, 16), (8, 16)),
            max_samples=(8, 16), pe_bands=6, pe_extent=12.0,
            enc_layers=2, enc_dim=32, enc_heads=2, enc_ffn=64, enc_dropout=0.0,
            dec_layers=2, dec_dim=32, dec_heads=2, dec_ffn=64, dec_dropout=0.0,
            num_queries=64, head_mlp_pn=(64, 128), head_mlp_fc=(128, 64, 8),
            n_group=8,
        )
        return replace(cfg, **overrides).validate()

    @classmethod
    def micro(cls, **overrides):
        """Smallest functional network, for exhaustive gradient checks."""
        cfg = cls(
            n_key=8, sa_radii=(1.5, 3.0), sa_mlps=((4,), (4,)),
            max_samples=(4, 4), pe_bands=2, pe_extent=12.0,
            enc_layers=1, enc_dim=8, enc_heads=2, enc_ffn=8, enc_dropout=0.0,
            dec_layers=1, dec_dim=8, dec_heads=2, dec_ffn=8, dec_dropout=0.0,
            num_queries=8, head_mlp_pn=(8,), head_mlp_fc=(8, 8),
            n_group=4,
        )
        return replace(cfg, **overrides).validate()


@dataclass
class FeatureSet:
    """Keypoints plus their abstracted feature vectors (one cloud)."""

    keypoints: torch.Tensor  # (n_key, 3)
    features: torch.Tensor   # (n_key, c')


@dataclass
class CloudGrouping:
    """Parameter-independent sampling/grouping work for one cloud, reusable
    across training steps."""

    keypoints: torch.Tensor            # (n_key, 3)
    grouped: list = field(default_factory=list)  # per radius: (n_key, S, 3 + c)


def positional_encode(positions, bands, normalize=False, bounds=None, freqs=None):
    """Fourier feature lift: per coordinate block [p, sin(f0 p), cos(f0 p),
    ..., sin(f_{L-1} p), cos(f_{L-1} p)], width d * (2L + 1).

    With normalize set, coordinates are pre-scaled to [-pi, pi] by `bounds`
    (half-extent, scalar or per-axis). Default frequencies are 2^k; pass
    `freqs` of shape (L,) or (L, d) for the Gaussian variant.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    p = positions if isinstance(positions, torch.Tensor) else torch.as_tensor(
        np.asarray(positions, dtype=np.float64))
    if normalize:
        b = torch.as_tensor(np.asarray(bounds, dtype=np.float64), dtype=p.dtype)
        if not torch.all(torch.isfinite(b)) or not torch.all(b > 0):
            raise ValueError("normalization bounds must be finite and positive")
        p = p / b * math.pi
    if freqs is None:
        freqs = torch.pow(torch.tensor(2.0, dtype=p.dtype), torch.arange(bands, dtype=p.dtype))
    else:
        freqs = torch.as_tensor(freqs, dtype=p.dtype)
        if freqs.shape[0] != bands:
            raise ValueError(f"got {freqs.shape[0]} frequency rows for {bands} bands")
    parts = [p]
    for k in range(bands):
        f = freqs[k]
        parts.append(ops.sine(p * f))
        parts.append(ops.cosine(p * f))
    return ops.concatenate(parts, axis=-1)


def build_params(cfg, seed, dtype=torch.float32):
    """Fresh parameter store for a config; deterministic per seed."""
    cfg.validate()
    store = ops.ParamStore(dtype)
    cp = cfg.c_prime

    if cfg.pe_method == "gauss":
        rng = make_rng(seed, "pe.freqs")
        freqs = rng.normal(0.0, cfg.pe_gauss_scale, size=(cfg.pe_bands, 3))
    else:
        freqs = np.repeat(2.0 ** np.arange(cfg.pe_bands)[:, None], 3, axis=1)
    store.add("pe.freqs", freqs, trainable=False)

    for i, widths in enumerate(cfg.sa_mlps):
        prev = 3 + cfg.feature_dim
        for j, w in enumerate(widths):
            store.add_linear(f"sa.r{i}.l{j}", prev, w, seed)
            store.add_batch_norm(f"sa.r{i}.bn{j}", w)
            prev = w
    store.add_linear("sa.post", cp, cp, seed)
    store.add_batch_norm("sa.post_bn", cp)

    if cfg.flow_embedding == "irfe":
        store.add_linear("irfe.p_proj", cfg.pe_width, cp, seed)
        store.add_linear("irfe.q_proj", cfg.pe_width, cp, seed)
    else:
        prev = 3 + 2 * cp
        for j, w in enumerate(cfg.resolved_fe_mlp()):
            store.add_linear(f"fe.l{j}", prev, w, seed)
            store.add_batch_norm(f"fe.bn{j}", w)
            prev = w

    store.add_linear("enc.in_proj", cfg.token_width, cfg.enc_dim, seed)
    store.add_linear("enc.pe_proj", cfg.pe_width, cfg.enc_dim, seed)
    for l in range(cfg.enc_layers):
        base = f"enc.l{l}"
        store.add_layer_norm(f"{base}.ln1", cfg.enc_dim)
        for part in ("q", "k", "v", "o"):
            store.add_linear(f"{base}.attn.{part}", cfg.enc_dim, cfg.enc_dim, seed)
        store.add_layer_norm(f"{base}.ln2", cfg.enc_dim)
        store.add_linear(f"{base}.ffn.l1", cfg.enc_dim, cfg.enc_ffn, seed)
        store.add_linear(f"{base}.ffn.l2", cfg.enc_ffn, cfg.enc_dim, seed)
    store.add_layer_norm("enc.final_ln", cfg.enc_dim)

    store.add_linear("dec.query_proj", cfg.pe_width, cfg.dec_dim, seed)
    for l in range(cfg.dec_layers):
        base = f"dec.l{l}"
        store.add_layer_norm(f"{base}.ln1", cfg.dec_dim)
        for part in ("q", "k", "v", "o"):
            store.add_linear(f"{base}.self.{part}", cfg.dec_dim, cfg.dec_dim, seed)
        store.add_layer_norm(f"{base}.ln2", cfg.dec_dim)
        store.add_linear(f"{base}.cross.q", cfg.dec_dim, cfg.dec_dim, seed)
        store.add_linear(f"{base}.cross.k", cfg.enc_dim, cfg.dec_dim, seed)
        store.add_linear(f"{base}.cross.v", cfg.enc_dim, cfg.dec_dim, seed)
        store.add_linear(f"{base}.cross.o", cfg.dec_dim, cfg.dec_dim, seed)
        store.add_layer_norm(f"{base}.ln3", cfg.dec_dim)
        store.add_linear(f"{base}.ffn.l1", cfg.dec_dim, cfg.dec_ffn, seed)
        store.add_linear(f"{base}.ffn.l2", cfg.dec_ffn, cfg.dec_dim, seed)
    store.add_layer_norm("dec.final_ln", cfg.dec_dim)

    prev = cfg.dec_dim
    for i, w in enumerate(cfg.head_mlp_pn):
        store.add_linear(f"head.pn{i}", prev, w, seed)
        store.add_batch_norm(f"head.pn_bn{i}", w)
        prev = w
    for i, w in enumerate(cfg.head_mlp_fc):
        store.add_linear(f"head.fc{i}", prev, w, seed)
        prev = w
    return store


def check_store_matches(cfg, store):
    """Raise ConfigError when checkpoint arrays do not fit the config."""
    expected = build_params(cfg, seed=0, dtype=store.dtype)
    exp = {n: p.shape for n, p in expected.items()}
    got = {n: p.shape for n, p in store.items()}
    if exp != got:
        missing = sorted(set(exp) - set(got))
        extra = sorted(set(got) - set(exp))
        wrong = sorted(n for n in set(exp) & set(got) if exp[n] != got[n])
        detail = []
        if missing:
            detail.append(f"missing {missing[:4]}")
        if extra:
            detail.append(f"unexpected {extra[:4]}")
        if wrong:
            detail.append(
                "shape mismatch " + ", ".join(
                    f"{n}: checkpoint {got[n]} vs config {exp[n]}" for n in wrong[:4]))
        raise ConfigError("checkpoint does not match config: " + "; ".join(detail))


class EliotNet:
    """The pose network. Holds a config, a parameter store, and the seed
    that keys dropout streams."""

    def __init__(self, cfg, seed=0, dtype=torch.float32, store=None):
        self.cfg = cfg.validate()
        self.seed = seed
        self.dtype = dtype
        if store is None:
            store = build_params(cfg, seed, dtype)
        else:
            check_store_matches(cfg, store)
            self.dtype = store.dtype
        self.store = store

    # -- sampling / grouping (parameter independent, cacheable) -------------

    def precompute(self, cloud, keypoint_indices=None):
        cfg = self.cfg
        if len(cloud) < cfg.n_key:
            raise ValueError(f"cloud has {len(cloud)} points, need >= {cfg.n_key}")
        if cloud.feature_dim != cfg.feature_dim:
            raise ValueError(
                f"cloud has {cloud.feature_dim} feature channels, config expects "
                f"{cfg.feature_dim}")
        if keypoint_indices is None:
            keypoint_indices = sampling.fps(cloud, cfg.n_key, cfg.fps_start).indices
        centers = cloud.positions[keypoint_indices]
        grouped = []
        for radius, max_samples in zip(cfg.sa_radii, cfg.max_samples):
            table = sampling.ball_query(centers, cloud, radius, max_samples)
            nbr_pos = cloud.positions[table.indices]            # (n_key, S, 3)
            nbr_feat = cloud.features[table.indices]            # (n_key, S, c)
            rel = nbr_pos - centers[:, None, :]
            stacked = np.concatenate([rel, nbr_feat], axis=-1)  # (n_key, S, 3+c)
            grouped.append(torch.as_tensor(stacked, dtype=self.dtype))
        keypoints = torch.as_tensor(centers, dtype=self.dtype)
        return CloudGrouping(keypoints=keypoints, grouped=grouped)

    def _grouping(self, cloud_or_grouping, keypoint_indices=None):
        if isinstance(cloud_or_grouping, CloudGrouping):
            return cloud_or_grouping
        return self.precompute(cloud_or_grouping, keypoint_indices)

    # -- batched internals ---------------------------------------------------
    # Tensors carry a leading batch axis: keypoints (B, n_key, 3), grouped
    # neighborhoods (B, n_key, S, 3+c), tokens (B, n_key, 4c').

    def _sa_batch(self, groupings, mode):
        training = mode == "train"
        pooled = []
        for i in range(len(self.cfg.sa_radii)):
            x = torch.stack([g.grouped[i] for g in groupings])
            for j in range(len(self.cfg.sa_mlps[i])):
                x = ops.linear(x, self.store, f"sa.r{i}.l{j}")
                x = ops.batch_norm(x, self.store, f"sa.r{i}.bn{j}", training)
                x = ops.relu(x)
            x, _ = ops.max_pool_over_axis(x, axis=2)
            pooled.append(x)
        features = ops.concatenate(pooled, axis=-1)
        features = ops.linear(features, self.store, "sa.post")
        features = ops.batch_norm(features, self.store, "sa.post_bn", training)
        keypoints = torch.stack([g.keypoints for g in groupings])
        return keypoints, features

    def _encode_positions(self, keypoints):
        return positional_encode(
            keypoints, self.cfg.pe_bands, normalize=self.cfg.pe_normalize,
            bounds=self.cfg.pe_extent, freqs=self.store["pe.freqs"])

    def _irfe_batch(self, kp_p, feat_p, kp_q, feat_q):
        if kp_p.shape != kp_q.shape:
            raise ValueError(
                f"keypoint counts differ: {kp_p.shape[-2]} vs {kp_q.shape[-2]}")
        gp = ops.linear(self._encode_positions(kp_p), self.store, "irfe.p_proj")
        gq = ops.linear(self._encode_positions(kp_q), self.store, "irfe.q_proj")
        return ops.concatenate([gp, gq, feat_p, feat_q], axis=-1)

    def _knn_embed_batch(self, kp_p, feat_p, kp_q, feat_q, mode,
                         return_groups=False):
        cfg = self.cfg
        training = mode == "train"
        tables = []
        rows = []
        for b in range(kp_p.shape[0]):
            table = sampling.knn(kp_p[b].detach().cpu().numpy(),
                                 kp_q[b].detach().cpu().numpy(), cfg.n_group)
            tables.append(table)
            idx = torch.as_tensor(table.indices)
            disp = kp_q[b][idx] - kp_p[b][:, None, :]        # (n_key, g, 3)
            f_i = feat_p[b][:, None, :].expand(-1, cfg.n_group, -1)
            g_j = feat_q[b][idx]
            rows.append(ops.concatenate([disp, f_i, g_j], axis=-1))
        x = torch.stack(rows)                                 # (B, n_key, g, 3+2c')
        for j in range(len(cfg.resolved_fe_mlp())):
            x = ops.linear(x, self.store, f"fe.l{j}")
            x = ops.batch_norm(x, self.store, f"fe.bn{j}", training)
            x = ops.relu(x)
        tokens, _ = ops.max_pool_over_axis(x, axis=2)
        if return_groups:
            return tokens, tables
        return tokens

    def _attention(self, name, q_in, k_in, v_in, heads):
        """Multi-head scaled dot-product attention over (B, n, d) operands;
        returns output and the per-head weight maps (B, h, nq, nk)."""
        s = self.store
        q = ops.linear(q_in, s, f"{name}.q")
        k = ops.linear(k_in, s, f"{name}.k")
        v = ops.linear(v_in, s, f"{name}.v")
        B, nq, d = q.shape
        nk = k.shape[1]
        dh = d // heads
        q = q.reshape(B, nq, heads, dh).permute(0, 2, 1, 3)
        k = k.reshape(B, nk, heads, dh).permute(0, 2, 1, 3)
        v = v.reshape(B, nk, heads, dh).permute(0, 2, 1, 3)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(dh)
        weights = ops.softmax_over_axis(scores, axis=-1)
        out = torch.matmul(weights, v)
        out = out.permute(0, 2, 1, 3).reshape(B, nq, d)
        return ops.linear(out, s, f"{name}.o"), weights

    def _ffn(self, x, base):
        h = ops.relu(ops.linear(x, self.store, f"{base}.ffn.l1"))
        return ops.linear(h, self.store, f"{base}.ffn.l2")

    def _transformer_batch(self, tokens, kp_p, kp_q, mode, step):
        cfg = self.cfg
        s = self.store
        training = mode == "train"

        def drop(x, rate, tag):
            return ops.dropout(x, rate, training, self.seed, tag, step)

        gp = self._encode_positions(kp_p)
        x = ops.linear(tokens, s, "enc.in_proj") + ops.linear(gp, s, "enc.pe_proj")
        for l in range(cfg.enc_layers):
            base = f"enc.l{l}"
            h = ops.layer_norm(x, s, f"{base}.ln1")
            attn_out, _ = self._attention(f"{base}.attn", h, h, h, cfg.enc_heads)
            x = x + drop(attn_out, cfg.enc_dropout, f"{base}.attn")
            h = ops.layer_norm(x, s, f"{base}.ln2")
            x = x + drop(self._ffn(h, base), cfg.enc_dropout, f"{base}.ffn")
        memory = ops.layer_norm(x, s, "enc.final_ln")

        gq = self._encode_positions(kp_q)
        y = ops.linear(gq, s, "dec.query_proj")
        cross_maps = []
        for l in range(cfg.dec_layers):
            base = f"dec.l{l}"
            h = ops.layer_norm(y, s, f"{base}.ln1")
            self_out, _ = self._attention(f"{base}.self", h, h, h, cfg.dec_heads)
            y = y + drop(self_out, cfg.dec_dropout, f"{base}.self")
            h = ops.layer_norm(y, s, f"{base}.ln2")
            cross_out, weights = self._attention(f"{base}.cross", h, memory, memory,
                                                 cfg.dec_heads)
            cross_maps.append(weights.detach())
            y = y + drop(cross_out, cfg.dec_dropout, f"{base}.cross")
            h = ops.layer_norm(y, s, f"{base}.ln3")
            y = y + drop(self._ffn(h, base), cfg.dec_dropout, f"{base}.ffn")
        decoded = ops.layer_norm(y, s, "dec.final_ln")
        return decoded, cross_maps

    def _head_batch(self, decoded, mode):
        training = mode == "train"
        x = decoded
        for i in range(len(self.cfg.head_mlp_pn)):
            x = ops.linear(x, self.store, f"head.pn{i}")
            x = ops.batch_norm(x, self.store, f"head.pn_bn{i}", training)
            x = ops.relu(x)
        pooled, _ = ops.max_pool_over_axis(x, axis=1)         # (B, width)
        x = pooled
        last = len(self.cfg.head_mlp_fc) - 1
        for i in range(len(self.cfg.head_mlp_fc)):
            x = ops.linear(x, self.store, f"head.fc{i}")
            if i != last:
                x = ops.relu(x)
        return x

    def _forward_batch(self, pairs, mode, step):
        groupings_p = [self._grouping(p) for p, _ in pairs]
        groupings_q = [self._grouping(q) for _, q in pairs]
        kp_p, feat_p = self._sa_batch(groupings_p, mode)
        kp_q, feat_q = self._sa_batch(groupings_q, mode)
        if self.cfg.flow_embedding == "irfe":
            tokens = self._irfe_batch(kp_p, feat_p, kp_q, feat_q)
        else:
            tokens = self._knn_embed_batch(kp_p, feat_p, kp_q, feat_q, mode)
        decoded, cross_maps = self._transformer_batch(tokens, kp_p, kp_q, mode, step)
        return self._head_batch(decoded, mode), cross_maps

    # -- public per-pair stages (batch size 1) -------------------------------

    def set_abstraction(self, cloud, mode="eval", keypoint_indices=None):
        """Multi-scale grouped features per keypoint: shared per-point MLP
        with batch norm, max over each ball, radii concatenated, then one
        linear + batch-norm layer."""
        grouping = self._grouping(cloud, keypoint_indices)
        kp, feat = self._sa_batch([grouping], mode)
        return FeatureSet(keypoints=kp[0], features=feat[0])

    def irfe(self, fs_p, fs_q):
        """Implicit flow tokens: projected positional encodings of both
        keypoint sets concatenated with both feature sets, width 4c'."""
        if fs_p.keypoints.shape[0] != fs_q.keypoints.shape[0]:
            raise ValueError(
                f"keypoint counts differ: {fs_p.keypoints.shape[0]} vs "
                f"{fs_q.keypoints.shape[0]}")
        return self._irfe_batch(fs_p.keypoints[None], fs_p.features[None],
                                fs_q.keypoints[None], fs_q.features[None])[0]

    def knn_flow_embed(self, fs_p, fs_q, mode="eval", return_groups=False):
        """Correspondence-style baseline: per keypoint, gather the n_group
        nearest target keypoints, embed (displacement, f_i, g_j) pairs with a
        shared MLP, and max-pool the group. Ends at width 4c' so it is a
        drop-in replacement for the implicit tokens."""
        out = self._knn_embed_batch(fs_p.keypoints[None], fs_p.features[None],
                                    fs_q.keypoints[None], fs_q.features[None],
                                    mode, return_groups=return_groups)
        if return_groups:
            tokens, tables = out
            return tokens[0], tables[0]
        return out[0]

    def transformer_pose(self, tokens, keypoints_p, keypoints_q, mode="eval", step=0):
        """Pre-norm encoder over flow tokens positioned by the source
        keypoints; decoder queries derived from the target keypoints;
        returns decoded states and all cross-attention maps."""
        decoded, maps = self._transformer_batch(
            tokens[None], keypoints_p[None], keypoints_q[None], mode, step)
        return decoded[0], [m[0] for m in maps]

    def pose_head(self, decoded, mode="eval"):
        """Shared per-token MLP, max-pool over tokens, fully connected stack
        down to the raw 8-vector."""
        return self._head_batch(decoded[None], mode)[0]

    def forward_batch(self, pairs, mode="train", step=0):
        """Batched forward over a list of (cloud_or_grouping, cloud_or_grouping)
        pairs; returns raw 8-vectors (B, 8) plus cross-attention maps."""
        if mode == "eval":
            with torch.no_grad():
                raw, maps = self._forward_batch(pairs, mode, step)
                return dualquat.dq_normalize(raw), maps
        return self._forward_batch(pairs, mode, step)

    def forward(self, cloud_p, cloud_q, mode="eval", step=0):
        """Full pipeline for one pair. Train mode returns the raw 8-vector
        (losses normalize internally); eval mode runs without autograd and
        returns a unit dual quaternion. Also returns the decoder
        cross-attention maps."""
        out, maps = self.forward_batch([(cloud_p, cloud_q)], mode=mode, step=step)
        return out[0], [m[0] for m in maps]

    def predict_transform(self, cloud_p, cloud_q):
        """Eval-mode 4x4 relative transform (frame q -> frame p) as numpy."""
        dq, maps = self.forward(cloud_p, cloud_q, mode="eval")
        return dualquat.dq_to_matrix(dq.double()).numpy(), maps
