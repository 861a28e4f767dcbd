"""Rotation-equivariant building blocks: harmonics, tensor-field convolution,
order-wise rotation operators, and scalar-scored cross-attention.

Per-point features live in an :class:`IrrepsField`, a dict of channels indexed
by angular order ``l``; the order-``l`` channel has shape ``(N, c_l, 2l+1)``.
Order 0 is rotation-invariant; higher orders transform by the operators from
:func:`rotation_operator`, which are built numerically from the harmonics'
transformation rule. Component order follows the harmonics: the ``l=1`` basis
is ``(y, z, x)``.

Orders above 2 are unsupported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "IrrepsField",
    "RadialBasis",
    "EquivariantError",
    "real_spherical_harmonics",
    "rotation_operator",
    "coupling_tensor",
    "allowed_paths",
    "random_rotation",
    "ConvLayer",
    "Encoder",
    "encoder_input",
    "equivariant_attention",
    "knn_indices",
]

_C0 = 1.0 / (2.0 * math.sqrt(math.pi))
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2A = 0.5 * math.sqrt(15.0 / math.pi)
_C2B = 0.25 * math.sqrt(5.0 / math.pi)
_C2C = 0.25 * math.sqrt(15.0 / math.pi)


class EquivariantError(ValueError):
    pass


def _sph_columns(l: int, x, y, z):
    """Harmonic components as expressions in coordinate columns.

    Works for numpy arrays and Tensors alike; all polynomials are homogeneous
    so the same code serves unit directions exactly.
    """
    if l == 0:
        return [x * 0.0 + _C0]
    if l == 1:
        return [_C1 * y, _C1 * z, _C1 * x]
    if l == 2:
        return [
            _C2A * x * y,
            _C2A * y * z,
            _C2B * (2.0 * z * z - x * x - y * y),
            _C2A * z * x,
            _C2C * (x * x - y * y),
        ]
    raise EquivariantError(f"unsupported harmonic order {l}")


def real_spherical_harmonics(l: int, direction: np.ndarray) -> np.ndarray:
    """Real orthonormal harmonics of order ``l`` at unit direction(s).

    Inputs within 1e-6 of unit length are normalized internally; anything
    farther off is a domain error.
    """
    if l not in (0, 1, 2):
        raise EquivariantError(f"unsupported harmonic order {l}")
    d = np.asarray(direction, dtype=float)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        worst = float(np.abs(norms - 1.0).max())
        raise EquivariantError(f"direction deviates from unit length by {worst:.2e}")
    d = d / norms[:, None]
    cols = _sph_columns(l, d[:, 0], d[:, 1], d[:, 2])
    out = np.stack(cols, axis=-1)
    return out[0] if single else out


def _sph_matrix_np(l: int, unit: np.ndarray) -> np.ndarray:
    return np.stack(_sph_columns(l, unit[:, 0], unit[:, 1], unit[:, 2]), axis=-1)


def _sph_matrix_t(l: int, unit: Tensor) -> Tensor:
    cols = _sph_columns(l, unit[:, 0], unit[:, 1], unit[:, 2])
    return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)


# ---------------------------------------------------------------------------
# rotation operators and coupling coefficients
# ---------------------------------------------------------------------------

_FIT_DIRS = None


def _fit_dirs() -> np.ndarray:
    global _FIT_DIRS
    if _FIT_DIRS is None:
        rng = np.random.default_rng(20240001)
        v = rng.standard_normal((9, 3))
        _FIT_DIRS = v / np.linalg.norm(v, axis=1, keepdims=True)
    return _FIT_DIRS


def rotation_operator(l: int, rotation: np.ndarray) -> np.ndarray:
    """Order-``l`` operator D with Y_l(R u) = D Y_l(u).

    l=0 is the identity; l=1 is the rotation in (y, z, x) component order;
    l=2 is solved from harmonic evaluations at fixed generic directions.
    """
    r = np.asarray(rotation, dtype=float)
    if l == 0:
        return np.eye(1)
    if l == 1:
        perm = [1, 2, 0]
        return r[np.ix_(perm, perm)]
    if l == 2:
        v = _fit_dirs()
        a = _sph_matrix_np(2, v)
        b = _sph_matrix_np(2, v @ r.T)
        d_t, *_ = np.linalg.lstsq(a, b, rcond=None)
        return d_t.T
    raise EquivariantError(f"unsupported rotation order {l}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with a deterministic sign fix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


_COUPLING_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def coupling_tensor(l_out: int, l_f: int, l_in: int) -> np.ndarray:
    """Real coupling coefficients C[m_out, m_f, m_in] intertwining
    Y_{l_f} (x) f_{l_in} -> order l_out.

    Solved once per triple as the (one-dimensional) nullspace of the
    equivariance constraint over a few fixed rotations, normalized to unit
    Frobenius norm with a deterministic sign.
    """
    key = (l_out, l_f, l_in)
    if key in _COUPLING_CACHE:
        return _COUPLING_CACHE[key]
    if not abs(l_f - l_in) <= l_out <= l_f + l_in:
        raise EquivariantError(f"path (l_in={l_in}, l_f={l_f}, l_out={l_out}) violates triangle rule")
    no, nf, ni = 2 * l_out + 1, 2 * l_f + 1, 2 * l_in + 1
    rng = np.random.default_rng(20240002)
    blocks = []
    for _ in range(4):
        rot = random_rotation(rng)
        d_out = rotation_operator(l_out, rot)
        d_fi = np.kron(rotation_operator(l_f, rot), rotation_operator(l_in, rot))
        # constraint D_out T = T D_fi on T of shape (no, nf*ni)
        blocks.append(np.kron(np.eye(nf * ni), d_out) - np.kron(d_fi.T, np.eye(no)))
    system = np.vstack(blocks)
    _, s, vh = np.linalg.svd(system)
    null_dim = int(np.sum(s < 1e-8 * max(float(s.max()), 1.0)))
    if null_dim != 1:
        raise EquivariantError(f"coupling space for {key} has dimension {null_dim}")
    t = vh[-1].reshape(nf * ni, no).T  # column-major vec inverse
    t = t / np.linalg.norm(t)
    flat = t.reshape(-1)
    lead = flat[np.argmax(np.abs(flat))]
    if lead < 0:
        t = -t
    tensor = t.reshape(no, nf, ni)
    _COUPLING_CACHE[key] = tensor
    return tensor


def allowed_paths(layout_in: dict[int, int], orders_out, max_order: int = 2):
    """All (l_in, l_f, l_out) triples within the triangle rule and order cap."""
    paths = []
    for l_in in sorted(layout_in):
        for l_f in range(max_order + 1):
            for l_out in orders_out:
                if abs(l_in - l_f) <= l_out <= l_in + l_f:
                    paths.append((l_in, l_f, l_out))
    return paths


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class IrrepsField:
    """Per-point equivariant features: ``channels[l]`` has shape (N, c_l, 2l+1)."""

    channels: dict[int, object]  # numpy arrays or Tensors

    def __post_init__(self):
        for l, ch in self.channels.items():
            if ch.shape[-1] != 2 * l + 1:
                raise EquivariantError(
                    f"order-{l} channel has width {ch.shape[-1]}, expected {2 * l + 1}"
                )

    @property
    def layout(self) -> dict[int, int]:
        return {l: ch.shape[1] for l, ch in self.channels.items()}

    @property
    def n_points(self) -> int:
        return next(iter(self.channels.values())).shape[0]

    def values(self) -> dict[int, np.ndarray]:
        return {
            l: (ch.values if isinstance(ch, Tensor) else np.asarray(ch))
            for l, ch in self.channels.items()
        }

    def rotated(self, rotation: np.ndarray) -> "IrrepsField":
        out = {}
        for l, ch in self.channels.items():
            d = rotation_operator(l, rotation)
            arr = ch.values if isinstance(ch, Tensor) else np.asarray(ch)
            out[l] = arr @ d.T
        return IrrepsField(out)


def rotate_field(l: int, rotation: np.ndarray, channel: np.ndarray) -> np.ndarray:
    """Rotate one order-``l`` channel (identity for l=0)."""
    if l > 2:
        raise EquivariantError(f"unsupported rotation order {l}")
    return np.asarray(channel, dtype=float) @ rotation_operator(l, rotation).T


# ---------------------------------------------------------------------------
# radial basis
# ---------------------------------------------------------------------------

class RadialBasis:
    """Gaussian bumps on [0, cutoff] under a smooth cosine cutoff envelope."""

    def __init__(self, cutoff: float, n_basis: int = 8):
        self.cutoff = float(cutoff)
        self.n_basis = int(n_basis)
        self.centers = np.linspace(0.0, self.cutoff, self.n_basis)
        spacing = self.cutoff / max(self.n_basis - 1, 1)
        self.inv_two_sq = 1.0 / (2.0 * spacing * spacing)

    def evaluate(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        env = np.where(r < self.cutoff, 0.5 * (np.cos(np.pi * r / self.cutoff) + 1.0), 0.0)
        g = np.exp(-((r[..., None] - self.centers) ** 2) * self.inv_two_sq)
        return g * env[..., None]

    def evaluate_t(self, r: Tensor) -> Tensor:
        mask = (r.values < self.cutoff).astype(float)
        env_raw = ad.mul(ad.add(ad.cos(ad.mul(r, np.pi / self.cutoff)), 1.0), 0.5)
        env = ad.mul(env_raw, mask)
        rr = ad.reshape(r, (-1, 1))
        g = ad.exp(ad.mul(ad.power(ad.sub(rr, self.centers[None, :]), 2.0), -self.inv_two_sq))
        return ad.mul(g, ad.reshape(env, (-1, 1)))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def knn_indices(points: np.ndarray, k: int, include_self: bool = True) -> np.ndarray:
    """Deterministic k-nearest-neighbor index table over one point set."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    k = min(k, n)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    if not include_self:
        np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def conv_geometry(coords, nbr_idx: np.ndarray, basis: RadialBasis, max_lf: int = 2) -> dict:
    """Edge quantities shared by every conv layer over one neighbor table.

    Tensor-typed (and differentiable through positions) when ``coords`` is a
    Tensor, plain numpy otherwise. Self-edges get a zero direction, which
    every l_f > 0 path masks out.
    """
    n, k = nbr_idx.shape
    flat = nbr_idx.reshape(-1)
    src = np.repeat(np.arange(n), k)
    self_mask = (flat != src).astype(float)[:, None, None]
    if isinstance(coords, Tensor):
        dvec = ad.sub(ad.gather(coords, flat), ad.gather(coords, src))
        rsq = ad.reduce_sum(ad.mul(dvec, dvec), axis=1)
        r = ad.power(ad.add(rsq, 1e-24), 0.5)
        unit = ad.div(dvec, ad.reshape(r, (-1, 1)))
        b = basis.evaluate_t(r)
        sph = {l_f: _sph_matrix_t(l_f, unit) for l_f in range(1, max_lf + 1)}
    else:
        pts = np.asarray(coords, dtype=float)
        dvec = pts[flat] - pts[src]
        r = np.sqrt((dvec * dvec).sum(axis=1) + 1e-24)
        unit = dvec / r[:, None]
        b = basis.evaluate(r)
        sph = {l_f: _sph_matrix_np(l_f, unit) for l_f in range(1, max_lf + 1)}
    return {"n": n, "k": k, "flat": flat, "self_mask": self_mask, "basis": b, "sph": sph}


class ConvLayer:
    """One tensor-field convolution with per-path learnable radial mixing.

    Output at point i sums messages from its neighbor list: the order-l_f
    harmonic of the edge direction couples an order-l_in input channel into
    an order-l_out output through fixed coupling coefficients, scaled by a
    learned radial function of the edge length. Self-edges contribute only
    through l_f = 0 paths.
    """

    def __init__(self, name: str, layout_in: dict[int, int], layout_out: dict[int, int],
                 basis: RadialBasis, max_order: int = 2):
        self.name = name
        self.layout_in = dict(layout_in)
        self.layout_out = dict(layout_out)
        self.basis = basis
        self.paths = [
            p for p in allowed_paths(layout_in, sorted(layout_out), max_order)
        ]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for (l_in, l_f, l_out) in self.paths:
            key = f"{self.name}.w{l_in}{l_f}{l_out}"
            shapes[key] = (self.basis.n_basis, self.layout_in[l_in] * self.layout_out[l_out])
        for l_out, c in self.layout_out.items():
            if l_out == 0:
                shapes[f"{self.name}.bias0"] = (c,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for key, shape in self.param_shapes().items():
            if key.endswith("bias0"):
                params[key] = np.zeros(shape)
                continue
            l_in = int(key.split(".w")[-1][0])
            fan_in = self.layout_in[l_in] * self.basis.n_basis * len(self.paths)
            params[key] = rng.standard_normal(shape) / math.sqrt(fan_in)
        return params

    def apply(self, params: dict, field: IrrepsField, geom: dict) -> IrrepsField:
        n, k = geom["n"], geom["k"]
        flat, self_mask = geom["flat"], geom["self_mask"]
        out: dict[int, object] = {}
        gathered: dict[int, Tensor] = {}
        for (l_in, l_f, l_out) in self.paths:
            c_in, c_out = self.layout_in[l_in], self.layout_out[l_out]
            ni, no = 2 * l_in + 1, 2 * l_out + 1
            w = params[f"{self.name}.w{l_in}{l_f}{l_out}"]
            rw = ad.reshape(ad.matmul(geom["basis"], w), (-1, c_in, c_out))
            if l_in not in gathered:
                gathered[l_in] = ad.gather(field.channels[l_in], flat)   # (E, c_in, ni)
            mixed = ad.bmm(ad.transpose(rw, (0, 2, 1)), gathered[l_in])  # (E, c_out, ni)
            cg = coupling_tensor(l_out, l_f, l_in)                       # (no, nf, ni)
            if l_f == 0:
                kc = cg[:, 0, :] * _C0                                   # (no, ni) constant
                msg = ad.reshape(
                    ad.matmul(ad.reshape(mixed, (-1, ni)), kc.T), (-1, c_out, no)
                )
            else:
                y = geom["sph"][l_f]                                     # (E, nf)
                if isinstance(y, Tensor):
                    kc = ad.reduce_sum(
                        ad.mul(ad.reshape(y, (-1, 1, 2 * l_f + 1, 1)), cg[None, :, :, :]),
                        axis=2,
                    )                                                    # (E, no, ni)
                    kc_t = ad.transpose(ad.mul(kc, self_mask), (0, 2, 1))
                else:
                    cache = geom.setdefault("kc_cache", {})
                    key = (l_out, l_f, l_in)
                    kc_t = cache.get(key)
                    if kc_t is None:
                        # (E, ni, no): coupling contracted with the harmonics,
                        # self-edges zeroed, pre-transposed for the bmm
                        kc_t = np.ascontiguousarray(
                            (np.einsum("ef,ofi->eoi", y, cg) * self_mask).transpose(0, 2, 1)
                        )
                        cache[key] = kc_t
                msg = ad.bmm(mixed, kc_t)                                # (E, c_out, no)
            pooled = ad.mul(ad.reduce_sum(ad.reshape(msg, (n, k, c_out, no)), axis=1), 1.0 / k)
            out[l_out] = pooled if l_out not in out else ad.add(out[l_out], pooled)
        bias_key = f"{self.name}.bias0"
        if 0 in out and bias_key in params:
            out[0] = ad.add(out[0], ad.reshape(params[bias_key], (1, -1, 1)))
        return IrrepsField(out)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def encoder_input(features: np.ndarray, points, center=None) -> IrrepsField:
    """Build the encoder input field from a stage-1 feature matrix.

    All feature columns except the trailing coordinates enter as scalars; the
    coordinate block enters as one order-1 channel of centered positions (in
    harmonic component order), which keeps the encoder translation-invariant.
    """
    feats = features
    if isinstance(points, Tensor):
        scalars = feats[:, :-3] if isinstance(feats, Tensor) else ad.constant(feats[:, :-3])
        n, c = scalars.shape
        mean = ad.reduce_mean(points, axis=0, keepdims=True) if center is None else center
        centered = ad.mul(ad.sub(points, mean), 0.1)
        vec = ad.concat(
            [ad.reshape(centered[:, 1], (-1, 1)), ad.reshape(centered[:, 2], (-1, 1)),
             ad.reshape(centered[:, 0], (-1, 1))],
            axis=1,
        )
        return IrrepsField({
            0: ad.reshape(scalars, (n, c, 1)),
            1: ad.reshape(vec, (n, 1, 3)),
        })
    feats = np.asarray(feats, dtype=float)
    pts = np.asarray(points, dtype=float)
    scalars = feats[:, :-3]
    mean = pts.mean(axis=0, keepdims=True) if center is None else center
    centered = (pts - mean) * 0.1
    vec = centered[:, [1, 2, 0]]
    return IrrepsField({
        0: scalars[:, :, None],
        1: vec[:, None, :],
    })


class Encoder:
    """Two-layer gated tensor-field network producing an order-0/1/2 field."""

    def __init__(self, n_scalar_in: int, cfg):
        self.n_scalar_in = n_scalar_in
        self.mult = cfg.multiplicity
        self.max_order = cfg.max_order
        self.conv_k = cfg.conv_k
        self.basis = RadialBasis(cfg.conv_cutoff, cfg.n_radial_basis)
        c = self.mult
        self.orders = list(range(self.max_order + 1))
        gate_extra = c * (len(self.orders) - 1)
        layout_hidden_raw = {0: c + gate_extra}
        for l in self.orders[1:]:
            layout_hidden_raw[l] = c
        layout_hidden = {l: c for l in self.orders}
        self.layers = []
        layout = {0: n_scalar_in, 1: 1}
        for i in range(cfg.n_conv_layers):
            last = i == cfg.n_conv_layers - 1
            out_layout = layout_hidden if last else layout_hidden_raw
            self.layers.append(ConvLayer(f"enc{i}", layout, out_layout, self.basis, self.max_order))
            layout = layout_hidden
        self.out_layout = layout_hidden

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for layer in self.layers:
            params.update(layer.init_params(rng))
        return params

    def _gate(self, field: IrrepsField) -> IrrepsField:
        c = self.mult
        scalars = field.channels[0]
        feats = ad.tanh(scalars[:, :c, :])
        out = {0: feats}
        for idx, l in enumerate(self.orders[1:]):
            gates = ad.sigmoid(scalars[:, c * (idx + 1) : c * (idx + 2), :])
            out[l] = ad.mul(field.channels[l], gates)
        return IrrepsField(out)

    def apply(self, params: dict, features, points, nbr_idx: np.ndarray | None = None,
              geom: dict | None = None) -> IrrepsField:
        """Encode one cloud. ``features``/``points`` may be numpy or Tensors.

        Pass a precomputed ``geom`` (from :func:`conv_geometry`) to skip the
        per-call edge geometry when encoding the same cloud repeatedly.
        """
        if geom is None:
            if nbr_idx is None:
                pts_np = points.values if isinstance(points, Tensor) else np.asarray(points)
                nbr_idx = knn_indices(pts_np, self.conv_k)
            geom = conv_geometry(points, nbr_idx, self.basis, self.max_order)
        field = encoder_input(features, points)
        for i, layer in enumerate(self.layers):
            field = layer.apply(params, field, geom)
            if i < len(self.layers) - 1:
                field = self._gate(field)
        return field


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def equivariant_attention(
    receptor: IrrepsField,
    ligand: IrrepsField,
    params: dict,
    prefix: str = "attn",
    fused_pool: str = "sum",
):
    """Scalar-scored cross-attention with per-order value projections.

    Scores come from order-0 channels only (hence rigid-motion invariant);
    values carry every order. Returns (attended receptor field, fused vector,
    score matrix). The fused vector is mean- and max-pooling over receptor
    points of the order-0 summary, giving length 2d for the "sum" pooling of
    original and attended features ("concat" gives 4d).
    """
    if ligand.n_points == 0:
        raise ad.DomainError("equivariant attention needs a non-empty ligand field")
    zr0 = receptor.channels[0]
    zl0 = ligand.channels[0]
    d = zr0.shape[1]
    q = ad.matmul(ad.reshape(zr0, (-1, d)), params[f"{prefix}.wq"])
    k = ad.matmul(ad.reshape(zl0, (-1, d)), params[f"{prefix}.wk"])
    scores = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)), axis=1)

    attended = {}
    for l, ch in ligand.channels.items():
        n_l, c, m = ch.shape
        flat = ad.reshape(ad.transpose(ch, (0, 2, 1)), (n_l * m, c))
        proj = ad.matmul(flat, params[f"{prefix}.wv{l}"])
        proj = ad.transpose(ad.reshape(proj, (n_l, m, c)), (0, 2, 1))
        att = ad.matmul(scores, ad.reshape(proj, (n_l, c * m)))
        attended[l] = ad.reshape(att, (-1, c, m))
    attended_field = IrrepsField(attended)

    orig = ad.reshape(zr0, (-1, d))
    att0 = ad.reshape(attended[0], (-1, d))
    if fused_pool == "sum":
        summary = ad.add(orig, att0)
    elif fused_pool == "concat":
        summary = ad.concat([orig, att0], axis=1)
    else:
        raise EquivariantError(f"unknown fused_pool {fused_pool!r}")
    fused = ad.concat(
        [ad.reduce_mean(summary, axis=0), ad.reduce_max(summary, axis=0)], axis=0
    )
    return attended_field, fused, scores


def attention_param_shapes(d: int, layout: dict[int, int], prefix: str = "attn") -> dict[str, tuple]:
    shapes = {f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d)}
    for l, c in layout.items():
        shapes[f"{prefix}.wv{l}"] = (c, c)
    return shapes


def init_attention_params(d: int, layout: dict[int, int], rng: np.random.Generator,
                          prefix: str = "attn") -> dict[str, np.ndarray]:
    params = {}
    for key, shape in attention_param_shapes(d, layout, prefix).items():
        params[key] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return params
