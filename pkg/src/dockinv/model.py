"""Shared model assembly: twin encoders, codebook, patch decoder, task heads.

Proteins and small molecules carry different scalar feature widths (14 vs 16
after splitting off coordinates), so the pipeline keeps one encoder per
molecule type with identical hyper-shape. The codebook, patch decoder,
attention projections, and task heads are shared. All parameters live in one
flat ``{name: array}`` dict so checkpoints and optimizers stay trivial.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .equivariant import (
    Encoder,
    IrrepsField,
    attention_param_shapes,
    conv_geometry,
    equivariant_attention,
    knn_indices,
)

__all__ = ["PipelineModel", "sgd_momentum_step", "adam_step", "as_tensors", "collect_grads"]

N_SCALARS_PROTEIN = 14   # 4 chem + 6 atom + 3 geom + type flag
N_SCALARS_MOLECULE = 16  # 4 chem + 8 atom + 3 geom + type flag
N_CONTEXT = 3            # nearest visible patches fed to the patch decoder


class PipelineModel:
    """Hyper-shape and parameter bookkeeping for the full pipeline."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.enc_protein = Encoder(N_SCALARS_PROTEIN, cfg)
        self.enc_molecule = Encoder(N_SCALARS_MOLECULE, cfg)
        self.d0 = cfg.multiplicity
        self.d_code = cfg.d_code
        self.n_codes = cfg.codebook_size
        self.patch_k = cfg.patch_k
        self.fused_dim = 2 * self.d0 if cfg.fused_pool == "sum" else 4 * self.d0
        self.head_hidden = cfg.head_hidden

    # -- parameter table -------------------------------------------------
    def param_shapes(self) -> dict[str, tuple]:
        shapes: dict[str, tuple] = {}
        for prefix, enc in (("encp", self.enc_protein), ("encm", self.enc_molecule)):
            for key, shape in enc.param_shapes().items():
                shapes[f"{prefix}.{key}"] = shape
        for prefix in ("liftp", "liftm"):
            shapes[f"{prefix}.w"] = (4 * self.d0, self.d_code)  # l=0 (c) + l=1 (3c) pooled
            shapes[f"{prefix}.b"] = (self.d_code,)
        shapes["codebook"] = (self.n_codes, self.d_code)
        h = self.head_hidden
        # decoder sees [quantized token | nearest visible tokens + offsets | center]
        dec_in = self.d_code + N_CONTEXT * (self.d_code + 3) + 3
        shapes["dec.w1"] = (dec_in, h)
        shapes["dec.b1"] = (h,)
        shapes["dec.wc"] = (h, self.patch_k * 3)
        shapes["dec.bc"] = (self.patch_k * 3,)
        shapes["dec.wk"] = (h, 3)
        shapes["dec.bk"] = (3,)
        shapes.update(attention_param_shapes(self.d0, self.enc_protein.out_layout))
        for head, d_in in (("pocket", 2 * self.d0), ("int", self.fused_dim), ("aff", self.fused_dim)):
            shapes[f"{head}.w1"] = (d_in, h)
            shapes[f"{head}.b1"] = (h,)
            shapes[f"{head}.w2"] = (h, 1)
            shapes[f"{head}.b2"] = (1,)
        shapes["bond.w"] = (2, 5)  # pair summary -> bond-type logits incl. no-bond
        shapes["bond.b"] = (5,)
        return shapes

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in sorted(self.param_shapes().items()):
            if name.split(".")[-1].startswith("b"):
                params[name] = np.zeros(shape)
            elif name == "codebook":
                # moderate spread keeps code distances informative from step 0
                params[name] = 0.5 * rng.standard_normal(shape)
            else:
                params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        return params

    # -- encoding ----------------------------------------------------------
    def encoder_for(self, molecule_type: str) -> tuple[Encoder, str]:
        if molecule_type == "protein":
            return self.enc_protein, "encp"
        return self.enc_molecule, "encm"

    def precompute_geometry(self, points: np.ndarray, molecule_type: str) -> dict:
        enc, _ = self.encoder_for(molecule_type)
        nbr = knn_indices(np.asarray(points), enc.conv_k)
        return conv_geometry(points, nbr, enc.basis, enc.max_order)

    def encode(self, params: dict, features, points, molecule_type: str,
               geom: dict | None = None) -> IrrepsField:
        enc, prefix = self.encoder_for(molecule_type)
        scoped = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}
        return enc.apply(scoped, features, points, geom=geom)

    def patch_tokens(self, params: dict, field: IrrepsField, member_idx: np.ndarray,
                     molecule_type: str) -> Tensor:
        """Mean-pool order-0 and order-1 features over patch members, then lift
        to d_code. The order-1 block keeps local orientation in the token."""
        prefix = "liftp" if molecule_type == "protein" else "liftm"
        p, k = member_idx.shape
        flat_idx = member_idx.reshape(-1)
        pooled = []
        for l in (0, 1):
            ch = field.channels[l]
            n, c, m = ch.shape
            grouped = ad.gather(ad.reshape(ch, (n, c * m)), flat_idx)
            pooled.append(ad.reduce_mean(ad.reshape(grouped, (p, k, c * m)), axis=1))
        both = ad.concat(pooled, axis=1)
        return ad.add(ad.matmul(both, params[f"{prefix}.w"]), ad.reshape(params[f"{prefix}.b"], (1, -1)))

    # -- decoder and heads -------------------------------------------------
    def decode_tokens(self, params: dict, tokens: Tensor, context: Tensor,
                      centers: np.ndarray | None = None):
        """Map patch tokens (+ a visible-context vector and the patch-center
        offset from the cloud centroid) to coordinates and curvature
        probabilities."""
        t = tokens.shape[0]
        ctx = ad.as_tensor(context)
        if ctx.ndim == 1:
            ctx = ad.reshape(ctx, (1, -1))
            if t > 1:
                ctx = ad.concat([ctx] * t, axis=0)
        if centers is None:
            centers = np.zeros((t, 3))
        x = ad.concat([tokens, ctx, ad.as_tensor(centers)], axis=1)
        h = ad.tanh(ad.add(ad.matmul(x, params["dec.w1"]), ad.reshape(params["dec.b1"], (1, -1))))
        coords = ad.add(ad.matmul(h, params["dec.wc"]), ad.reshape(params["dec.bc"], (1, -1)))
        coords = ad.reshape(coords, (t, self.patch_k, 3))
        kurt = ad.add(ad.matmul(h, params["dec.wk"]), ad.reshape(params["dec.bk"], (1, -1)))
        psi = ad.softmax(kurt, axis=1)
        return coords, psi

    def _mlp_head(self, params: dict, name: str, x: Tensor, final):
        h = ad.tanh(ad.add(ad.matmul(x, params[f"{name}.w1"]), ad.reshape(params[f"{name}.b1"], (1, -1))))
        out = ad.add(ad.matmul(h, params[f"{name}.w2"]), ad.reshape(params[f"{name}.b2"], (1, -1)))
        return final(out) if final is not None else out

    def pocket_head(self, params: dict, per_point: Tensor) -> Tensor:
        return ad.reshape(self._mlp_head(params, "pocket", per_point, ad.sigmoid), (-1,))

    def interaction_head(self, params: dict, fused: Tensor) -> Tensor:
        x = ad.reshape(fused, (1, -1))
        return ad.reshape(self._mlp_head(params, "int", x, ad.sigmoid), ())

    def affinity_head(self, params: dict, fused: Tensor) -> Tensor:
        x = ad.reshape(fused, (1, -1))
        return ad.reshape(self._mlp_head(params, "aff", x, None), ())

    def fuse(self, params: dict, receptor: IrrepsField, ligand: IrrepsField):
        return equivariant_attention(receptor, ligand, params, fused_pool=self.cfg.fused_pool)


# ---------------------------------------------------------------------------
# parameter plumbing and optimizers
# ---------------------------------------------------------------------------

def as_tensors(params: dict[str, np.ndarray], trainable=None) -> dict[str, Tensor]:
    """Wrap parameter arrays as graph leaves (all trainable by default)."""
    out = {}
    for name, arr in params.items():
        rg = True if trainable is None else name in trainable
        out[name] = Tensor(arr, requires_grad=rg, op="param")
    return out


def collect_grads(params_t: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros(t.shape))
        for name, t in params_t.items()
        if t.requires_grad
    }


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients down when their global norm exceeds ``max_norm``."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def sgd_momentum_step(params, grads, state, lr: float, momentum: float = 0.9):
    """In-place SGD with momentum; ``state`` holds per-parameter velocity."""
    for name, g in grads.items():
        v = state.get(name)
        v = momentum * v - lr * g if v is not None else -lr * g
        state[name] = v
        params[name] = params[name] + v


def adam_step(params, grads, state, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay: float = 0.0):
    """In-place Adam with decoupled weight decay; ``state`` holds moments."""
    t = state.get("_t", 0) + 1
    state["_t"] = t
    for name, g in grads.items():
        m = state.get(f"m.{name}", np.zeros_like(g))
        v = state.get(f"v.{name}", np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state[f"m.{name}"] = m
        state[f"v.{name}"] = v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * params[name]
        params[name] = params[name] - lr * update
