"""Stage 4: gradient-driven ligand generation inside a receptor pocket.

A ligand is a differentiable state (coordinates + per-point feature channels)
optimized by projected gradient descent on the composite docking objective.
Updates are repaired onto the validity region (bond lengths, clashes,
valences), then decoded into discrete molecules or residue sequences by
gradient-biased categorical sampling with an optional motif template bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .finetune import bce, geometric_pseudolabels
from .model import PipelineModel
from .structures import (
    AA_ELEMENT_PROFILE,
    AMINO_ACIDS,
    Atom,
    Bond,
    MOLECULE_TYPES,
    MolecularStructure,
    VDW_RADII,
)

__all__ = [
    "InversionState",
    "DecodedMolecule",
    "DecodedProtein",
    "RepairError",
    "ReceptorContext",
    "MOLECULE_FEATURE_DIM",
    "PROTEIN_FEATURE_DIM",
    "V_MAX",
    "anneal_step_size",
    "wrap_torsion",
    "state_features",
    "composite_objective",
    "pgd_step",
    "repair_state",
    "sample_atom_types",
    "infer_bonds",
    "motif_prior",
    "validity_repair",
    "decode_molecule",
    "decode_protein",
    "accept_modification",
    "prepare_receptor",
    "initial_state",
    "run_inversion",
]

MOLECULE_FEATURE_DIM = 12  # 8 type logits | charge | 2 hybridization logits | polarity
PROTEIN_FEATURE_DIM = 25   # 20 residue logits | phi | psi | 3 rotamer logits

#: Maximum total bond order per element (aromatic bonds cost 1.5).
V_MAX = {"C": 4.0, "N": 3.0, "O": 2.0, "S": 2.0, "H": 1.0}

# indicator rows over MOLECULE_TYPES = (C.sp3, C.sp2, H, O.sp3, O.sp2, N.sp3, N.sp2, S.sp2)
_SET_ONS = np.array([0, 0, 0, 1, 1, 1, 1, 1], dtype=float)
_SET_ON = np.array([0, 0, 0, 1, 1, 1, 1, 0], dtype=float)
_SET_CS = np.array([1, 1, 0, 0, 0, 0, 0, 1], dtype=float)
_SET_C = np.array([1, 1, 0, 0, 0, 0, 0, 0], dtype=float)
# hybridization channels (sp3, sp2) mapped onto subtype logits
_HYB_MAP = np.array(
    [[1, 0], [0, 1], [0, 0], [1, 0], [0, 1], [1, 0], [0, 1], [0, 1]], dtype=float
)

#: Ring/functional-group templates with atom-type logit bias profiles.
MOTIF_TEMPLATES = {
    "benzene": np.array([0, 1, 0, 0, 0, 0, 0, 0], dtype=float),
    "pyridine": np.array([0, 0.8, 0, 0, 0, 0, 0.2, 0], dtype=float),
    "furan": np.array([0, 0.8, 0, 0, 0.2, 0, 0, 0], dtype=float),
    "pyrrole": np.array([0, 0.8, 0, 0, 0, 0, 0.2, 0], dtype=float),
    "thiophene": np.array([0, 0.8, 0, 0, 0, 0, 0, 0.2], dtype=float),
    "imidazole": np.array([0, 0.6, 0, 0, 0, 0, 0.4, 0], dtype=float),
    "carboxyl": np.array([0.4, 0, 0, 0.3, 0.3, 0, 0, 0], dtype=float),
    "amide": np.array([0.3, 0.1, 0, 0, 0.3, 0.3, 0, 0], dtype=float),
}
_SIX_RING = ("benzene", "pyridine")
_FIVE_RING = ("furan", "pyrrole", "thiophene", "imidazole")
_FUNCTIONAL = ("carboxyl", "amide")

#: Three canonical side-chain torsion combinations per residue (chi angles in
#: degrees); GLY/ALA have no rotatable side chain.
ROTAMER_TABLE = {
    aa: ((-60.0,), (180.0,), (60.0,)) for aa in AMINO_ACIDS
}
ROTAMER_TABLE["GLY"] = ((), (), ())
ROTAMER_TABLE["ALA"] = ((), (), ())
for _aa in ("ARG", "LYS", "MET", "GLU", "GLN"):
    ROTAMER_TABLE[_aa] = ((-60.0, 180.0), (180.0, 180.0), (60.0, 180.0))


class RepairError(RuntimeError):
    """Validity repair failed to reach a fixed point."""


@dataclass
class InversionState:
    """Differentiable ligand state: coordinates, feature channels, trace."""

    x: np.ndarray                       # (N, 3)
    f: np.ndarray                       # (N, d_f)
    molecule_type: str                  # "small-molecule" | "protein"
    t: int = 0
    eta: float = 0.0
    trace: list = field(default_factory=list)
    seed: int = 0

    def copy(self) -> "InversionState":
        return InversionState(self.x.copy(), self.f.copy(), self.molecule_type,
                              self.t, self.eta, list(self.trace), self.seed)


@dataclass
class DecodedMolecule:
    structure: MolecularStructure
    motifs: list


@dataclass
class DecodedProtein:
    sequence: list[str]
    phi: np.ndarray
    psi: np.ndarray
    rotamers: np.ndarray               # index into ROTAMER_TABLE entries

    def to_text(self) -> str:
        lines = ["residue phi psi rotamer"]
        for i, aa in enumerate(self.sequence):
            lines.append(f"{aa} {self.phi[i]:.3f} {self.psi[i]:.3f} {int(self.rotamers[i])}")
        return "\n".join(lines) + "\n"


def anneal_step_size(t: int, total: int, eta_max: float = 1e-3, eta_min: float = 1e-5) -> float:
    """Cosine schedule from eta_max at t=0 to eta_min at t=total."""
    if not 0 <= t < max(total, 1):
        raise ValueError(f"step index {t} outside [0, {total})")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / total))


def wrap_torsion(value: float) -> float:
    """Wrap degrees into the canonical (-180, 180] interval."""
    wrapped = (value + 180.0) % 360.0 - 180.0
    return 180.0 if wrapped == -180.0 else wrapped


# ---------------------------------------------------------------------------
# differentiable featurization bridge (state -> stage-1 feature layout)
# ---------------------------------------------------------------------------

def _pairwise_omega(x: Tensor, x_np: np.ndarray, r_chem: float, r_probe: float, eps: float):
    """Probe-scaled weight matrix over ligand points with a frozen cutoff mask.

    Each point counts itself at an effective probe distance; off-diagonal
    weights use the live distances, masked by the current-neighborhood cutoff.
    """
    n = x_np.shape[0]
    dist_np = np.linalg.norm(x_np[:, None, :] - x_np[None, :, :], axis=2)
    mask = ((dist_np <= r_chem) & ~np.eye(n, dtype=bool)).astype(float)
    diff = ad.sub(ad.reshape(x, (n, 1, 3)), ad.reshape(x, (1, n, 3)))
    d = ad.power(ad.add(ad.reduce_sum(ad.mul(diff, diff), axis=2), 1e-24), 0.5)
    omega_raw = ad.div(1.0, ad.add(ad.mul(d, 1.0 / r_probe), eps))
    self_weight = (1.0 / (1.0 + eps)) * np.eye(n)
    return ad.add(ad.mul(omega_raw, mask), self_weight)


def _neighborhood_average(omega: Tensor, values: Tensor) -> Tensor:
    denom = ad.matmul(omega, np.ones((omega.shape[0], 1)))
    if values.ndim == 1:
        values = ad.reshape(values, (-1, 1))
    return ad.div(ad.matmul(omega, values), denom)


def _geom_block(x: Tensor, x_np: np.ndarray, k_geom: int) -> Tensor:
    """Differentiable geometric descriptors over frozen k-NN neighborhoods:
    scaled covariance trace, covariance determinant, and a squashed density."""
    n = x_np.shape[0]
    k = min(k_geom, n - 1)
    dist_np = np.linalg.norm(x_np[:, None, :] - x_np[None, :, :], axis=2)
    np.fill_diagonal(dist_np, np.inf)
    nbr = np.argsort(dist_np, axis=1, kind="stable")[:, :k]

    nbr_pts = ad.reshape(ad.gather(x, nbr.reshape(-1)), (n, k, 3))
    mu = ad.reduce_mean(nbr_pts, axis=1, keepdims=True)
    c = ad.sub(nbr_pts, mu)                                   # (n, k, 3)
    cov = {}
    for a in range(3):
        for b in range(a, 3):
            cov[(a, b)] = ad.reduce_mean(ad.mul(c[:, :, a], c[:, :, b]), axis=1)
    trace = ad.add(ad.add(cov[(0, 0)], cov[(1, 1)]), cov[(2, 2)])
    det = ad.sub(
        ad.add(
            ad.mul(cov[(0, 0)], ad.sub(ad.mul(cov[(1, 1)], cov[(2, 2)]),
                                       ad.mul(cov[(1, 2)], cov[(1, 2)]))),
            ad.mul(cov[(0, 2)], ad.sub(ad.mul(cov[(0, 1)], cov[(1, 2)]),
                                       ad.mul(cov[(1, 1)], cov[(0, 2)])))),
        ad.mul(cov[(0, 1)], ad.sub(ad.mul(cov[(0, 1)], cov[(2, 2)]),
                                   ad.mul(cov[(1, 2)], cov[(0, 2)]))),
    )
    diffs = ad.sub(nbr_pts, ad.reshape(x, (n, 1, 3)))
    dists = ad.power(ad.add(ad.reduce_sum(ad.mul(diffs, diffs), axis=2), 1e-24), 0.5)
    d_raw = ad.reduce_mean(dists, axis=1)
    density = ad.div(d_raw, ad.add(d_raw, 2.0))
    return ad.concat(
        [ad.reshape(ad.mul(trace, 0.1), (n, 1)), ad.reshape(det, (n, 1)),
         ad.reshape(density, (n, 1))],
        axis=1,
    )


def state_features(x: Tensor, f: Tensor, molecule_type: str, cfg: RunConfig) -> Tensor:
    """Map the differentiable state onto the stage-1 feature layout.

    Soft atom-type probabilities stand in for the hard element indicators of
    surface featurization, so the output matches the encoder's expected
    [chem | atom | geom | flag | coords] layout and is differentiable in both
    coordinates and feature channels.
    """
    x_np = x.values if isinstance(x, Tensor) else np.asarray(x)
    x = ad.as_tensor(x)
    f = ad.as_tensor(f)
    n = x_np.shape[0]
    omega = _pairwise_omega(x, x_np, cfg.r_chem, cfg.r_probe, cfg.eps_omega)

    if molecule_type == "small-molecule":
        logits = ad.add(f[:, 0:8], ad.matmul(f[:, 9:11], _HYB_MAP.T))
        p = ad.softmax(logits, axis=1)
        charge = f[:, 8]
        polarity = f[:, 11]
        hb_atom = ad.mul(ad.matmul(p, _SET_ONS[:, None]), ad.reshape(ad.sigmoid(polarity), (n, 1)))
        chg_atom = ad.matmul(p, (_SET_ON - _SET_CS)[:, None])
        phob_atom = ad.matmul(p, _SET_C[:, None])
        atom_block = _neighborhood_average(omega, p)
        charge_shift = ad.tanh(_neighborhood_average(omega, charge))
        flag = 1.0
    elif molecule_type == "protein":
        p = ad.softmax(f[:, 0:20], axis=1)
        elem = ad.matmul(p, AA_ELEMENT_PROFILE)               # (n, 6): C H O N S Se
        hb_atom = ad.reshape(
            ad.add(ad.add(elem[:, 2], elem[:, 3]), elem[:, 4]), (n, 1)
        )
        chg_atom = ad.reshape(
            ad.sub(ad.add(elem[:, 2], elem[:, 3]), ad.add(elem[:, 0], elem[:, 4])), (n, 1)
        )
        phob_atom = ad.reshape(elem[:, 0], (n, 1))
        atom_block = _neighborhood_average(omega, elem)
        charge_shift = ad.constant(np.zeros((n, 1)))
        flag = 0.0
    else:
        raise ValueError(f"unknown molecule type {molecule_type!r}")

    h_bond = _neighborhood_average(omega, hb_atom)
    chg = ad.clip(ad.add(_neighborhood_average(omega, chg_atom), ad.mul(charge_shift, 0.25)),
                  -1.0, 1.0)
    phob = _neighborhood_average(omega, phob_atom)
    aro = ad.clip(ad.mul(phob, 1.0 / 4.5), 0.0, 1.0)
    chem_block = ad.concat([h_bond, chg, phob, aro], axis=1)
    geom_block = _geom_block(x, x_np, cfg.k_geom)
    flags = np.full((n, 1), flag)
    return ad.concat([chem_block, atom_block, geom_block, ad.constant(flags), x], axis=1)


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

@dataclass
class ReceptorContext:
    """Receptor-side constants reused across every inversion step."""

    points: np.ndarray
    field_values: dict                  # numpy irreps channels
    cloud_features: np.ndarray

    def field(self):
        from .equivariant import IrrepsField

        return IrrepsField({l: v for l, v in self.field_values.items()})


def prepare_receptor(mdl: PipelineModel, params: dict, cloud) -> ReceptorContext:
    field = mdl.encode(params, cloud.features, cloud.points, "protein",
                       geom=mdl.precompute_geometry(cloud.points, "protein"))
    return ReceptorContext(np.asarray(cloud.points), field.values(), np.asarray(cloud.features))


def pocket_prior(mdl: PipelineModel, params: dict, ctx: ReceptorContext) -> np.ndarray:
    """Pocket probabilities with a zeroed attended block (no ligand yet)."""
    d = mdl.d0
    zr0 = ctx.field_values[0].reshape(-1, d)
    per_point = np.concatenate([zr0, np.zeros_like(zr0)], axis=1)
    return mdl.pocket_head(params, ad.constant(per_point)).values


def composite_objective(state: InversionState, ctx: ReceptorContext, mdl: PipelineModel,
                        params: dict, cfg: RunConfig, frozen: dict | None = None,
                        need_grad: bool = True):
    """Evaluate F = alpha * pocket + beta * interaction + affinity and its
    gradients with respect to the ligand state.

    Neighborhood structure (conv KNN, pseudo-labels) is frozen per call in
    ``frozen`` so finite-difference checks see a smooth function; pass the
    returned dict back in to reuse it.
    """
    if len(ctx.points) == 0:
        raise ad.DomainError("composite objective needs a non-empty receptor cloud")
    from .equivariant import conv_geometry, knn_indices

    x_t = Tensor(state.x, requires_grad=need_grad, op="param")
    f_t = Tensor(state.f, requires_grad=need_grad, op="param")
    if frozen is None:
        enc, _ = mdl.encoder_for(state.molecule_type)
        frozen = {
            "nbr": knn_indices(state.x, enc.conv_k),
            "y_geom": geometric_pseudolabels(ctx.points, state.x,
                                             cfg.interface_cutoff_ligand),
        }
    feats = state_features(x_t, f_t, state.molecule_type, cfg)
    enc, _ = mdl.encoder_for(state.molecule_type)
    geom = conv_geometry(x_t, frozen["nbr"], enc.basis, enc.max_order)
    z_l = mdl.encode(params, feats, x_t, state.molecule_type, geom=geom)
    z_r = ctx.field()
    attended, fused, _ = mdl.fuse(params, z_r, z_l)
    d = mdl.d0
    orig0 = ctx.field_values[0].reshape(-1, d)
    att0 = ad.reshape(attended.channels[0], (-1, d))
    per_point = ad.concat([ad.constant(orig0), att0], axis=1)
    pocket = mdl.pocket_head(params, per_point)

    y_geom = frozen["y_geom"]
    l_pocket = ad.add(
        ad.reduce_mean(bce(pocket, y_geom)),
        ad.mul(ad.reduce_mean(ad.power(ad.sub(ad.clip(pocket, 1e-7, 1 - 1e-7), y_geom), 2.0)),
               cfg.lambda_p),
    )
    if cfg.interaction_mode == "per-point":
        y_int = ad.reshape(mdl._mlp_head(params, "int", per_point, ad.sigmoid), (-1,))
        gate = ad.reduce_max(ad.mul(pocket, y_int))
    else:
        y_int = mdl.interaction_head(params, fused)
        gate = ad.mul(ad.reduce_max(pocket), y_int)
    l_int = ad.reduce_mean(ad.mul(pocket, bce(y_int, 1.0)))
    dg_hat = mdl.affinity_head(params, fused)
    err = ad.sub(dg_hat, cfg.dg_target)
    l_dg = ad.mul(ad.clip(gate, cfg.tau_conf, None), ad.mul(err, err))
    total = ad.add(ad.add(ad.mul(l_pocket, cfg.alpha), ad.mul(l_int, cfg.beta)), l_dg)

    parts = {
        "F": total.item(),
        "pocket": l_pocket.item(),
        "interaction": l_int.item(),
        "dg_hat": dg_hat.item(),
    }
    if not np.isfinite(parts["F"]):
        raise ad.DomainError("non-finite composite objective")
    if need_grad:
        ad.backward(total)
        gx = x_t.grad if x_t.grad is not None else np.zeros_like(state.x)
        gf = f_t.grad if f_t.grad is not None else np.zeros_like(state.f)
        return total, parts, gx, gf, frozen
    return total, parts, None, None, frozen


# ---------------------------------------------------------------------------
# continuous-state repair and the PGD step
# ---------------------------------------------------------------------------

def _greedy_bonds(dist: np.ndarray, budgets: np.ndarray, bond_min: float, bond_max: float):
    """Provisional single bonds: pairs within range accepted by ascending
    distance subject to per-point valence budgets."""
    n = dist.shape[0]
    pairs = [
        (dist[i, j], i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if dist[i, j] <= bond_max
    ]
    pairs.sort(key=lambda t: (t[0], t[1], t[2]))
    remaining = budgets.astype(float).copy()
    accepted = []
    for _, i, j in pairs:
        if remaining[i] >= 1.0 and remaining[j] >= 1.0:
            accepted.append((i, j))
            remaining[i] -= 1.0
            remaining[j] -= 1.0
    return accepted


_REPAIR_MARGIN = 1.02  # overshoot when fixing violations; damps pair ping-pong


def _pair_target(d: float, is_bonded: bool, cfg: RunConfig) -> float:
    """Valid distance for a pair; violations land slightly inside the region."""
    if is_bonded:
        if d < cfg.bond_min:
            return min(cfg.bond_min * _REPAIR_MARGIN, cfg.bond_max)
        if d > cfg.bond_max:
            return max(cfg.bond_max / _REPAIR_MARGIN, cfg.bond_min)
        return d
    return d if d >= cfg.clash_floor else cfg.clash_floor * _REPAIR_MARGIN


def _geometric_sweeps(pts: np.ndarray, bonded: np.ndarray, cfg: RunConfig,
                      rounds: int) -> np.ndarray:
    """Sequential pairwise projections until no pair moves; None on failure."""
    n = len(pts)
    for _ in range(rounds):
        moved = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                d = float(np.linalg.norm(pts[j] - pts[i]))
                target = _pair_target(d, bool(bonded[i, j]), cfg)
                if target == d:
                    continue
                axis = pts[j] - pts[i]
                norm = np.linalg.norm(axis)
                axis = axis / norm if norm > 1e-12 else _tiebreak_axis(i, j)
                shift = 0.5 * (target - d)
                pts[i] -= shift * axis
                pts[j] += shift * axis
                moved = max(moved, abs(shift))
        if moved < 1e-9:
            return pts
    return None


def repair_state(x: np.ndarray, types: list[str], cfg: RunConfig,
                 rounds: int | None = None) -> np.ndarray:
    """Project coordinates onto the validity region (continuous mode).

    Provisional bonds are the greedily accepted close pairs; bonded pairs are
    pushed into [bond_min, bond_max] and everything else out to the clash
    floor, iterating to a fixed point.
    """
    pts = np.array(x, dtype=float)
    n = len(pts)
    if n < 2:
        return pts
    budgets = np.array([V_MAX.get(t.split(".")[0], 4.0) for t in types])
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    bonded_pairs = _greedy_bonds(dist, budgets, cfg.bond_min, cfg.bond_max)
    bonded = np.zeros((n, n), dtype=bool)
    for i, j in bonded_pairs:
        bonded[i, j] = bonded[j, i] = True
    rounds = cfg.max_repair_rounds if rounds is None else rounds
    out = _geometric_sweeps(pts, bonded, cfg, rounds)
    if out is None:
        raise RepairError(f"state repair did not stabilize in {rounds} rounds")
    return out


def _tiebreak_axis(i: int, j: int) -> np.ndarray:
    rng = np.random.default_rng(i * 100000 + j)
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _argmax_types(f: np.ndarray, molecule_type: str) -> list[str]:
    if molecule_type == "small-molecule":
        logits = f[:, 0:8] + f[:, 9:11] @ _HYB_MAP.T
        return [MOLECULE_TYPES[i] for i in logits.argmax(axis=1)]
    return ["C"] * len(f)  # residue-level points behave like carbon centers


def pgd_step(state: InversionState, gx: np.ndarray, gf: np.ndarray, eta: float,
             cfg: RunConfig) -> tuple[InversionState, np.ndarray, float]:
    """One projected descent update; returns (new state, gradient mapping, eta used).

    Repair failures halve the step size and retry up to the configured limit.
    """
    if eta <= 0:
        raise ValueError("step size must be positive")
    eta_try = eta
    for _ in range(cfg.max_step_retries + 1):
        x_prop = state.x - eta_try * gx
        f_prop = state.f - eta_try * gf
        try:
            x_rep = repair_state(x_prop, _argmax_types(f_prop, state.molecule_type), cfg)
        except RepairError:
            eta_try *= 0.5
            continue
        new = InversionState(x_rep, f_prop, state.molecule_type, state.t + 1, eta_try,
                             state.trace, state.seed)
        delta = np.concatenate([(state.x - x_rep).ravel(), (state.f - f_prop).ravel()])
        g_eta = delta / eta_try
        return new, g_eta, eta_try
    raise RepairError("pgd step exhausted repair retries")


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def sample_atom_types(logits: np.ndarray, grad_f: np.ndarray, gamma: float,
                      rng: np.random.Generator):
    """Gradient-biased categorical draw per row; returns (indices, probs)."""
    z = logits - gamma * grad_f
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cum = np.cumsum(p, axis=1)
    u = rng.random(len(p))
    idx = (u[:, None] > cum).sum(axis=1)
    return idx, p


def infer_bonds(types: list[str], coords: np.ndarray, pair_logits, grad_g, gamma: float,
                rng: np.random.Generator, cfg: RunConfig) -> list[Bond]:
    """Sample bonds over candidate pairs within the bond-length window.

    Types are drawn from a gradient-biased softmax over {single, double,
    triple, aromatic, none}; candidates are visited by ascending distance and
    accepted subject to the running valence budget of both endpoints.
    """
    n = len(types)
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    budgets = np.array([V_MAX.get(t.split(".")[0], 4.0) for t in types])
    orders = np.array([1.0, 2.0, 3.0, 1.5])
    candidates = [
        (dist[i, j], i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if cfg.bond_min <= dist[i, j] <= cfg.bond_max
    ]
    candidates.sort(key=lambda t: (t[0], t[1], t[2]))
    remaining = budgets.copy()
    bonds: list[Bond] = []
    for _, i, j in candidates:
        logits = np.asarray(pair_logits[(i, j)], dtype=float)
        g = np.asarray(grad_g[(i, j)], dtype=float) if grad_g else np.zeros(5)
        z = logits - gamma * g
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        choice = int((rng.random() > np.cumsum(p)).sum())
        if choice == 4:  # no bond
            continue
        cost = orders[choice]
        if remaining[i] < cost or remaining[j] < cost:
            continue
        bonds.append(Bond(i, j, float(orders[choice])))
        remaining[i] -= cost
        remaining[j] -= cost
    return bonds


def motif_prior(points: np.ndarray, kappa1: np.ndarray, density: np.ndarray,
                cfg: RunConfig, seed: int = 0, valid: np.ndarray | None = None):
    """Cluster high-curvature, high-density points and assign ring/functional
    templates by cluster size; returns (per-point weights, template names,
    per-point cluster assignment)."""
    n = len(points)
    score = np.asarray(kappa1) * (1.0 - np.asarray(density))
    if n == 0 or not np.any(np.isfinite(score)):
        return np.zeros(n), [], np.full(n, -1)
    threshold = np.quantile(score, 0.75)
    sel = np.where(score >= threshold)[0]
    if len(sel) == 0:
        return np.zeros(n), [], np.full(n, -1)
    k = max(1, len(sel) // 8)
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(sel, size=min(k, len(sel)), replace=False)]
    for _ in range(20):
        d = np.linalg.norm(points[sel][:, None, :] - centers[None, :, :], axis=2)
        assign = d.argmin(axis=1)
        new_centers = np.array([
            points[sel][assign == c].mean(axis=0) if np.any(assign == c) else centers[c]
            for c in range(len(centers))
        ])
        if np.allclose(new_centers, centers):
            break
        centers = new_centers

    templates = []
    for c in range(len(centers)):
        size = int((assign == c).sum())
        if size >= 6:
            templates.append(_SIX_RING[c % len(_SIX_RING)])
        elif size == 5:
            templates.append(_FIVE_RING[c % len(_FIVE_RING)])
        else:
            templates.append(_FUNCTIONAL[c % len(_FUNCTIONAL)])

    d_all = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    nearest = d_all.argmin(axis=1)
    weights = np.exp(-d_all.min(axis=1) ** 2 / cfg.sigma_motif**2)
    if valid is not None:
        weights = weights * np.asarray(valid, dtype=float)
    return weights, templates, nearest


def _find_ring(bonds_adj: dict, i: int, j: int, sizes=(5, 6)) -> bool:
    """True when edge (i, j) lies on a simple cycle of one of the given sizes."""
    max_len = max(sizes) - 1

    def dfs(node, target, depth, visited):
        if depth > max_len:
            return False
        for nxt in bonds_adj.get(node, ()):
            if nxt == target and depth + 1 in sizes:
                return True
            if nxt not in visited and depth + 1 < max_len + 1:
                if dfs(nxt, target, depth + 1, visited | {nxt}):
                    return True
        return False

    # walk from j back to i without immediately reusing the (i, j) edge
    for start in bonds_adj.get(j, ()):
        if start == i:
            continue
        if start not in (i, j) and dfs(start, i, 2, {i, j, start}):
            return True
    return False


def validity_repair(molecule: MolecularStructure, cfg: RunConfig) -> MolecularStructure:
    """Fixed-order repair passes until stable: demote non-ring aromatics,
    drop excess valence (longest bonds first), project bond lengths into
    range, then push clashes apart. Raises RepairError on oscillation."""
    coords = molecule.coords.copy()
    bonds = list(molecule.bonds)
    types = [a.type_label for a in molecule.atoms]
    n = len(coords)

    for _ in range(cfg.max_repair_rounds):
        changed = False
        # aromatic bonds must sit on 5/6-rings
        adj: dict[int, set] = {}
        for b in bonds:
            adj.setdefault(b.i, set()).add(b.j)
            adj.setdefault(b.j, set()).add(b.i)
        new_bonds = []
        for b in bonds:
            if b.aromatic and not _find_ring(adj, b.i, b.j):
                new_bonds.append(Bond(b.i, b.j, 1.0))
                changed = True
            else:
                new_bonds.append(b)
        bonds = new_bonds

        # valence pass: drop longest bonds past the budget
        dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
        while True:
            load = np.zeros(n)
            for b in bonds:
                load[b.i] += b.order
                load[b.j] += b.order
            over = [
                i for i in range(n)
                if load[i] > V_MAX.get(types[i].split(".")[0], 4.0)
            ]
            if not over:
                break
            i = over[0]
            incident = [b for b in bonds if b.i == i or b.j == i]
            incident.sort(key=lambda b: (-dist[b.i, b.j], b.i, b.j))
            bonds.remove(incident[0])
            changed = True

        # geometric passes
        bonded = np.zeros((n, n), dtype=bool)
        for b in bonds:
            bonded[b.i, b.j] = bonded[b.j, b.i] = True
        moved = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                d = float(np.linalg.norm(coords[j] - coords[i]))
                target = _pair_target(d, bool(bonded[i, j]), cfg)
                if target == d:
                    continue
                axis = coords[j] - coords[i]
                norm = np.linalg.norm(axis)
                axis = axis / norm if norm > 1e-12 else _tiebreak_axis(i, j)
                shift = 0.5 * (target - d)
                coords[i] -= shift * axis
                coords[j] += shift * axis
                moved = max(moved, abs(shift))
        if not changed and moved < 1e-9:
            atoms = [
                Atom(a.element, tuple(coords[k]), a.radius, a.hybridization, a.name)
                for k, a in enumerate(molecule.atoms)
            ]
            return MolecularStructure(atoms, bonds, [], "small-molecule")
    raise RepairError(f"validity repair did not stabilize in {cfg.max_repair_rounds} rounds")


def decode_molecule(state: InversionState, grad_f: np.ndarray | None, params: dict,
                    cfg: RunConfig, seed: int, motif_bias: bool = True) -> DecodedMolecule:
    """Decode the continuous state into a repaired molecule."""
    rng = np.random.default_rng(seed)
    f = state.f
    logits = f[:, 0:8] + f[:, 9:11] @ _HYB_MAP.T
    g = grad_f[:, 0:8] if grad_f is not None else np.zeros_like(logits)

    motifs = []
    if motif_bias and len(state.x) >= 2:
        feats = state_features(ad.constant(state.x), ad.constant(f),
                               "small-molecule", cfg).values
        kappa1 = feats[:, 12]  # covariance-trace proxy column of the geometry block
        density = feats[:, 14]
        hydrogens = logits.argmax(axis=1) == MOLECULE_TYPES.index("H")
        weights, templates, nearest = motif_prior(state.x, kappa1, density, cfg,
                                                  seed=seed, valid=~hydrogens)
        for k, name in enumerate(templates):
            members = np.where((nearest == k) & (weights > 1e-3))[0]
            motifs.append({"template": name, "members": members.tolist()})
            if len(members):
                logits = logits.copy()
                logits[members] += cfg.motif_bias * weights[members, None] * MOTIF_TEMPLATES[name]

    idx, _ = sample_atom_types(logits, g, cfg.gamma_bias, rng)
    types = [MOLECULE_TYPES[i] for i in idx]

    pair_logits = {}
    w, b = params["bond.w"], params["bond.b"]
    w = w.values if isinstance(w, Tensor) else w
    b = b.values if isinstance(b, Tensor) else b
    n = len(types)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(state.x[i] - state.x[j]))
            summary = np.array([d - 1.5, 0.5 * (f[i, 8] + f[j, 8])])
            pair_logits[(i, j)] = summary @ w + b
    bonds = infer_bonds(types, state.x, pair_logits, None, cfg.gamma_bias, rng, cfg)

    atoms = []
    for k, t in enumerate(types):
        elem = t.split(".")[0]
        hyb = t.split(".")[1] if "." in t else None
        atoms.append(Atom(elem, tuple(state.x[k]), VDW_RADII[elem], hyb))
    structure = MolecularStructure(atoms, bonds, [], "small-molecule")
    repaired = validity_repair(structure, cfg)
    return DecodedMolecule(repaired, motifs)


def decode_protein(state: InversionState, grad_f: np.ndarray | None, cfg: RunConfig,
                   seed: int) -> DecodedProtein:
    """Decode residue identities, wrapped backbone torsions, and rotamers."""
    rng = np.random.default_rng(seed)
    f = state.f
    g = grad_f if grad_f is not None else np.zeros_like(f)
    res_idx, _ = sample_atom_types(f[:, 0:20], g[:, 0:20], cfg.gamma_bias, rng)
    sequence = [AMINO_ACIDS[i] for i in res_idx]
    phi = np.array([wrap_torsion(v) for v in f[:, 20]])
    psi = np.array([wrap_torsion(v) for v in f[:, 21]])
    rot_idx, _ = sample_atom_types(f[:, 22:25], g[:, 22:25], cfg.gamma_bias, rng)
    return DecodedProtein(sequence, phi, psi, rot_idx)


def accept_modification(candidates: list, ddg: np.ndarray, tau_acc: float,
                        rng: np.random.Generator):
    """Draw one candidate with probability softmax(-ddg / tau); None if empty."""
    if not candidates:
        return None
    z = -np.asarray(ddg, dtype=float) / tau_acc
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    choice = int((rng.random() > np.cumsum(p)).sum())
    return candidates[choice]


# ---------------------------------------------------------------------------
# the inversion loop
# ---------------------------------------------------------------------------

@dataclass
class InversionResult:
    best: object                         # DecodedMolecule | DecodedProtein
    best_objective: float
    state: InversionState
    trace: list
    converged: bool
    repair_failed: bool = False


def initial_state(ctx: ReceptorContext, mdl: PipelineModel, params: dict, cfg: RunConfig,
                  molecule_type: str, seed: int) -> InversionState:
    """Gaussian point blob at the predicted pocket centroid, repaired into the
    validity region, with small random feature logits."""
    rng = np.random.default_rng(seed)
    prior = pocket_prior(mdl, params, ctx)
    cutoff = np.quantile(prior, 0.9)
    chosen = ctx.points[prior >= cutoff]
    centroid = chosen.mean(axis=0) if len(chosen) else ctx.points.mean(axis=0)
    if molecule_type == "small-molecule":
        n, d_f = cfg.n_init_points, MOLECULE_FEATURE_DIM
    else:
        n, d_f = cfg.n_init_residues, PROTEIN_FEATURE_DIM
    x = centroid + cfg.sigma_init * rng.standard_normal((n, 3))
    f = 0.1 * rng.standard_normal((n, d_f))
    # the raw blob is dense; a one-time generous repair starts the loop valid
    x = repair_state(x, _argmax_types(f, molecule_type), cfg, rounds=100 * cfg.max_repair_rounds)
    return InversionState(x, f, molecule_type, seed=seed)


def _decode(state, grad_f, params, cfg, seed):
    if state.molecule_type == "small-molecule":
        return decode_molecule(state, grad_f, params, cfg, seed)
    return decode_protein(state, grad_f, cfg, seed)


def run_inversion(ctx: ReceptorContext, mdl: PipelineModel, params: dict, cfg: RunConfig,
                  seed: int = 0, molecule_type: str = "small-molecule",
                  mode: str = "continuous-pgd", start: InversionState | None = None,
                  steps: int | None = None) -> InversionResult:
    """Full stage-4 loop: descend, repair, periodically decode, track the best.

    Stops at the iteration budget, when the predicted affinity plateaus
    (|change| < eps over a 10-step window), or when it reaches the target.
    """
    if mode not in ("continuous-pgd", "discrete-accept"):
        raise ValueError(f"unknown inversion mode {mode!r}")
    t_total = cfg.t_invert if steps is None else steps
    state = start.copy() if start is not None else initial_state(
        ctx, mdl, params, cfg, molecule_type, seed)
    state.trace = []
    decode_seed = seed * 7919 + 13
    if t_total == 0:
        decoded = _decode(state, None, params, cfg, decode_seed)
        return InversionResult(decoded, float("nan"), state, [], False)

    best = None
    best_f = np.inf
    dg_window: list[float] = []
    converged = False
    repair_failed = False
    gf = None
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))

    for t in range(t_total):
        eta = anneal_step_size(t, t_total, cfg.eta_max, cfg.eta_min)
        _, parts, gx, gf, _ = composite_objective(state, ctx, mdl, params, cfg)
        if t % cfg.decode_every == 0 and parts["F"] < best_f:
            try:
                best = _decode(state, gf, params, cfg, decode_seed)
                best_f = parts["F"]
            except RepairError:
                repair_failed = True
        if mode == "continuous-pgd":
            try:
                new_state, g_eta, eta_used = pgd_step(state, gx, gf, eta, cfg)
            except RepairError:
                repair_failed = True
                break
            if cfg.assert_descent:
                _, parts_after, *_ = composite_objective(new_state, ctx, mdl, params, cfg,
                                                         need_grad=False)
                bound = parts["F"] - 0.5 * eta_used * float(g_eta @ g_eta) + 1e-6
                if parts_after["F"] > bound:
                    raise AssertionError(
                        f"descent violated at t={t}: {parts_after['F']:.6g} > {bound:.6g}"
                    )
            state = new_state
        else:
            state = _discrete_step(state, gx, gf, ctx, mdl, params, cfg, rng)
            g_eta = np.concatenate([gx.ravel(), gf.ravel()])
            eta_used = eta
        state.trace.append({
            "t": t, "eta": eta_used, "F": parts["F"], "pocket": parts["pocket"],
            "interaction": parts["interaction"], "dg_hat": parts["dg_hat"],
            "g_norm": float(np.linalg.norm(g_eta)),
        })
        dg_window.append(parts["dg_hat"])
        if len(dg_window) > 10:
            dg_window.pop(0)
            if abs(dg_window[-1] - dg_window[0]) < cfg.eps_dg:
                converged = True
                break
        if parts["dg_hat"] <= cfg.dg_target:
            converged = True
            break

    # final candidate: decode the terminal state when it improves on the best
    _, parts, *_ = composite_objective(state, ctx, mdl, params, cfg, need_grad=False)
    if parts["F"] < best_f or best is None:
        try:
            best = _decode(state, gf, params, cfg, decode_seed)
            best_f = parts["F"]
        except RepairError:
            repair_failed = True
    return InversionResult(best, best_f, state, state.trace, converged, repair_failed)


def _discrete_step(state, gx, gf, ctx, mdl, params, cfg, rng) -> InversionState:
    """Gradient-guided add/modify/delete with softmax acceptance on predicted
    affinity changes."""
    mags = np.linalg.norm(gx, axis=1)
    hot = int(np.argmax(mags))
    candidates = []
    # modify: nudge the hot point's features against the gradient
    mod = state.copy()
    mod.f[hot] -= 0.5 * gf[hot]
    candidates.append(mod)
    # add: new point near the hot position
    addx = state.x[hot] + 0.5 * rng.standard_normal(3)
    add = InversionState(np.vstack([state.x, addx]),
                         np.vstack([state.f, 0.1 * rng.standard_normal(state.f.shape[1])]),
                         state.molecule_type, state.t, state.eta, state.trace, state.seed)
    candidates.append(add)
    # delete: drop the hot point when enough points remain
    if len(state.x) > 4:
        keep = np.arange(len(state.x)) != hot
        candidates.append(InversionState(state.x[keep], state.f[keep], state.molecule_type,
                                         state.t, state.eta, state.trace, state.seed))
    ddg = []
    for cand in candidates:
        _, parts, *_ = composite_objective(cand, ctx, mdl, params, cfg, need_grad=False)
        ddg.append(parts["dg_hat"])
    chosen = accept_modification(candidates, np.asarray(ddg) - min(ddg), cfg.tau_acc, rng)
    new = chosen.copy()
    new.x = repair_state(new.x, _argmax_types(new.f, new.molecule_type), cfg)
    new.t = state.t + 1
    return new
