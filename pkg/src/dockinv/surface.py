"""Stage 1: differentiable surface point clouds, features, and patches.

The molecular surface is the ``r_probe`` iso-level of a smoothed distance
field over atom centers. Candidate points sampled around atoms are projected
onto the iso-surface by gradient descent, downsampled, equipped with normals
and per-point chemical/atomic/geometric features, and partitioned into
fixed-size patches via farthest point sampling + KNN.

Construction is rigid-motion equivariant: candidate perturbations are drawn
in a structure-intrinsic frame, and every later step depends only on pairwise
distances with deterministic tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .structures import MOLECULE_TYPES, PROTEIN_ELEMENTS, MolecularStructure

__all__ = [
    "SurfaceError",
    "InsufficientSurfaceError",
    "SurfacePointCloud",
    "PatchSet",
    "smoothed_sdf",
    "sdf_value_grad",
    "intrinsic_frame",
    "sample_candidates",
    "project_to_isosurface",
    "estimate_normals",
    "chemical_features",
    "atomic_features",
    "geometric_features",
    "assemble_features",
    "fps",
    "knn",
    "pool_patch_stats",
    "interface_labels",
    "build_surface",
]


class SurfaceError(ValueError):
    pass


class InsufficientSurfaceError(SurfaceError):
    """Fewer projected points survived than the requested sample size."""

    def __init__(self, survivors: int, requested: int):
        super().__init__(
            f"only {survivors} points converged to the iso-surface, need {requested}"
        )
        self.survivors = survivors
        self.requested = requested


@dataclass
class SurfacePointCloud:
    """Surface sample: points (N,3), unit normals (N,3), features (N,d)."""

    points: np.ndarray
    normals: np.ndarray
    features: np.ndarray
    molecule_type: str
    empty_flags: np.ndarray | None = None  # per-point empty-neighborhood marker

    def __init__(self, points, normals, features, molecule_type, empty_flags=None, validate=True):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.normals = np.ascontiguousarray(normals, dtype=float)
        self.features = np.ascontiguousarray(features, dtype=float)
        self.molecule_type = molecule_type
        self.empty_flags = empty_flags
        if validate and len(self.points):
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-9):
                raise SurfaceError("normals must be unit length within 1e-9")
            if self.features.ndim != 2 or self.features.shape[0] != self.points.shape[0]:
                raise SurfaceError("feature matrix must be (N, d)")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """FPS centers with fixed-size KNN member groups and pooled statistics."""

    center_indices: np.ndarray          # (P,)
    member_indices: np.ndarray          # (P, K)
    mean: np.ndarray                    # (P, d)
    var: np.ndarray                     # (P, d)
    interface: np.ndarray               # (P,) 0/1 labels
    radius_relaxed: np.ndarray          # (P,) True where members exceed r_patch
    labeled: bool = True                # False when no partner was supplied
    degenerate: np.ndarray | None = None


# ---------------------------------------------------------------------------
# smoothed signed distance field
# ---------------------------------------------------------------------------

def smoothed_sdf(x, coords: np.ndarray, radii: np.ndarray) -> ad.Tensor:
    """Differentiable smoothed SDF at ``x`` ((3,) or (P,3)); graph-recorded.

    Value is ``-fbar(x) * log sum_j exp(-|x - c_j| / sigma_j)`` with ``fbar``
    the exp(-distance)-weighted mean radius, stabilized via log-sum-exp.
    """
    coords = np.asarray(coords, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if coords.size == 0:
        raise ad.DomainError("smoothed_sdf needs at least one atom")
    xt = ad.as_tensor(x)
    single = xt.ndim == 1
    pts = ad.reshape(xt, (1, 3)) if single else xt
    diff = ad.sub(ad.reshape(pts, (pts.shape[0], 1, 3)), coords[None, :, :])
    d = ad.norm(diff, axis=2)                      # (P, A)
    s = ad.logsumexp(ad.mul(d, -1.0 / radii), axis=1)
    p = ad.softmax(ad.neg(d), axis=1)
    fbar = ad.reduce_sum(ad.mul(p, radii), axis=1)
    out = ad.neg(ad.mul(fbar, s))
    return out[0] if single else out


def sdf_value_grad(points: np.ndarray, coords: np.ndarray, radii: np.ndarray):
    """Fast numpy evaluation of the smoothed SDF and its spatial gradient."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coords = np.asarray(coords, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if coords.size == 0:
        raise SurfaceError("sdf_value_grad needs at least one atom")
    diff = points[:, None, :] - coords[None, :, :]          # (P, A, 3)
    d = np.linalg.norm(diff, axis=2)                        # (P, A)
    u = diff / np.maximum(d, 1e-12)[..., None]

    a = -d / radii
    m = a.max(axis=1, keepdims=True)
    e = np.exp(a - m)
    z = e.sum(axis=1, keepdims=True)
    s = (np.log(z) + m)[:, 0]
    q = e / z

    b = -d
    mb = b.max(axis=1, keepdims=True)
    eb = np.exp(b - mb)
    p = eb / eb.sum(axis=1, keepdims=True)
    fbar = (p * radii).sum(axis=1)

    sdf = -fbar * s
    grad_s = ((q * (-1.0 / radii))[..., None] * u).sum(axis=1)
    grad_fbar = ((p * (radii - fbar[:, None]))[..., None] * (-u)).sum(axis=1)
    grad = -grad_fbar * s[:, None] - fbar[:, None] * grad_s
    return sdf, grad


# ---------------------------------------------------------------------------
# equivariant candidate sampling and projection
# ---------------------------------------------------------------------------

def intrinsic_frame(coords: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal frame computed from the structure itself.

    Axes are covariance eigenvectors (descending eigenvalue) with signs fixed
    by odd coordinate moments, so the frame rotates with the structure. Highly
    symmetric structures (a single atom, a perfect tetrahedron) have no
    canonical frame and fall back to deterministic but frame-fixed axes.
    """
    coords = np.asarray(coords, dtype=float)
    center = coords.mean(axis=0)
    x = coords - center
    cov = x.T @ x / max(len(x), 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    v = v[:, order]
    scale = max(float(np.abs(x).max()), 1.0)
    for k in range(2):
        proj = x @ v[:, k]
        s = (proj**3).sum()
        if abs(s) < 1e-9 * scale**3:
            s = (proj * (x * x).sum(axis=1)).sum()
        if s < 0:
            v[:, k] = -v[:, k]
    v[:, 2] = np.cross(v[:, 0], v[:, 1])
    return v


def sample_candidates(
    structure: MolecularStructure,
    n_per_atom: int,
    sigma: float,
    rng: np.random.Generator,
    minimum: int = 0,
) -> np.ndarray:
    """Gaussian perturbations around atom centers, drawn in the intrinsic frame."""
    coords = structure.coords
    n_atoms = len(coords)
    per_atom = n_per_atom
    if minimum > 0:
        per_atom = max(per_atom, int(np.ceil(minimum / n_atoms)))
    frame = intrinsic_frame(coords)
    eps = rng.standard_normal((n_atoms, per_atom, 3)) * sigma
    cands = coords[:, None, :] + eps @ frame.T
    return cands.reshape(-1, 3)


def project_to_isosurface(
    candidates: np.ndarray,
    coords: np.ndarray,
    radii: np.ndarray,
    r_iso: float,
    t_sdf: int,
    alpha_sdf: float,
    tol: float = 1e-3,
    m: int | None = None,
    rng: np.random.Generator | None = None,
):
    """Gradient-descend candidates onto the ``r_iso`` level set.

    Runs ``t_sdf`` steps of descent on (SDF - r_iso)^2, drops points outside
    the ``tol`` band, and (optionally) downsamples the survivors to exactly
    ``m`` points uniformly at random with the supplied generator.
    """
    pts = np.array(candidates, dtype=float)
    for _ in range(t_sdf):
        sdf, grad = sdf_value_grad(pts, coords, radii)
        pts = pts - alpha_sdf * 2.0 * (sdf - r_iso)[:, None] * grad
    sdf, _ = sdf_value_grad(pts, coords, radii)
    keep = np.abs(sdf - r_iso) <= tol
    survivors = pts[keep]
    if m is None:
        return survivors
    if len(survivors) < m:
        raise InsufficientSurfaceError(len(survivors), m)
    if rng is None:
        rng = np.random.default_rng(0)
    sel = np.sort(rng.choice(len(survivors), size=m, replace=False))
    return survivors[sel]


def estimate_normals(
    points: np.ndarray,
    coords: np.ndarray,
    radii: np.ndarray,
    mode: str = "sdf-gradient",
    r_probe: float = 1.4,
) -> np.ndarray:
    """Unit outward normals, either from the SDF gradient or from weighted PCA.

    PCA normals use the ``2 r_probe`` point neighborhood with Gaussian weights
    and are sign-aligned with the SDF gradient; degenerate neighborhoods
    (< 3 neighbors) fall back to the SDF gradient for that point.
    """
    points = np.asarray(points, dtype=float)
    _, grad = sdf_value_grad(points, coords, radii)
    grad_n = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    if mode == "sdf-gradient":
        return grad_n
    if mode != "weighted-pca":
        raise SurfaceError(f"unknown normals mode {mode!r}")

    n = len(points)
    diff = points[:, None, :] - points[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    cutoff = 2.0 * r_probe
    normals = np.empty_like(points)
    for i in range(n):
        mask = (dist[i] <= cutoff) & (np.arange(n) != i)
        nbrs = points[mask]
        if len(nbrs) < 3:
            normals[i] = grad_n[i]
            continue
        w = np.exp(-dist[i, mask] ** 2 / cutoff**2)
        mu = (w[:, None] * nbrs).sum(0) / w.sum()
        centered = nbrs - mu
        cov = (w[:, None, None] * centered[:, :, None] * centered[:, None, :]).sum(0) / w.sum()
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        if normal @ grad_n[i] < 0:
            normal = -normal
        normals[i] = normal
    return normals


# ---------------------------------------------------------------------------
# per-point features
# ---------------------------------------------------------------------------

_CHEM_SETS = {
    "hbond": {"O", "N", "S"},
    "pos": {"O", "N"},
    "neg": {"C", "S"},
    "phob": {"C"},
}


def _omega(dist: np.ndarray, r_probe: float, eps: float) -> np.ndarray:
    return 1.0 / (dist / r_probe + eps)


def chemical_features(
    points: np.ndarray,
    structure: MolecularStructure,
    r_chem: float = 5.0,
    r_probe: float = 1.4,
    eps: float = 1e-6,
):
    """(H_bond, charge, hydrophobicity, aromaticity) per point plus empty flags.

    All four are probe-weighted neighborhood statistics over atoms within
    ``r_chem``; an empty neighborhood yields the all-zero tuple and a flag.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coords = structure.coords
    elems = np.array([a.element for a in structure.atoms])
    dist = np.linalg.norm(points[:, None, :] - coords[None, :, :], axis=2)
    w = _omega(dist, r_probe, eps) * (dist <= r_chem)
    denom = w.sum(axis=1)
    empty = denom == 0.0
    safe = np.where(empty, 1.0, denom)

    is_hbond = np.isin(elems, list(_CHEM_SETS["hbond"])).astype(float)
    is_pos = np.isin(elems, list(_CHEM_SETS["pos"])).astype(float)
    is_neg = np.isin(elems, list(_CHEM_SETS["neg"])).astype(float)
    is_phob = np.isin(elems, list(_CHEM_SETS["phob"])).astype(float)

    h_bond = (w * is_hbond).sum(axis=1) / safe
    charge = (w * (is_pos - is_neg)).sum(axis=1) / safe
    h_phob = (w * is_phob).sum(axis=1) / safe
    a_aro = np.clip(h_phob / 4.5, 0.0, 1.0)
    out = np.stack([h_bond, charge, h_phob, a_aro], axis=1)
    out[empty] = 0.0
    return out, empty


def atomic_features(
    points: np.ndarray,
    structure: MolecularStructure,
    r_chem: float = 5.0,
    r_probe: float = 1.4,
    eps: float = 1e-6,
):
    """Probe-weighted one-hot element statistics (6-D protein / 8-D molecule)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    coords = structure.coords
    if structure.molecule_type == "protein":
        vocab = PROTEIN_ELEMENTS
        labels = np.array([a.element for a in structure.atoms])
    else:
        vocab = MOLECULE_TYPES
        labels = np.array([a.type_label for a in structure.atoms])
    onehot = np.stack([(labels == v).astype(float) for v in vocab], axis=1)  # (A, V)
    dist = np.linalg.norm(points[:, None, :] - coords[None, :, :], axis=2)
    w = _omega(dist, r_probe, eps) * (dist <= r_chem)
    raw = w @ onehot
    denom = raw.sum(axis=1)
    empty = denom == 0.0
    out = raw / np.where(empty, 1.0, denom)[:, None]
    out[empty] = 0.0
    return out, empty


def geometric_features(cloud_points: np.ndarray, normals: np.ndarray, k_geom: int = 10):
    """(mean normal variation, covariance-eigenvalue product, local density).

    Density is the mean neighbor distance min-max normalized over the cloud.
    """
    pts = np.asarray(cloud_points, dtype=float)
    n = len(pts)
    if n < k_geom + 1:
        raise SurfaceError(f"geometric features need >= {k_geom + 1} points, got {n}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(dist, np.inf)
    nbr = np.argsort(dist, axis=1, kind="stable")[:, :k_geom]          # (N, k)

    dn = normals[:, None, :] - normals[nbr]                            # (N, k, 3)
    kappa1 = np.linalg.norm(dn, axis=2).mean(axis=1)

    nbr_pts = pts[nbr]                                                 # (N, k, 3)
    mu = nbr_pts.mean(axis=1, keepdims=True)
    centered = nbr_pts - mu
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_geom
    kappa2 = np.linalg.det(cov)

    d_raw = np.take_along_axis(dist, nbr, axis=1).mean(axis=1)
    lo, hi = d_raw.min(), d_raw.max()
    density = np.zeros(n) if hi == lo else (d_raw - lo) / (hi - lo)
    return np.stack([kappa1, kappa2, density], axis=1)


def assemble_features(
    chem: np.ndarray, atom: np.ndarray, geom: np.ndarray, molecule_type: str, points: np.ndarray
) -> np.ndarray:
    """Fixed layout [4 chem | 6-or-8 atom | 3 geom | type flag | 3 coords]."""
    flag = 0.0 if molecule_type == "protein" else 1.0
    n = len(points)
    flags = np.full((n, 1), flag)
    out = np.concatenate([chem, atom, geom, flags, points], axis=1)
    expected = 17 if molecule_type == "protein" else 19
    if out.shape[1] != expected:
        raise SurfaceError(f"feature layout is {out.shape[1]}-D, expected {expected}")
    return out


# ---------------------------------------------------------------------------
# patch partition
# ---------------------------------------------------------------------------

def fps(points: np.ndarray, count, start: int | None = None) -> np.ndarray:
    """Greedy farthest-first selection; deterministic.

    ``count`` may be an int or a ratio in (0, 1]. The default start point
    maximizes distance from the centroid (ties to the lowest index).
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if isinstance(count, float):
        if not (0.0 < count <= 1.0):
            raise SurfaceError(f"fps ratio must lie in (0, 1], got {count}")
        count = max(1, int(round(count * n)))
    if count > n:
        raise SurfaceError(f"fps requested {count} of {n} points")
    if start is None:
        centroid = pts.mean(axis=0)
        start = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    chosen = np.empty(count, dtype=int)
    chosen[0] = start
    min_d = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, np.linalg.norm(pts - pts[nxt], axis=1), out=min_d)
    return chosen


def knn(centers: np.ndarray, points: np.ndarray, k: int, r_patch: float = np.inf):
    """K nearest points per center (ties to the lowest index).

    A patch whose K-th neighbor lies beyond ``r_patch`` keeps its K nearest
    members anyway and is flagged as radius-relaxed.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    pts = np.asarray(points, dtype=float)
    if len(pts) < k:
        raise SurfaceError(f"knn needs at least k={k} points, got {len(pts)}")
    dist = np.linalg.norm(centers[:, None, :] - pts[None, :, :], axis=2)
    order = np.argsort(dist, axis=1, kind="stable")
    members = order[:, :k]
    worst = np.take_along_axis(dist, members, axis=1).max(axis=1)
    relaxed = worst > r_patch
    return members, relaxed


def pool_patch_stats(features: np.ndarray, member_indices: np.ndarray):
    """Per-patch mean and population variance over member features."""
    grouped = features[member_indices]             # (P, K, d)
    mean = grouped.mean(axis=1)
    var = grouped.var(axis=1)
    return mean, var


def interface_labels(
    points: np.ndarray,
    member_indices: np.ndarray,
    partner_points: np.ndarray | None,
    cutoff: float,
):
    """Patch label 1 iff any member point lies within ``cutoff`` of the partner."""
    n_patches = member_indices.shape[0]
    if partner_points is None or len(partner_points) == 0:
        return np.zeros(n_patches), False
    dist = np.linalg.norm(
        points[:, None, :] - np.asarray(partner_points, dtype=float)[None, :, :], axis=2
    )
    near = dist.min(axis=1) <= cutoff
    labels = near[member_indices].any(axis=1).astype(float)
    return labels, True


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def build_surface(
    structure: MolecularStructure,
    cfg: RunConfig,
    seed: int = 0,
    partner_points: np.ndarray | None = None,
) -> tuple[SurfacePointCloud, PatchSet]:
    """Run the full stage-1 construction for one structure."""
    rng = np.random.default_rng(seed)
    coords, radii = structure.coords, structure.radii
    is_protein = structure.molecule_type == "protein"
    m = cfg.m_for(structure.molecule_type, len(coords))
    per_atom = cfg.eta_protein if is_protein else cfg.eta_molecule
    cands = sample_candidates(structure, per_atom, cfg.sigma_upsample, rng, minimum=2 * m)
    points = project_to_isosurface(
        cands, coords, radii, cfg.r_probe, cfg.t_sdf, cfg.alpha_sdf,
        tol=cfg.projection_tol, m=m, rng=rng,
    )
    normals = estimate_normals(points, coords, radii, cfg.normals_mode, cfg.r_probe)
    chem, chem_empty = chemical_features(points, structure, cfg.r_chem, cfg.r_probe, cfg.eps_omega)
    atom, atom_empty = atomic_features(points, structure, cfg.r_chem, cfg.r_probe, cfg.eps_omega)
    geom = geometric_features(points, normals, cfg.k_geom)
    features = assemble_features(chem, atom, geom, structure.molecule_type, points)
    cloud = SurfacePointCloud(
        points, normals, features, structure.molecule_type,
        empty_flags=chem_empty | atom_empty,
    )

    n_centers = max(1, int(round(cfg.rho * m)))
    centers = fps(points, n_centers)
    members, relaxed = knn(points[centers], points, cfg.patch_k, cfg.r_patch)
    mean, var = pool_patch_stats(features, members)
    cutoff = cfg.interface_cutoff_ligand if is_protein else cfg.interface_cutoff_protein
    labels, labeled = interface_labels(points, members, partner_points, cutoff)
    patches = PatchSet(centers, members, mean, var, labels, relaxed, labeled)
    return cloud, patches
