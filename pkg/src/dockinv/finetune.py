"""Stage 3: cascaded supervised heads over fused receptor-ligand embeddings.

Pocket probabilities gate the interaction loss, and the pocket-interaction
product (floored at a confidence threshold) weights the affinity regression.
Affinities are standardized to zero mean / unit variance over the training
split; the statistics ride along in checkpoints so predictions can be
de-standardized exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .model import PipelineModel, adam_step, as_tensors, collect_grads
from .structures import parse_molecule, parse_pdb
from .surface import PatchSet, SurfacePointCloud, build_surface

__all__ = [
    "ComplexSample",
    "AffinityScaler",
    "geometric_pseudolabels",
    "bce",
    "pocket_loss",
    "interaction_loss",
    "affinity_loss",
    "complex_forward",
    "finetune_loss",
    "finetune_step",
    "finetune_run",
    "load_complex_dir",
]


@dataclass
class ComplexSample:
    receptor: SurfacePointCloud
    receptor_patches: PatchSet
    ligand: SurfacePointCloud
    ligand_patches: PatchSet
    pocket_labels: np.ndarray          # (N_r,) in {0, 1}
    y_int: float                       # complex-level interaction label
    delta_g: float | None              # standardized when fed to the loss
    receptor_geom: dict | None = None
    ligand_geom: dict | None = None


@dataclass
class AffinityScaler:
    """Z-scoring of affinities; round-trips the kcal/mol scale exactly."""

    mean: float
    std: float

    @staticmethod
    def fit(values: list[float]) -> "AffinityScaler":
        arr = np.asarray([v for v in values if v is not None], dtype=float)
        if arr.size == 0:
            return AffinityScaler(0.0, 1.0)
        std = float(arr.std())
        return AffinityScaler(float(arr.mean()), std if std > 0 else 1.0)

    def standardize(self, value: float) -> float:
        return (value - self.mean) / self.std

    def destandardize(self, value: float) -> float:
        return value * self.std + self.mean


def geometric_pseudolabels(receptor_points: np.ndarray, ligand_points: np.ndarray,
                           cutoff: float = 4.0) -> np.ndarray:
    """1 where the nearest ligand point lies within ``cutoff`` of the receptor point."""
    r = np.asarray(receptor_points, dtype=float)
    l = np.asarray(ligand_points, dtype=float)
    if len(r) == 0 or len(l) == 0:
        raise ad.DomainError("geometric pseudo-labels need non-empty clouds")
    dist = np.linalg.norm(r[:, None, :] - l[None, :, :], axis=2)
    return (dist.min(axis=1) <= cutoff).astype(float)


def bce(pred: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy with [1e-7, 1-1e-7] clamping."""
    p = ad.clip(pred, 1e-7, 1.0 - 1e-7)
    t = np.asarray(target, dtype=float)
    return ad.neg(ad.add(ad.mul(t, ad.log(p)), ad.mul(1.0 - t, ad.log(ad.sub(1.0, p)))))


def pocket_loss(pred: Tensor, labels, geom_labels, lambda_p: float) -> Tensor:
    """Mean BCE against labels plus the squared pull toward pseudo-labels."""
    base = ad.reduce_mean(bce(pred, labels))
    dev = ad.sub(ad.clip(pred, 1e-7, 1.0 - 1e-7), np.asarray(geom_labels, dtype=float))
    reg = ad.reduce_mean(ad.mul(dev, dev))
    return ad.add(base, ad.mul(reg, lambda_p))


def interaction_loss(pocket_pred: Tensor, int_pred: Tensor, y_int) -> Tensor:
    """Pocket-gated BCE; ``int_pred`` may be scalar (broadcast) or per-point."""
    n_r = pocket_pred.shape[0]
    if int_pred.ndim == 0:
        int_pred = ad.reshape(int_pred, (1,))
    if int_pred.shape[0] == 1 and n_r > 1:
        int_pred = ad.gather(int_pred, np.zeros(n_r, dtype=int))
    per_point = ad.mul(pocket_pred, bce(int_pred, y_int))
    return ad.reduce_mean(per_point)


def affinity_loss(gate: Tensor, pred_dg: Tensor, target_dg: float, tau_conf: float) -> Tensor:
    """Confidence-floored squared error for one labeled pair."""
    w = ad.clip(gate, tau_conf, None)
    err = ad.sub(pred_dg, float(target_dg))
    return ad.mul(w, ad.mul(err, err))


# ---------------------------------------------------------------------------
# forward pass and training
# ---------------------------------------------------------------------------

def complex_forward(mdl: PipelineModel, params_t: dict, sample: ComplexSample, cfg: RunConfig):
    """Encode both clouds, fuse, and run all three heads.

    Returns (pocket probabilities, interaction probability, predicted
    affinity, gate tensor used by the affinity loss).
    """
    zr = mdl.encode(params_t, sample.receptor.features, sample.receptor.points,
                    "protein", geom=sample.receptor_geom)
    zl = mdl.encode(params_t, sample.ligand.features, sample.ligand.points,
                    sample.ligand.molecule_type, geom=sample.ligand_geom)
    attended, fused, _ = mdl.fuse(params_t, zr, zl)
    d = mdl.d0
    orig0 = ad.reshape(zr.channels[0], (-1, d))
    att0 = ad.reshape(attended.channels[0], (-1, d))
    per_point = ad.concat([orig0, att0], axis=1)
    pocket = mdl.pocket_head(params_t, per_point)
    if cfg.interaction_mode == "per-point":
        y_int_hat = ad.reshape(mdl._mlp_head(params_t, "int", per_point, ad.sigmoid), (-1,))
        gate = ad.reduce_max(ad.mul(pocket, y_int_hat))
    else:
        y_int_hat = mdl.interaction_head(params_t, fused)
        gate = ad.mul(ad.reduce_max(pocket), y_int_hat)
    dg_hat = mdl.affinity_head(params_t, fused)
    return pocket, y_int_hat, dg_hat, gate


def finetune_loss(mdl: PipelineModel, params_t: dict, batch: list[ComplexSample],
                  cfg: RunConfig) -> tuple[Tensor, dict]:
    """alpha * pocket + beta * interaction + affinity, averaged over the batch."""
    terms_p, terms_i, terms_g = [], [], []
    labeled = 0
    for sample in batch:
        pocket, y_int_hat, dg_hat, gate = complex_forward(mdl, params_t, sample, cfg)
        y_geom = geometric_pseudolabels(sample.receptor.points, sample.ligand.points,
                                        cfg.interface_cutoff_ligand)
        terms_p.append(pocket_loss(pocket, sample.pocket_labels, y_geom, cfg.lambda_p))
        terms_i.append(interaction_loss(pocket, y_int_hat, sample.y_int))
        if sample.delta_g is not None:
            terms_g.append(affinity_loss(gate, dg_hat, sample.delta_g, cfg.tau_conf))
            labeled += 1
    lp = _mean(terms_p)
    li = _mean(terms_i)
    lg = _mean(terms_g) if terms_g else ad.constant(0.0)
    total = ad.add(ad.add(ad.mul(lp, cfg.alpha), ad.mul(li, cfg.beta)), lg)
    parts = {
        "pocket": lp.item(), "interaction": li.item(),
        "affinity": lg.item(), "labeled": labeled,
    }
    for name in ("pocket", "interaction", "affinity"):
        if not np.isfinite(parts[name]):
            raise ad.DomainError(f"non-finite fine-tuning loss term '{name}'")
    return total, parts


def _mean(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.mul(acc, 1.0 / len(terms))


def finetune_step(mdl: PipelineModel, params: dict, opt_state: dict,
                  batch: list[ComplexSample], cfg: RunConfig) -> dict:
    params_t = as_tensors(params)
    total, parts = finetune_loss(mdl, params_t, batch, cfg)
    ad.backward(total)
    grads = collect_grads(params_t)
    adam_step(params, grads, opt_state, cfg.finetune_lr, weight_decay=cfg.weight_decay)
    return {"loss": total.item(), **parts}


def finetune_run(samples: list[ComplexSample], cfg: RunConfig, steps: int, seed: int = 0,
                 mdl: PipelineModel | None = None, params: dict | None = None,
                 batch_size: int = 4, log=None) -> tuple[dict, list[dict]]:
    """Seed-deterministic fine-tuning loop (encoder init may come from stage 2)."""
    mdl = mdl or PipelineModel(cfg)
    params = params if params is not None else mdl.init_params(seed)
    opt_state: dict = {}
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    history = []
    for step in range(steps):
        idx = order_rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        batch = [samples[i] for i in np.sort(idx)]
        record = finetune_step(mdl, params, opt_state, batch, cfg)
        record["step"] = step
        history.append(record)
        if log is not None:
            log(record)
    return params, history


# ---------------------------------------------------------------------------
# corpus loading
# ---------------------------------------------------------------------------

def _parse_sidecar(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, _, value = body.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_complex_dir(root, cfg: RunConfig, mdl: PipelineModel, seed: int = 0,
                     scaler: AffinityScaler | None = None):
    """Load a directory of complexes.

    Each complex is a subdirectory holding ``receptor.pdb``, a ligand file
    (``ligand.mol`` text format or ``ligand.pdb``), and ``labels.txt`` with
    ``y_int = 0|1``, optional ``delta_g = <kcal/mol>``, and an optional
    ``pocket = 0101...`` bitmask over receptor surface points (derived from
    ligand geometry when omitted). Returns (samples, fitted scaler).
    """
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no complex subdirectories under {root}")
    raw = []
    for i, d in enumerate(dirs):
        receptor = parse_pdb((d / "receptor.pdb").read_text())
        mol_path = d / "ligand.mol"
        if mol_path.exists():
            ligand = parse_molecule(mol_path.read_text())
        else:
            ligand = parse_pdb((d / "ligand.pdb").read_text())
        labels = _parse_sidecar((d / "labels.txt").read_text())
        y_int = float(labels.get("y_int", "1"))
        dg_raw = labels.get("delta_g", "")
        delta_g = None if dg_raw in ("", "none", "nan") else float(dg_raw)
        raw.append((receptor, ligand, labels, y_int, delta_g, i))
    if scaler is None:
        scaler = AffinityScaler.fit([r[4] for r in raw])
    samples = []
    for receptor, ligand, labels, y_int, delta_g, i in raw:
        r_cloud, r_patches = build_surface(receptor, cfg, seed=seed * 9973 + 2 * i,
                                           partner_points=ligand.coords)
        l_cloud, l_patches = build_surface(ligand, cfg, seed=seed * 9973 + 2 * i + 1,
                                           partner_points=receptor.coords)
        mask = labels.get("pocket", "")
        if mask:
            if len(mask) != len(r_cloud.points):
                raise ValueError(
                    f"pocket bitmask length {len(mask)} != {len(r_cloud.points)} points"
                )
            pocket = np.array([c == "1" for c in mask], dtype=float)
        else:
            pocket = geometric_pseudolabels(r_cloud.points, ligand.coords,
                                            cfg.interface_cutoff_ligand)
        samples.append(ComplexSample(
            r_cloud, r_patches, l_cloud, l_patches, pocket, y_int,
            None if delta_g is None else scaler.standardize(delta_g),
            receptor_geom=mdl.precompute_geometry(r_cloud.points, "protein"),
            ligand_geom=mdl.precompute_geometry(l_cloud.points, l_cloud.molecule_type),
        ))
    return samples, scaler
