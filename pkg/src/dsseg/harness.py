"""Training and experiment machinery: Adam, cross-validation folds, the
minibatch loop, lambda grid search, full-volume evaluation and the
post-hoc domain probe."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses, metrics, networks, patchflow
from .networks import ArchSpec, ModelBundle
from .synthdata import Dataset, VolumeSample
from .tensor import Tensor

PAPER_LAMBDAS = {"PC": 0.2, "DU": 0.3, "RAND": 0.1}


@dataclass
class TrainConfig:
    variant: str = "BM"
    lam: float = 0.0
    lr: float = 0.0001
    batch_size: int = 4
    epochs: int = 5
    steps_per_epoch: int = 20
    patch_extent: int = 32
    seed: int = 0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # architecture (desk-scale defaults)
    in_channels: int = 4
    base_channels: int = 4
    stages: int = 4
    reg_hidden: Tuple[int, int] = (64, 32)
    dropout_rate: float = 0.5  # used by BDM only
    init_sigma: float = 0.05
    head_init_sigma: Optional[float] = None  # None -> init_sigma
    overlap: float = 0.5
    threshold: float = 0.5
    connectivity: int = 26

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.variant not in networks.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def loss_variant(self) -> str:
        return self.variant if self.variant in losses.REG_VARIANTS else "NONE"


@dataclass
class FoldPlan:
    fold_id: int
    train_ids: List[int]
    val_ids: List[int]
    test_ids: List[int]


@dataclass
class TrainHistory:
    step_total: List[float] = field(default_factory=list)
    step_seg: List[float] = field(default_factory=list)
    step_reg: List[float] = field(default_factory=list)
    val_dsc: List[float] = field(default_factory=list)
    stamps: List[float] = field(default_factory=list)


# -- optimizer ---------------------------------------------------------


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """Standard bias-corrected Adam update, in place."""
    b1, b2 = cfg.adam_betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.values -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(
            p.values.dtype)


# -- cross-validation --------------------------------------------------


def make_folds(subject_ids: Sequence[int], k: int = 5,
               seed: int = 0) -> List[FoldPlan]:
    """Seeded rotation: k test blocks of ~20%, remainder split 75/25 into
    train/val (i.e. 60/20/20 overall)."""
    ids = list(subject_ids)
    if len(ids) < k:
        raise ValueError(f"need at least {k} subjects, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    blocks = [list(b) for b in np.array_split(np.array(order), k)]
    plans = []
    for fold_id in range(k):
        test = [int(s) for s in blocks[fold_id]]
        rest = [int(s) for j in range(k) if j != fold_id for s in blocks[j]]
        n_train = round(len(rest) * 0.75)
        plans.append(FoldPlan(fold_id, rest[:n_train], rest[n_train:], test))
    return plans


# -- training ----------------------------------------------------------


def _site_index(dataset: Dataset) -> Dict[int, int]:
    return {site: i for i, site in enumerate(sorted(set(dataset.site_ids)))}


def _lesion_pool(samples: Sequence[VolumeSample], extent: int, overlap: float,
                 site_idx: Dict[int, int]):
    pool = []
    for s in samples:
        records = patchflow.extract_patches(s.volume, s.mask, extent, overlap)
        for r in patchflow.filter_lesion_patches(records):
            pool.append((r.data, r.mask_patch, site_idx[s.site_id]))
    return pool


def build_from_config(cfg: TrainConfig, n_domains: int) -> ModelBundle:
    spec = ArchSpec(
        in_channels=cfg.in_channels, base_channels=cfg.base_channels,
        stages=cfg.stages, n_domains=n_domains, reg_hidden=cfg.reg_hidden,
        dropout_rate=cfg.dropout_rate if cfg.variant == "BDM" else 0.0)
    return networks.build_model(spec, cfg.variant, seed=cfg.seed,
                                init_sigma=cfg.init_sigma,
                                head_init_sigma=cfg.head_init_sigma)


def train_model(cfg: TrainConfig, fold: FoldPlan,
                dataset: Dataset) -> Tuple[ModelBundle, TrainHistory]:
    site_idx = _site_index(dataset)
    train_samples = [dataset.load(i) for i in fold.train_ids]
    val_samples = [dataset.load(i) for i in fold.val_ids]
    pool = _lesion_pool(train_samples, cfg.patch_extent, cfg.overlap, site_idx)
    if not pool:
        raise ValueError(
            "no training patch contains a lesion voxel; regenerate the "
            "cohort with more or larger lesions")

    model = build_from_config(cfg, n_domains=len(site_idx))
    params = model.parameters()
    state = AdamState()
    loss_cfg = losses.LossConfig(variant=cfg.loss_variant(), lam=cfg.lam,
                                 rng_seed=cfg.seed)

    ss = np.random.SeedSequence([cfg.seed, 0x7124])
    batch_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s)
                                           for s in ss.spawn(3))
    history = TrainHistory()
    best_dsc = -1.0
    best_params = None

    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            idx = batch_rng.integers(len(pool), size=cfg.batch_size)
            model.zero_grad()
            tot = seg = reg = 0.0
            for i in idx:
                data, mask, dom = pool[int(i)]
                patch = Tensor(np.ascontiguousarray(data))
                s, c = networks.forward_train(model, patch,
                                              dropout_rng=dropout_rng)
                l_seg = losses.soft_dice(s[1], mask)
                if c is not None:
                    l_reg = losses.regularization_loss(c, loss_cfg, dom,
                                                       rng=shuffle_rng)
                else:
                    l_reg = None
                l = losses.combined_loss(l_seg, l_reg, loss_cfg)
                (l * (1.0 / cfg.batch_size)).backward()
                tot += l.item() / cfg.batch_size
                seg += l_seg.item() / cfg.batch_size
                reg += (l_reg.item() / cfg.batch_size) if l_reg is not None else 0.0
            if not np.isfinite(tot):
                raise FloatingPointError(f"non-finite loss at step {state.t}")
            grads = {name: p.grad for name, p in params.items()}
            adam_step(params, grads, state, cfg)
            history.step_total.append(tot)
            history.step_seg.append(seg)
            history.step_reg.append(reg)
            history.stamps.append(time.time())

        if val_samples:
            dscs = [_subject_dsc(model, s, cfg) for s in val_samples]
            val = float(np.mean(dscs))
        else:
            val = float("nan")
        history.val_dsc.append(val)
        if val_samples and val > best_dsc:
            best_dsc = val
            best_params = {n: p.values.copy() for n, p in params.items()}

    if best_params is not None:
        for n, p in params.items():
            p.values = best_params[n]
    return model, history


def predict_volume(model: ModelBundle, sample: VolumeSample,
                   cfg: TrainConfig) -> np.ndarray:
    """Patch-wise inference fused into a full lesion-probability volume."""
    origins = patchflow.extract_grid(sample.volume.shape[1:],
                                     cfg.patch_extent, cfg.overlap)
    preds = []
    e = cfg.patch_extent
    for z, y, x in origins:
        patch = Tensor(np.ascontiguousarray(
            sample.volume[:, z:z + e, y:y + e, x:x + e]))
        s = networks.forward_infer(model, patch)
        preds.append(((z, y, x), s.values[1]))
    return patchflow.fuse(preds, sample.volume.shape[1:])


def _subject_dsc(model, sample, cfg) -> float:
    probs = predict_volume(model, sample, cfg)
    counts = metrics.confusion(metrics.binarize(probs, cfg.threshold),
                               sample.mask)
    d = metrics.dsc(counts)
    return 0.0 if np.isnan(d) else d


def grid_search_lambda(cfg: TrainConfig, values: Sequence[float],
                       fold: FoldPlan, dataset: Dataset) -> float:
    """Best lambda by mean validation DSC; ties go to the smaller value."""
    if not values:
        raise ValueError("empty lambda grid")
    best = None
    for lam in sorted(values):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda {lam} outside [0, 1]")
        _, history = train_model(replace(cfg, lam=lam), fold, dataset)
        score = float(np.nanmax(history.val_dsc))
        if best is None or score > best[1]:
            best = (lam, score)
    return best[0]


def evaluate(model: ModelBundle, subjects: Sequence[VolumeSample],
             cfg: TrainConfig, train_sites: Sequence[int]) -> metrics.MetricsReport:
    """Full-volume test evaluation with the regularization head detached."""
    train_sites = set(train_sites)
    report = metrics.MetricsReport()
    for sample in subjects:
        probs = predict_volume(model, sample, cfg)
        pred = metrics.binarize(probs, cfg.threshold)
        vals = metrics.evaluate_masks(pred, sample.mask, cfg.connectivity)
        report.add(sample.subject_id, sample.site_id,
                   sample.site_id in train_sites, vals)
    return report


# -- domain probe ------------------------------------------------------


def _probe_forward(x, w1, b1, w2, b2):
    h = np.maximum(w1 @ x + b1, 0.0)
    logits = w2 @ h + b2
    e = np.exp(logits - logits.max())
    return h, e / e.sum()


def probe_domain_accuracy(model: ModelBundle, subjects: Sequence[VolumeSample],
                          probe_seed: int = 0, crop_extent: int = 32,
                          crop_overlap: float = 0.0,
                          latents: Optional[np.ndarray] = None,
                          labels: Optional[np.ndarray] = None) -> float:
    """Freeze the encoder, train a fresh 2-layer site classifier on latent
    vectors from grid crops, return held-out accuracy."""
    sites = sorted({s.site_id for s in subjects})
    if len(sites) < 2:
        raise ValueError("domain probe needs subjects from at least 2 sites")
    site_idx = {site: i for i, site in enumerate(sites)}
    if latents is None:
        feats, labs = [], []
        for s in subjects:
            for z, y, x in patchflow.extract_grid(s.volume.shape[1:],
                                                  crop_extent,
                                                  overlap=crop_overlap):
                patch = Tensor(np.ascontiguousarray(
                    s.volume[:, z:z + crop_extent, y:y + crop_extent,
                             x:x + crop_extent]))
                bott, _ = networks.encode(model, patch)
                feats.append(networks.to_latent(bott).values.astype(np.float64))
                labs.append(site_idx[s.site_id])
        latents = np.array(feats)
        labels = np.array(labs)
    return _train_probe(latents, np.asarray(labels), len(sites), probe_seed)


def _train_probe(latents: np.ndarray, labels: np.ndarray, n_classes: int,
                 seed: int, hidden: int = 32, steps: int = 2000,
                 lr: float = 0.1) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE0]))
    n = len(latents)
    order = rng.permutation(n)
    n_train = max(1, int(round(n * 0.8)))
    tr, te = order[:n_train], order[n_train:]
    mu = latents[tr].mean(axis=0)
    sd = latents[tr].std(axis=0) + 1e-6
    x_all = (latents - mu) / sd
    p = latents.shape[1]
    w1 = rng.normal(0, 0.1, (hidden, p))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0, 0.1, (n_classes, hidden))
    b2 = np.zeros(n_classes)
    xt, yt = x_all[tr], labels[tr]
    for _ in range(steps):
        # full-batch gradient of softmax cross-entropy, manual backprop
        h = np.maximum(xt @ w1.T + b1, 0.0)
        logits = h @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        d_logits = probs.copy()
        d_logits[np.arange(len(yt)), yt] -= 1.0
        d_logits /= len(yt)
        gw2 = d_logits.T @ h
        gb2 = d_logits.sum(axis=0)
        dh = (d_logits @ w2) * (h > 0)
        gw1 = dh.T @ xt
        gb1 = dh.sum(axis=0)
        w1 -= lr * gw1
        b1 -= lr * gb1
        w2 -= lr * gw2
        b2 -= lr * gb2
    h = np.maximum(x_all[te] @ w1.T + b1, 0.0)
    pred = (h @ w2.T + b2).argmax(axis=1)
    return float(np.mean(pred == labels[te])) if len(te) else float("nan")


# -- config + history IO -----------------------------------------------


def parse_config(path) -> Dict[str, object]:
    """`key = value` lines; '#' starts a comment; values typed as
    int, float or string."""
    out: Dict[str, object] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            for cast in (int, float):
                try:
                    out[key] = cast(value)
                    break
                except ValueError:
                    continue
            else:
                out[key] = value
    return out


def write_history_csv(history: TrainHistory, steps_path, epochs_path):
    with open(steps_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_total", "loss_seg", "loss_reg"])
        for i, (t, s, r) in enumerate(zip(history.step_total, history.step_seg,
                                          history.step_reg)):
            w.writerow([i, f"{t:.6f}", f"{s:.6f}", f"{r:.6f}"])
    with open(epochs_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "val_dsc"])
        for i, v in enumerate(history.val_dsc):
            w.writerow([i, f"{v:.6f}"])
